#include "testagent/selection.hpp"

#include <cmath>
#include <random>

#include "testagent/random.hpp"

namespace testagent {

std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::random:
      return "random";
    case Strategy::fsi:
      return "fsi";
    case Strategy::kli:
      return "kli";
    case Strategy::maat:
      return "maat";
  }
  return "unknown";
}

Strategy parse_strategy(std::string_view name) {
  if (name == "random") return Strategy::random;
  if (name == "fsi") return Strategy::fsi;
  if (name == "kli") return Strategy::kli;
  if (name == "maat") return Strategy::maat;
  throw std::invalid_argument("unknown strategy '" + std::string(name) + "'");
}

void KliConfig::validate() const {
  if (!(delta_scale > 0.0)) throw std::invalid_argument("delta_scale must be > 0");
  if (quadrature_points < 3 || quadrature_points % 2 == 0) {
    throw std::invalid_argument("quadrature_points must be odd and >= 3");
  }
}

namespace {

double theta_on(const SelectionContext& ctx, const Item& item) {
  return ctx.theta.values.at(static_cast<std::size_t>(item.dimension));
}

// Argmax of `score` over unasked items; ties go to the lowest id.
template <typename Score>
std::string argmax_unasked(const ItemBank& bank, const SelectionContext& ctx, Score&& score) {
  const Item* best = nullptr;
  double best_score = 0.0;
  for (const auto& item : bank.items()) {
    if (ctx.asked.contains(item.id)) continue;
    const double s = score(item);
    if (best == nullptr || s > best_score || (s == best_score && item.id < best->id)) {
      best = &item;
      best_score = s;
    }
  }
  if (best == nullptr) throw BankExhausted();
  return best->id;
}

}  // namespace

std::string select_random(const ItemBank& bank, const SelectionContext& ctx) {
  std::vector<const Item*> open;
  for (const auto& item : bank.items()) {
    if (!ctx.asked.contains(item.id)) open.push_back(&item);
  }
  if (open.empty()) throw BankExhausted();
  std::mt19937_64 rng(derive_seed(ctx.rng_seed, {static_cast<std::uint64_t>(ctx.step)}));
  std::uniform_int_distribution<std::size_t> pick(0, open.size() - 1);
  return open[pick(rng)]->id;
}

std::string select_fsi(const ItemBank& bank, const SelectionContext& ctx) {
  return argmax_unasked(bank, ctx, [&](const Item& item) { return fisher_info(theta_on(ctx, item), item); });
}

double kli_index(double theta_hat, double delta, const Item& item, int quadrature_points) {
  const int n = quadrature_points;
  const double h = 2.0 * delta / (n - 1);
  double sum = 0.0;
  for (int k = 0; k < n; ++k) {
    const double s = theta_hat - delta + h * k;
    const double w = (k == 0 || k == n - 1) ? 0.5 : 1.0;
    sum += w * kl_item(theta_hat, s, item);
  }
  return sum * h;
}

std::string select_kli(const ItemBank& bank, const SelectionContext& ctx, const KliConfig& config) {
  config.validate();
  if (ctx.step < 1) throw std::invalid_argument("KLI selection needs step >= 1");
  const double delta = config.delta_scale / std::sqrt(static_cast<double>(ctx.step));
  return argmax_unasked(bank, ctx, [&](const Item& item) {
    return kli_index(theta_on(ctx, item), delta, item, config.quadrature_points);
  });
}

double expected_model_change(const ItemBank& bank, const Item& item, const SelectionContext& ctx,
                             const MaatConfig& config) {
  EstimationConfig inner = config.estimation;
  inner.max_iters = config.warm_start_iters;
  inner.grid_fallback = false;

  std::vector<ResponseRecord> extended(ctx.records.begin(), ctx.records.end());
  extended.push_back(ResponseRecord{item.id, 0, std::nullopt, {}});
  const auto probs = category_probs(ctx.theta, item);
  const std::span<const double> start(ctx.theta.values);

  double emc = 0.0;
  for (int m = 0; m <= item.num_levels; ++m) {
    extended.back().label = m;
    const auto updated = estimate_ability(extended, bank, inner, start);
    double dist2 = 0.0;
    for (std::size_t d = 0; d < updated.values.size(); ++d) {
      const double diff = updated.values[d] - ctx.theta.values[d];
      dist2 += diff * diff;
    }
    emc += probs[static_cast<std::size_t>(m)] * std::sqrt(dist2);
  }
  return emc;
}

std::string select_maat(const ItemBank& bank, const SelectionContext& ctx, const MaatConfig& config) {
  return argmax_unasked(bank, ctx, [&](const Item& item) { return expected_model_change(bank, item, ctx, config); });
}

std::string select_item(Strategy strategy, const ItemBank& bank, const SelectionContext& ctx,
                        const SelectionConfig& config) {
  switch (strategy) {
    case Strategy::random:
      return select_random(bank, ctx);
    case Strategy::fsi:
      return select_fsi(bank, ctx);
    case Strategy::kli:
      return select_kli(bank, ctx, config.kli);
    case Strategy::maat:
      return select_maat(bank, ctx, config.maat);
  }
  throw std::invalid_argument("unknown strategy");
}

}  // namespace testagent
