#include "testagent/estimation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <stdexcept>

#include "testagent/random.hpp"

namespace testagent {

void EstimationConfig::validate() const {
  if (!(prior_variance > 0.0)) throw std::invalid_argument("prior_variance must be > 0");
  if (grid_points < 3) throw std::invalid_argument("grid_points must be >= 3");
  if (!(grid_lo < grid_hi)) throw std::invalid_argument("grid_lo must be < grid_hi");
  if (max_iters < 1) throw std::invalid_argument("max_iters must be >= 1");
}

namespace {

struct Term {
  std::size_t bank_index;
  const Item* item;
  int label;
};

// Records grouped by dimension, each group in (bank index, label) order so
// that sums do not depend on the order answers arrived in.
std::vector<std::vector<Term>> group_by_dimension(std::span<const ResponseRecord> records, const ItemBank& bank) {
  std::vector<std::vector<Term>> groups(static_cast<std::size_t>(bank.dimensions()));
  for (const auto& r : records) {
    const auto index = bank.index_of(r.item_id);
    if (!index) throw std::out_of_range("unknown item id '" + r.item_id + "'");
    const Item& item = bank[*index];
    if (r.label < 0 || r.label > item.num_levels) {
      throw std::invalid_argument("label " + std::to_string(r.label) + " outside range for item '" + item.id + "'");
    }
    groups[static_cast<std::size_t>(item.dimension)].push_back(Term{*index, &item, r.label});
  }
  for (auto& g : groups) {
    std::sort(g.begin(), g.end(), [](const Term& a, const Term& b) {
      return a.bank_index != b.bank_index ? a.bank_index < b.bank_index : a.label < b.label;
    });
  }
  return groups;
}

class DimensionObjective {
 public:
  DimensionObjective(const std::vector<Term>& terms, double prior_variance)
      : terms_(terms), inv_var_(1.0 / prior_variance) {}

  double value(double theta) const {
    double f = -0.5 * theta * theta * inv_var_;
    for (const auto& t : terms_) f += log_category_prob(theta, *t.item, t.label);
    return f;
  }
  double gradient(double theta) const {
    double g = -theta * inv_var_;
    for (const auto& t : terms_) g += score(theta, *t.item, t.label);
    return g;
  }
  double curvature(double theta) const {
    double h = inv_var_;
    for (const auto& t : terms_) h += neg_hessian(theta, *t.item, t.label);
    return h;
  }

 private:
  const std::vector<Term>& terms_;
  double inv_var_;
};

double clamp_theta(double t) { return std::clamp(t, -kThetaClamp, kThetaClamp); }

void require_finite(double f) {
  if (!std::isfinite(f)) throw std::runtime_error("non-finite estimation objective (corrupt item bank?)");
}

struct DimensionResult {
  double theta;
  double objective;
  bool converged;
};

DimensionResult grid_argmax(const DimensionObjective& obj, const EstimationConfig& config) {
  const double step = config.grid_step();
  double best_theta = config.grid_lo;
  double best = obj.value(best_theta);
  for (int k = 1; k < config.grid_points; ++k) {
    const double t = config.grid_lo + step * k;
    const double f = obj.value(t);
    if (f > best) {
      best = f;
      best_theta = t;
    }
  }
  require_finite(best);
  return {best_theta, best, true};
}

DimensionResult newton(const DimensionObjective& obj, double start, const EstimationConfig& config) {
  double theta = clamp_theta(start);
  double f = obj.value(theta);
  require_finite(f);
  bool converged = false;
  for (int iter = 0; iter < config.max_iters; ++iter) {
    const double g = obj.gradient(theta);
    if (std::abs(g) < config.grad_tol || (theta >= kThetaClamp && g > 0.0) || (theta <= -kThetaClamp && g < 0.0)) {
      converged = true;
      break;
    }
    double step = g / obj.curvature(theta);
    bool accepted = false;
    double trial = theta;
    double f_trial = f;
    for (int halving = 0; halving < 60; ++halving) {
      trial = clamp_theta(theta + step);
      f_trial = obj.value(trial);
      if (f_trial >= f) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    require_finite(f_trial);
    if (!accepted || trial == theta) {
      // No representable ascent step left: we are at the optimum to machine precision.
      converged = std::abs(g) < std::sqrt(config.grad_tol);
      break;
    }
    theta = trial;
    f = f_trial;
  }
  if (!converged) {
    const double g = obj.gradient(theta);
    converged = std::abs(g) < config.grad_tol;
  }
  return {theta, f, converged};
}

}  // namespace

double map_objective(const AbilityEstimate& theta, std::span<const ResponseRecord> records, const ItemBank& bank,
                     const EstimationConfig& config) {
  double penalty = 0.0;
  for (double v : theta.values) penalty += v * v;
  return log_likelihood(theta, records, bank) - 0.5 * penalty / config.prior_variance;
}

AbilityEstimate estimate_ability(std::span<const ResponseRecord> records, const ItemBank& bank,
                                 const EstimationConfig& config, std::optional<std::span<const double>> warm_start) {
  config.validate();
  const auto dims = static_cast<std::size_t>(bank.dimensions());
  if (warm_start && warm_start->size() != dims) {
    throw std::invalid_argument("warm start has wrong dimension count");
  }
  const auto groups = group_by_dimension(records, bank);
  AbilityEstimate est = AbilityEstimate::zero(bank.dimensions());
  est.step = static_cast<int>(records.size());
  for (std::size_t d = 0; d < dims; ++d) {
    if (groups[d].empty() && !warm_start) continue;  // prior mode
    const DimensionObjective obj(groups[d], config.prior_variance);
    const double start = warm_start ? (*warm_start)[d] : 0.0;
    DimensionResult r = newton(obj, start, config);
    if (!r.converged && config.grid_fallback) {
      r = grid_argmax(obj, config);
      r.converged = false;
    }
    est.values[d] = r.theta;
    est.objective += r.objective;
    est.converged = est.converged && r.converged;
  }
  return est;
}

AbilityEstimate brute_force_mle(std::span<const ResponseRecord> records, const ItemBank& bank,
                                const EstimationConfig& config) {
  config.validate();
  const auto groups = group_by_dimension(records, bank);
  AbilityEstimate est = AbilityEstimate::zero(bank.dimensions());
  est.step = static_cast<int>(records.size());
  for (std::size_t d = 0; d < groups.size(); ++d) {
    if (groups[d].empty()) continue;
    const DimensionResult r = grid_argmax(DimensionObjective(groups[d], config.prior_variance), config);
    est.values[d] = r.theta;
    est.objective += r.objective;
  }
  return est;
}

// ---------------------------------------------------------------------------
// Calibration

void CalibrationConfig::validate() const {
  estimation.validate();
  if (min_responses < 1) throw std::invalid_argument("min_responses must be >= 1");
  if (!(validation_fraction > 0.0 && validation_fraction < 1.0)) {
    throw std::invalid_argument("validation_fraction must lie in (0, 1)");
  }
  if (max_epochs < 1 || patience < 1 || item_steps < 1) {
    throw std::invalid_argument("max_epochs, patience and item_steps must be >= 1");
  }
  if (!(threshold_prior_variance > 0.0)) throw std::invalid_argument("threshold_prior_variance must be > 0");
}

namespace {

double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
double softplus_inverse(double y) { return y > 30.0 ? y : std::log(std::expm1(y)); }

std::vector<double> thresholds_from_params(const std::vector<double>& u) {
  std::vector<double> beta(u.size());
  beta[0] = u[0];
  for (std::size_t k = 1; k < u.size(); ++k) beta[k] = beta[k - 1] + softplus(u[k]);
  return beta;
}

std::vector<double> params_from_thresholds(const std::vector<double>& beta) {
  std::vector<double> u(beta.size());
  u[0] = beta[0];
  for (std::size_t k = 1; k < beta.size(); ++k) u[k] = softplus_inverse(beta[k] - beta[k - 1]);
  return u;
}

struct Observation {
  double theta;
  int label;
};

// Mean negative log-likelihood of one item's observations plus a weak Gaussian
// penalty on the thresholds (keeps never-observed extreme categories finite).
class ItemObjective {
 public:
  ItemObjective(const Item& shape, const std::vector<Observation>& obs, double prior_variance)
      : shape_(shape), obs_(obs), inv_var_(1.0 / prior_variance) {}

  double value(const std::vector<double>& u) const {
    Item item = with(u);
    double nll = 0.0;
    for (const auto& o : obs_) nll -= log_category_prob(o.theta, item, o.label);
    double pen = 0.0;
    for (double b : item.thresholds) pen += b * b;
    return nll / static_cast<double>(obs_.size()) + 0.5 * pen * inv_var_ / static_cast<double>(obs_.size());
  }

  std::vector<double> gradient(const std::vector<double>& u) const {
    Item item = with(u);
    const auto& beta = item.thresholds;
    const std::size_t levels = beta.size();
    std::vector<double> d_beta(levels, 0.0);
    for (const auto& o : obs_) {
      const auto y = static_cast<std::size_t>(o.label);
      // d(-log P_y)/d beta_y = w_y / P_y, d(-log P_y)/d beta_{y+1} = -w_{y+1} / P_y
      if (y == 0) {
        d_beta[0] -= sigmoid(o.theta - beta[0]);
      } else if (y == levels) {
        d_beta[levels - 1] += sigmoid(beta[levels - 1] - o.theta);
      } else {
        const double p = std::exp(log_category_prob(o.theta, item, o.label));
        const double xl = o.theta - beta[y - 1];
        const double xu = o.theta - beta[y];
        d_beta[y - 1] += sigmoid(xl) * sigmoid(-xl) / p;
        d_beta[y] -= sigmoid(xu) * sigmoid(-xu) / p;
      }
    }
    const double n = static_cast<double>(obs_.size());
    for (std::size_t k = 0; k < levels; ++k) d_beta[k] = d_beta[k] / n + beta[k] * inv_var_ / n;
    // chain rule through beta_k = u_0 + sum_{j<=k} softplus(u_j)
    std::vector<double> d_u(levels, 0.0);
    double tail = 0.0;
    for (std::size_t k = levels; k-- > 0;) {
      tail += d_beta[k];
      d_u[k] = k == 0 ? tail : tail * sigmoid(u[k]);
    }
    return d_u;
  }

 private:
  Item with(const std::vector<double>& u) const {
    Item item = shape_;
    item.thresholds = thresholds_from_params(u);
    return item;
  }

  const Item& shape_;
  const std::vector<Observation>& obs_;
  double inv_var_;
};

// Gradient descent with Armijo backtracking; `step` carries over between calls.
void descend(const ItemObjective& obj, std::vector<double>& u, double& step, int max_steps, double tol) {
  double f = obj.value(u);
  for (int it = 0; it < max_steps; ++it) {
    const auto g = obj.gradient(u);
    double gnorm2 = 0.0;
    for (double v : g) gnorm2 += v * v;
    if (std::sqrt(gnorm2) < tol) return;
    bool accepted = false;
    for (int halving = 0; halving < 50; ++halving) {
      std::vector<double> trial(u.size());
      for (std::size_t k = 0; k < u.size(); ++k) trial[k] = u[k] - step * g[k];
      const double f_trial = obj.value(trial);
      if (f_trial <= f - 1e-4 * step * gnorm2) {
        u = std::move(trial);
        f = f_trial;
        accepted = true;
        step *= 1.5;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) return;
  }
}

std::string respondent_key(const Respondent& r) {
  std::vector<std::pair<std::string, int>> pairs;
  pairs.reserve(r.records.size());
  for (const auto& rec : r.records) pairs.emplace_back(rec.item_id, rec.label);
  std::sort(pairs.begin(), pairs.end());
  std::string key;
  for (const auto& [id, label] : pairs) {
    key += id;
    key += '\x1f';
    key += std::to_string(label);
    key += '\x1e';
  }
  return key;
}

std::vector<double> initial_thresholds(const std::vector<int>& counts, int levels) {
  // P(y >= m) ~ sigmoid(-beta_m / 1.18) after integrating over a N(0,1) ability.
  const double n = std::accumulate(counts.begin(), counts.end(), 0.0);
  std::vector<double> beta(static_cast<std::size_t>(levels));
  double at_least = n;
  for (int m = 1; m <= levels; ++m) {
    at_least -= counts[static_cast<std::size_t>(m - 1)];
    const double p = (at_least + 0.5) / (n + 1.0);
    beta[static_cast<std::size_t>(m - 1)] = -std::log(p / (1.0 - p)) * 1.18;
  }
  for (std::size_t k = 1; k < beta.size(); ++k) beta[k] = std::max(beta[k], beta[k - 1] + 0.05);
  return beta;
}

std::vector<double> degenerate_thresholds(int label, int levels) {
  std::vector<double> beta(static_cast<std::size_t>(levels));
  for (int m = 1; m <= levels; ++m) {
    beta[static_cast<std::size_t>(m - 1)] = m <= label ? -4.0 - 0.5 * (label - m) : 4.0 + 0.5 * (m - label - 1);
  }
  return beta;
}

double mean_nll(const std::vector<const Respondent*>& group, const ItemBank& bank, const EstimationConfig& config) {
  double total = 0.0;
  std::size_t n = 0;
  for (const Respondent* r : group) {
    const auto theta = estimate_ability(r->records, bank, config);
    total -= log_likelihood(theta, r->records, bank);
    n += r->records.size();
  }
  return n == 0 ? 0.0 : total / static_cast<double>(n);
}

}  // namespace

CalibrationResult calibrate_items(const ResponseMatrix& matrix, const std::vector<Item>& items, int dimensions,
                                  const CalibrationConfig& config) {
  config.validate();
  if (items.empty()) throw std::invalid_argument("no items to calibrate");
  if (matrix.respondents.size() < 2) throw std::invalid_argument("calibration needs at least two respondents");

  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].num_levels < 1) throw std::invalid_argument("item '" + items[i].id + "': num_levels must be >= 1");
    if (items[i].dimension < 0 || items[i].dimension >= dimensions) {
      throw std::invalid_argument("item '" + items[i].id + "': dimension out of range");
    }
    if (!index.emplace(items[i].id, i).second) throw std::invalid_argument("duplicate item id '" + items[i].id + "'");
  }

  // Canonical respondent order: makes the split and every sum independent of input order.
  std::vector<std::pair<std::string, const Respondent*>> keyed;
  keyed.reserve(matrix.respondents.size());
  for (const auto& r : matrix.respondents) keyed.emplace_back(respondent_key(r), &r);
  std::stable_sort(keyed.begin(), keyed.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });

  std::vector<std::vector<int>> counts(items.size());
  for (std::size_t i = 0; i < items.size(); ++i) counts[i].assign(static_cast<std::size_t>(items[i].num_levels) + 1, 0);
  for (const auto& [key, r] : keyed) {
    for (const auto& rec : r->records) {
      auto it = index.find(rec.item_id);
      if (it == index.end()) throw std::out_of_range("unknown item id '" + rec.item_id + "'");
      const Item& item = items[it->second];
      if (rec.label < 0 || rec.label > item.num_levels) {
        throw std::invalid_argument("label outside range for item '" + item.id + "'");
      }
      ++counts[it->second][static_cast<std::size_t>(rec.label)];
    }
  }

  CalibrationResult result;
  std::vector<Item> working = items;
  std::vector<bool> degenerate(items.size(), false);
  for (std::size_t i = 0; i < items.size(); ++i) {
    const int total = std::accumulate(counts[i].begin(), counts[i].end(), 0);
    if (total < config.min_responses) {
      throw std::invalid_argument("item '" + items[i].id + "' has " + std::to_string(total) + " responses, needs " +
                                  std::to_string(config.min_responses));
    }
    const auto only = std::find(counts[i].begin(), counts[i].end(), total);
    if (only != counts[i].end()) {
      degenerate[i] = true;
      working[i].thresholds = degenerate_thresholds(static_cast<int>(only - counts[i].begin()), items[i].num_levels);
    } else {
      working[i].thresholds = initial_thresholds(counts[i], items[i].num_levels);
    }
    result.items.push_back(ItemCalibration{items[i].id, total, degenerate[i]});
  }

  // Seeded train / held-out split over the canonical order.
  std::vector<std::size_t> order(keyed.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(derive_seed(config.seed, {0x5f1u}));
  std::shuffle(order.begin(), order.end(), rng);
  auto heldout_n = static_cast<std::size_t>(std::llround(config.validation_fraction * static_cast<double>(keyed.size())));
  heldout_n = std::clamp<std::size_t>(heldout_n, 1, keyed.size() - 1);
  std::vector<bool> is_heldout(keyed.size(), false);
  for (std::size_t k = 0; k < heldout_n; ++k) is_heldout[order[k]] = true;
  std::vector<const Respondent*> train, heldout;
  for (std::size_t k = 0; k < keyed.size(); ++k) (is_heldout[k] ? heldout : train).push_back(keyed[k].second);
  result.train_respondents = static_cast<int>(train.size());
  result.heldout_respondents = static_cast<int>(heldout.size());

  std::vector<std::vector<double>> params(items.size());
  std::vector<double> steps(items.size(), 1.0);
  for (std::size_t i = 0; i < items.size(); ++i) params[i] = params_from_thresholds(working[i].thresholds);

  ItemBank current(working, dimensions);
  ItemBank best = current;
  double best_loss = std::numeric_limits<double>::infinity();
  int since_best = 0;

  for (int epoch = 0; epoch < config.max_epochs; ++epoch) {
    // (a) abilities given current thresholds
    std::vector<std::vector<Observation>> per_item(items.size());
    double train_total = 0.0;
    std::size_t train_n = 0;
    for (const Respondent* r : train) {
      const auto theta = estimate_ability(r->records, current, config.estimation);
      for (const auto& rec : r->records) {
        const std::size_t i = index.at(rec.item_id);
        per_item[i].push_back(Observation{theta.values[static_cast<std::size_t>(items[i].dimension)], rec.label});
      }
      train_total -= log_likelihood(theta, r->records, current);
      train_n += r->records.size();
    }
    result.train_loss.push_back(train_n == 0 ? 0.0 : train_total / static_cast<double>(train_n));

    // (b) thresholds given abilities
    for (std::size_t i = 0; i < items.size(); ++i) {
      if (degenerate[i] || per_item[i].empty()) continue;
      const ItemObjective obj(items[i], per_item[i], config.threshold_prior_variance);
      descend(obj, params[i], steps[i], config.item_steps, config.item_grad_tol);
      working[i].thresholds = thresholds_from_params(params[i]);
    }
    current = ItemBank(working, dimensions);

    const double loss = mean_nll(heldout, current, config.estimation);
    result.heldout_loss.push_back(loss);
    if (loss < best_loss - config.min_improvement) {
      best_loss = loss;
      best = current;
      result.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= config.patience) {
      break;
    }
  }

  result.bank = std::move(best);
  return result;
}

}  // namespace testagent
