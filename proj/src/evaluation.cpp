#include "testagent/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <random>
#include <stdexcept>

#include "testagent/random.hpp"

namespace testagent {

void StableSum::add(double x) {
  const double t = sum_ + x;
  if (std::abs(sum_) >= std::abs(x)) {
    compensation_ += (sum_ - t) + x;
  } else {
    compensation_ += (x - t) + sum_;
  }
  sum_ = t;
}

void EvalConfig::validate() const {
  if (!(split_ratio > 0.0 && split_ratio < 1.0)) throw std::invalid_argument("split_ratio must lie in (0, 1)");
  if (folds < 1) throw std::invalid_argument("folds must be >= 1");
  if (steps.empty()) throw std::invalid_argument("steps must not be empty");
  for (int k : steps) {
    if (k < 1) throw std::invalid_argument("steps must be >= 1");
  }
  estimation.validate();
}

void SimulationConfig::validate() const {
  if (max_steps < 1) throw std::invalid_argument("max_steps must be >= 1");
  estimation.validate();
}

namespace {

std::uint64_t id_hash(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string fmt4(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

}  // namespace

SupportQuerySplit split_support_query(const ResponseMatrix& matrix, double support_ratio, std::uint64_t seed) {
  if (!(support_ratio > 0.0 && support_ratio < 1.0)) throw std::invalid_argument("support_ratio must lie in (0, 1)");
  SupportQuerySplit out;
  for (const auto& r : matrix.respondents) {
    const std::size_t n = r.records.size();
    if (n < 2) {
      out.excluded.push_back(r.id);
      continue;
    }
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937_64 rng(derive_seed(seed, {id_hash(r.id)}));
    std::shuffle(idx.begin(), idx.end(), rng);
    auto n_support = static_cast<std::size_t>(std::llround(support_ratio * static_cast<double>(n)));
    n_support = std::clamp<std::size_t>(n_support, 1, n - 1);
    std::vector<bool> in_support(n, false);
    for (std::size_t k = 0; k < n_support; ++k) in_support[idx[k]] = true;
    Respondent support{r.id, {}, r.theta_true}, query{r.id, {}, r.theta_true};
    for (std::size_t k = 0; k < n; ++k) (in_support[k] ? support : query).records.push_back(r.records[k]);
    out.support.respondents.push_back(std::move(support));
    out.query.respondents.push_back(std::move(query));
  }
  return out;
}

std::optional<double> auc_midrank(std::span<const double> scores, std::span<const int> positive) {
  if (scores.size() != positive.size()) throw std::invalid_argument("scores and labels differ in length");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
    for (std::size_t k = i; k < j; ++k) {
      if (positive[order[k]] != 0) {
        rank_sum += midrank;
        ++n_pos;
      }
    }
    i = j;
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) return std::nullopt;
  const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
  return (rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

AccAuc acc_auc(std::span<const AbilityEstimate> theta, const ResponseMatrix& query, const ItemBank& bank,
               std::optional<int> positive_from) {
  if (theta.size() != query.respondents.size()) throw std::invalid_argument("one estimate per respondent required");
  std::size_t hits = 0, total = 0;
  std::vector<double> scores;
  std::vector<int> positive;
  for (std::size_t r = 0; r < theta.size(); ++r) {
    for (const auto& rec : query.respondents[r].records) {
      const Item& item = bank.at(rec.item_id);
      const auto p = category_probs(theta[r], item);
      const auto argmax = static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
      if (argmax == rec.label) ++hits;
      ++total;
      const int c = std::clamp(positive_from.value_or((item.num_levels + 1) / 2), 1, item.num_levels);
      double at_least = 0.0;
      for (int m = c; m <= item.num_levels; ++m) at_least += p[static_cast<std::size_t>(m)];
      scores.push_back(at_least);
      positive.push_back(rec.label >= c ? 1 : 0);
    }
  }
  AccAuc out;
  out.records = total;
  out.acc = total == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(total);
  out.auc = auc_midrank(scores, positive);
  return out;
}

double MseCurve::at(int step) const {
  if (step < 1 || step > static_cast<int>(mean.size())) throw std::out_of_range("step outside curve");
  return mean[static_cast<std::size_t>(step - 1)];
}

std::vector<MseCurve> simulate_mse(const ItemBank& bank, std::span<const Strategy> strategies,
                                   const ResponseMatrix& respondents, const SimulationConfig& config) {
  config.validate();
  if (respondents.respondents.empty()) throw std::invalid_argument("no respondents to simulate");
  const int max_steps = std::min<int>(config.max_steps, static_cast<int>(bank.size()));
  const auto n = static_cast<double>(respondents.respondents.size());

  // Full response vectors and the full-bank reference estimate.
  std::vector<std::map<std::string, int>> answers;
  std::vector<AbilityEstimate> theta0;
  for (const auto& r : respondents.respondents) {
    std::map<std::string, int> a;
    for (const auto& rec : r.records) a[rec.item_id] = rec.label;
    for (const auto& item : bank.items()) {
      if (!a.contains(item.id)) throw std::invalid_argument("respondent '" + r.id + "' did not answer " + item.id);
    }
    theta0.push_back(estimate_ability(r.records, bank, config.estimation));
    answers.push_back(std::move(a));
  }

  SelectionConfig selection = config.selection;
  selection.maat.estimation = config.estimation;

  std::vector<MseCurve> curves;
  for (Strategy strategy : strategies) {
    std::vector<StableSum> sum(static_cast<std::size_t>(max_steps)), sum_sq(static_cast<std::size_t>(max_steps));
    for (std::size_t k = 0; k < respondents.respondents.size(); ++k) {
      SelectionContext ctx;
      ctx.theta = AbilityEstimate::zero(bank.dimensions());
      ctx.rng_seed = derive_seed(config.seed, {id_hash(respondents.respondents[k].id)});
      std::vector<ResponseRecord> records;
      for (int t = 1; t <= max_steps; ++t) {
        ctx.step = t;
        ctx.records = records;
        const std::string id = select_item(strategy, bank, ctx, selection);
        ctx.asked.insert(id);
        records.push_back({id, answers[k].at(id), std::nullopt, {}});
        ctx.theta = estimate_ability(records, bank, config.estimation);
        double se = 0.0;
        for (std::size_t d = 0; d < ctx.theta.values.size(); ++d) {
          const double diff = ctx.theta.values[d] - theta0[k].values[d];
          se += diff * diff;
        }
        sum[static_cast<std::size_t>(t - 1)].add(se);
        sum_sq[static_cast<std::size_t>(t - 1)].add(se * se);
      }
    }
    MseCurve curve;
    curve.strategy = std::string(to_string(strategy));
    curve.respondents = static_cast<int>(respondents.respondents.size());
    curve.seed = config.seed;
    for (int t = 1; t <= max_steps; ++t) {
      const double mean = sum[static_cast<std::size_t>(t - 1)].value() / n;
      const double var =
          n > 1 ? std::max(0.0, (sum_sq[static_cast<std::size_t>(t - 1)].value() - n * mean * mean) / (n - 1)) : 0.0;
      curve.steps.push_back(t);
      curve.mean.push_back(mean);
      curve.stderr_.push_back(std::sqrt(var / n));
    }
    curves.push_back(std::move(curve));
  }
  return curves;
}

std::vector<StepsToThreshold> steps_to_threshold(std::span<const MseCurve> curves, const std::string& reference,
                                                 int t_ref) {
  const auto ref = std::find_if(curves.begin(), curves.end(), [&](const MseCurve& c) { return c.strategy == reference; });
  if (ref == curves.end()) throw std::invalid_argument("no curve for reference strategy '" + reference + "'");
  const double threshold = ref->at(t_ref);
  std::vector<StepsToThreshold> out;
  for (const auto& c : curves) {
    StepsToThreshold row;
    row.strategy = c.strategy;
    row.threshold = threshold;
    for (std::size_t i = 0; i < c.mean.size(); ++i) {
      if (c.mean[i] <= threshold) {
        row.step = c.steps[i];
        break;
      }
    }
    const int reached = row.step.value_or(c.steps.empty() ? 1 : c.steps.back() + 1);
    row.ratio = static_cast<double>(reached) / static_cast<double>(t_ref);
    out.push_back(row);
  }
  return out;
}

std::vector<AdaptiveScore> evaluate_adaptive(const ItemBank& bank, const ResponseMatrix& matrix,
                                             std::span<const Strategy> strategies, const EvalConfig& config) {
  config.validate();
  std::vector<int> ks = config.steps;
  std::sort(ks.begin(), ks.end());
  ks.erase(std::unique(ks.begin(), ks.end()), ks.end());
  const int max_k = ks.back();

  SelectionConfig selection = config.selection;
  selection.maat.estimation = config.estimation;

  std::vector<AdaptiveScore> rows;
  for (Strategy strategy : strategies) {
    std::vector<StableSum> acc(ks.size()), auc(ks.size());
    std::vector<int> auc_folds(ks.size(), 0);
    for (int fold = 0; fold < config.folds; ++fold) {
      const auto split = split_support_query(matrix, config.split_ratio,
                                             derive_seed(config.seed, {static_cast<std::uint64_t>(fold)}));
      // theta_at[j][r]: estimate of respondent r after ks[j] steps
      std::vector<std::vector<AbilityEstimate>> theta_at(ks.size());
      for (std::size_t r = 0; r < split.support.respondents.size(); ++r) {
        const auto& support = split.support.respondents[r];
        std::map<std::string, int> answers;
        for (const auto& rec : support.records) answers[rec.item_id] = rec.label;
        SelectionContext ctx;
        ctx.theta = AbilityEstimate::zero(bank.dimensions());
        ctx.rng_seed = derive_seed(config.seed, {static_cast<std::uint64_t>(fold), id_hash(support.id)});
        // Only support items are eligible.
        for (const auto& item : bank.items()) {
          if (!answers.contains(item.id)) ctx.asked.insert(item.id);
        }
        std::vector<ResponseRecord> records;
        std::size_t next = 0;
        for (int t = 1; t <= max_k; ++t) {
          if (records.size() < answers.size()) {
            ctx.step = t;
            ctx.records = records;
            const std::string id = select_item(strategy, bank, ctx, selection);
            ctx.asked.insert(id);
            records.push_back({id, answers.at(id), std::nullopt, {}});
            ctx.theta = estimate_ability(records, bank, config.estimation);
          }
          while (next < ks.size() && ks[next] == t) theta_at[next++].push_back(ctx.theta);
        }
      }
      for (std::size_t j = 0; j < ks.size(); ++j) {
        const auto score = acc_auc(theta_at[j], split.query, bank, config.positive_from);
        acc[j].add(score.acc);
        if (score.auc) {
          auc[j].add(*score.auc);
          ++auc_folds[j];
        }
      }
    }
    for (std::size_t j = 0; j < ks.size(); ++j) {
      AdaptiveScore row;
      row.strategy = std::string(to_string(strategy));
      row.k = ks[j];
      row.acc = acc[j].value() / config.folds;
      row.folds_with_auc = auc_folds[j];
      if (auc_folds[j] > 0) row.auc = auc[j].value() / auc_folds[j];
      rows.push_back(row);
    }
  }
  return rows;
}

void write_curves_tsv(std::ostream& out, std::span<const MseCurve> curves) {
  out << "step";
  for (const auto& c : curves) out << '\t' << c.strategy;
  out << '\n';
  std::size_t len = 0;
  for (const auto& c : curves) len = std::max(len, c.mean.size());
  for (std::size_t i = 0; i < len; ++i) {
    out << i + 1;
    for (const auto& c : curves) out << '\t' << (i < c.mean.size() ? fmt4(c.mean[i]) : std::string("NA"));
    out << '\n';
  }
}

void write_curve_plot_data(std::ostream& out, const MseCurve& curve) {
  out << "step\tmean\tstderr\n";
  for (std::size_t i = 0; i < curve.mean.size(); ++i) {
    out << curve.steps[i] << '\t' << fmt4(curve.mean[i]) << '\t' << fmt4(curve.stderr_[i]) << '\n';
  }
}

void write_steps_tsv(std::ostream& out, std::span<const StepsToThreshold> rows, int t_ref) {
  out << "strategy\tthreshold\tstep\tratio\n";
  for (const auto& r : rows) {
    out << r.strategy << '\t' << fmt4(r.threshold) << '\t'
        << (r.step ? std::to_string(*r.step) : ">" + std::to_string(std::llround(r.ratio * t_ref) - 1)) << '\t'
        << fmt4(r.ratio) << '\n';
  }
}

void write_adaptive_tsv(std::ostream& out, std::span<const AdaptiveScore> rows) {
  out << "strategy\tk\tacc\tauc\n";
  for (const auto& r : rows) {
    out << r.strategy << '\t' << r.k << '\t' << fmt4(r.acc) << '\t' << (r.auc ? fmt4(*r.auc) : std::string("NA"))
        << '\n';
  }
}

}  // namespace testagent
