#pragma once

// Offline evaluation protocols: per-respondent support/query splits with
// ACC/AUC, MSE-versus-step simulation against the full-bank estimate, and the
// steps-to-threshold comparison between strategies.

#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "testagent/estimation.hpp"
#include "testagent/selection.hpp"

namespace testagent {

/// Compensated (Neumaier) running sum.
class StableSum {
 public:
  void add(double x);
  double value() const { return sum_ + compensation_; }

 private:
  double sum_ = 0.0;
  double compensation_ = 0.0;
};

struct EvalConfig {
  double split_ratio = 0.5;  // fraction of each respondent's records in the support set
  int folds = 5;             // repeated seeded re-splits
  std::vector<int> steps{5, 10, 20, 50};
  std::uint64_t seed = 42;
  std::optional<int> positive_from;  // AUC positive class: label >= this (default ceil(M/2) per item)
  EstimationConfig estimation;
  SelectionConfig selection;

  void validate() const;
};

struct SupportQuerySplit {
  ResponseMatrix support;
  ResponseMatrix query;
  std::vector<std::string> excluded;  // respondents with fewer than two records
};

/// Per-respondent disjoint split; respondent k uses its own seed stream.
SupportQuerySplit split_support_query(const ResponseMatrix& matrix, double support_ratio, std::uint64_t seed);

/// Area under the ROC curve with midranks for ties; nullopt when only one class is present.
std::optional<double> auc_midrank(std::span<const double> scores, std::span<const int> positive);

struct AccAuc {
  double acc = 0.0;
  std::optional<double> auc;
  std::size_t records = 0;
};

/// ACC: argmax category equals the observed label. AUC: P(y >= c) ranks
/// observed y >= c, with c = positive_from or ceil(M/2).
/// `theta[k]` belongs to `query.respondents[k]`.
AccAuc acc_auc(std::span<const AbilityEstimate> theta, const ResponseMatrix& query, const ItemBank& bank,
               std::optional<int> positive_from = std::nullopt);

struct MseCurve {
  std::string strategy;
  std::vector<int> steps;  // 1..max_steps
  std::vector<double> mean;
  std::vector<double> stderr_;
  int respondents = 0;
  std::uint64_t seed = 0;

  double at(int step) const;
};

struct SimulationConfig {
  int max_steps = 20;
  std::uint64_t seed = 42;
  EstimationConfig estimation;
  SelectionConfig selection;

  void validate() const;
};

/// Adaptive loop with labels read from each respondent's full response
/// vector (every bank item must be answered). theta_0 is the estimate from the
/// whole vector; the curve holds the mean of |theta_t - theta_0|^2 per step.
std::vector<MseCurve> simulate_mse(const ItemBank& bank, std::span<const Strategy> strategies,
                                   const ResponseMatrix& respondents, const SimulationConfig& config);

struct StepsToThreshold {
  std::string strategy;
  double threshold = 0.0;
  std::optional<int> step;  // empty: never reached within the curve
  double ratio = 0.0;       // step / t_ref, or (max_step + 1) / t_ref when never reached
};

/// For each curve, the first step whose MSE is <= the reference curve's MSE at t_ref.
std::vector<StepsToThreshold> steps_to_threshold(std::span<const MseCurve> curves, const std::string& reference,
                                                 int t_ref);

struct AdaptiveScore {
  std::string strategy;
  int k = 0;
  double acc = 0.0;
  std::optional<double> auc;
  int folds_with_auc = 0;
};

/// ACC/AUC on the query set after k adaptive steps over each respondent's
/// support set, averaged over folds.
std::vector<AdaptiveScore> evaluate_adaptive(const ItemBank& bank, const ResponseMatrix& matrix,
                                             std::span<const Strategy> strategies, const EvalConfig& config);

/// Fixed-column, 4-decimal tab-separated tables.
void write_curves_tsv(std::ostream& out, std::span<const MseCurve> curves);
void write_curve_plot_data(std::ostream& out, const MseCurve& curve);
void write_steps_tsv(std::ostream& out, std::span<const StepsToThreshold> rows, int t_ref);
void write_adaptive_tsv(std::ostream& out, std::span<const AdaptiveScore> rows);

}  // namespace testagent
