#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "testagent/irt.hpp"

namespace testagent {

struct EstimationConfig {
  double prior_variance = 1.0;
  int max_iters = 100;
  double grad_tol = 1e-8;
  double grid_lo = -6.0;
  double grid_hi = 6.0;
  int grid_points = 601;
  bool grid_fallback = true;

  void validate() const;
  double grid_step() const { return (grid_hi - grid_lo) / (grid_points - 1); }
};

/// log-likelihood minus the Gaussian prior penalty |theta|^2 / (2 * prior_variance).
double map_objective(const AbilityEstimate& theta, std::span<const ResponseRecord> records, const ItemBank& bank,
                     const EstimationConfig& config);

/// MAP ability estimate by damped Newton per dimension. Falls back to the grid
/// when Newton does not converge within max_iters (and grid_fallback is set).
/// The result does not depend on the order of `records`.
///
/// `warm_start` seeds Newton instead of the prior mode.
AbilityEstimate estimate_ability(std::span<const ResponseRecord> records, const ItemBank& bank,
                                 const EstimationConfig& config = {},
                                 std::optional<std::span<const double>> warm_start = std::nullopt);

/// Exhaustive grid argmax of the same MAP objective, dimension by dimension.
AbilityEstimate brute_force_mle(std::span<const ResponseRecord> records, const ItemBank& bank,
                                const EstimationConfig& config = {});

// ---------------------------------------------------------------------------
// Item calibration

struct Respondent {
  std::string id;
  std::vector<ResponseRecord> records;
  std::vector<double> theta_true;  // empty unless the data were simulated

  friend bool operator==(const Respondent&, const Respondent&) = default;
};

struct ResponseMatrix {
  std::vector<Respondent> respondents;

  friend bool operator==(const ResponseMatrix&, const ResponseMatrix&) = default;
};

struct CalibrationConfig {
  EstimationConfig estimation;
  int min_responses = 30;
  double validation_fraction = 0.2;
  int max_epochs = 60;
  int patience = 2;
  double min_improvement = 1e-6;  // held-out loss decrease that counts as progress
  int item_steps = 200;           // gradient steps per item per epoch
  double item_grad_tol = 1e-7;
  double threshold_prior_variance = 25.0;
  std::uint64_t seed = 42;

  void validate() const;
};

struct ItemCalibration {
  std::string item_id;
  int responses = 0;
  bool degenerate = false;  // every respondent gave the same label
};

struct CalibrationResult {
  ItemBank bank;
  std::vector<ItemCalibration> items;  // bank order
  std::vector<double> train_loss;      // mean NLL per response, one per epoch
  std::vector<double> heldout_loss;
  int best_epoch = 0;
  int train_respondents = 0;
  int heldout_respondents = 0;
};

/// Fits thresholds for `items` (dimension and num_levels are taken from them,
/// thresholds ignored) by alternating MAP ability estimates with gradient steps
/// on the items' negative log-likelihood, stopping early on held-out loss.
/// Thresholds are parameterised as beta_1 plus softplus gaps, so the result is
/// strictly ordered. Respondent order does not affect the result.
CalibrationResult calibrate_items(const ResponseMatrix& matrix, const std::vector<Item>& items, int dimensions,
                                  const CalibrationConfig& config = {});

}  // namespace testagent
