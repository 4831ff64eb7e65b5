#pragma once

// Graded response model (discrimination fixed at 1).
//
//   P(y >= m | theta) = sigmoid(theta - beta_m),   m = 1..M
//   P(y  = m | theta) = P(y >= m) - P(y >= m + 1),  P(y >= 0) = 1, P(y >= M + 1) = 0
//
// Each item loads on exactly one dimension of the ability vector.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace testagent {

/// Ability estimates are clamped to [-kThetaClamp, kThetaClamp] logits.
inline constexpr double kThetaClamp = 10.0;

struct Item {
  std::string id;
  std::string text;
  int dimension = 0;
  int num_levels = 1;              // M: labels are 0..M
  std::vector<double> thresholds;  // beta_1 < ... < beta_M

  bool calibrated() const { return static_cast<int>(thresholds.size()) == num_levels; }
  friend bool operator==(const Item&, const Item&) = default;
};

/// Throws std::invalid_argument if the item breaks an invariant
/// (M >= 1, M thresholds, strictly increasing, finite).
void validate_item(const Item& item);

/// Read-only collection of calibrated items with id lookup. Items may have
/// different M.
class ItemBank {
 public:
  ItemBank() = default;
  ItemBank(std::vector<Item> items, int dimensions);

  int dimensions() const { return dimensions_; }
  std::size_t size() const { return items_.size(); }
  bool empty() const { return items_.empty(); }

  const std::vector<Item>& items() const { return items_; }
  const Item& operator[](std::size_t index) const { return items_[index]; }

  /// nullptr when absent.
  const Item* find(const std::string& id) const;
  /// Throws std::out_of_range naming the id when absent.
  const Item& at(const std::string& id) const;
  std::optional<std::size_t> index_of(const std::string& id) const;

  int max_levels() const;

 private:
  std::vector<Item> items_;
  std::unordered_map<std::string, std::size_t> index_;
  int dimensions_ = 0;
};

struct AbilityEstimate {
  std::vector<double> values;
  int step = 0;
  bool converged = true;
  double objective = 0.0;  // log-posterior at values (MAP objective)

  static AbilityEstimate zero(int dimensions) {
    return AbilityEstimate{std::vector<double>(static_cast<std::size_t>(dimensions), 0.0), 0, true, 0.0};
  }
};

enum class RecordFlag : std::uint8_t {
  afm_fallback = 1u << 0,
  guessing = 1u << 1,
  misleading = 1u << 2,
  overconfidence = 1u << 3,
};

class RecordFlags {
 public:
  constexpr RecordFlags() = default;
  constexpr explicit RecordFlags(std::uint8_t bits) : bits_(bits) {}

  constexpr bool has(RecordFlag f) const { return (bits_ & static_cast<std::uint8_t>(f)) != 0; }
  constexpr void set(RecordFlag f) { bits_ |= static_cast<std::uint8_t>(f); }
  constexpr bool empty() const { return bits_ == 0; }
  constexpr std::uint8_t bits() const { return bits_; }

  std::vector<std::string> names() const;
  static RecordFlags from_names(const std::vector<std::string>& names);

  friend constexpr bool operator==(RecordFlags, RecordFlags) = default;

 private:
  std::uint8_t bits_ = 0;
};

struct ResponseRecord {
  std::string item_id;
  int label = 0;
  std::optional<std::string> raw_text;
  RecordFlags flags;

  friend bool operator==(const ResponseRecord&, const ResponseRecord&) = default;
};

/// Numerically stable logistic function.
double sigmoid(double x);
/// log(sigmoid(x)) without overflow or cancellation.
double log_sigmoid(double x);

/// P(y >= m | theta) for a single threshold.
double prob_at_least(double theta, double beta);

/// Category probabilities P(y = 0..M | theta) for a scalar ability on the
/// item's own dimension. Throws std::invalid_argument for invalid items.
std::vector<double> category_probs(double theta, const Item& item);
std::vector<double> category_probs(const AbilityEstimate& theta, const Item& item);

/// log P(y = label | theta), computed without forming the difference of
/// cumulative probabilities.
double log_category_prob(double theta, const Item& item, int label);

/// d/dtheta log P(y = label | theta) = 1 - P(y >= label) - P(y >= label + 1).
double score(double theta, const Item& item, int label);

/// -d^2/dtheta^2 log P(y = label | theta); strictly positive.
double neg_hessian(double theta, const Item& item, int label);

/// Sum of log P(y | theta) over records. Throws std::out_of_range on an
/// unknown item and std::invalid_argument on an out-of-range label.
double log_likelihood(const AbilityEstimate& theta, std::span<const ResponseRecord> records,
                      const ItemBank& bank);

/// Analytic gradient of log_likelihood; entry d only sees items on dimension d.
std::vector<double> grad_theta(const AbilityEstimate& theta, std::span<const ResponseRecord> records,
                               const ItemBank& bank);

/// Fisher information sum_m P'_m^2 / P_m at a scalar ability.
double fisher_info(double theta, const Item& item);

/// KL(P(.|theta_a) || P(.|theta_b)) over the item's categories.
double kl_item(double theta_a, double theta_b, const Item& item);

}  // namespace testagent
