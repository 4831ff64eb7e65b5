#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "testagent/estimation.hpp"
#include "testagent/irt.hpp"

namespace testagent {

enum class Strategy { random, fsi, kli, maat };

std::string_view to_string(Strategy s);
/// Accepts "random" | "fsi" | "kli" | "maat"; throws std::invalid_argument otherwise.
Strategy parse_strategy(std::string_view name);

/// Thrown when every item in the bank has already been asked.
class BankExhausted : public std::runtime_error {
 public:
  BankExhausted() : std::runtime_error("item bank exhausted") {}
};

struct SelectionContext {
  AbilityEstimate theta;
  std::set<std::string> asked;
  int step = 1;  // index t of the question being chosen (1-based)
  std::span<const ResponseRecord> records;
  std::uint64_t rng_seed = 0;
};

struct KliConfig {
  double delta_scale = 3.0;    // window half-width delta_t = delta_scale / sqrt(t)
  int quadrature_points = 21;  // trapezoid nodes, odd

  void validate() const;
};

struct MaatConfig {
  EstimationConfig estimation;  // inner re-estimation; max_iters is capped by warm_start_iters
  int warm_start_iters = 5;
};

struct SelectionConfig {
  KliConfig kli;
  MaatConfig maat;
};

std::string select_random(const ItemBank& bank, const SelectionContext& ctx);
std::string select_fsi(const ItemBank& bank, const SelectionContext& ctx);
std::string select_kli(const ItemBank& bank, const SelectionContext& ctx, const KliConfig& config = {});
std::string select_maat(const ItemBank& bank, const SelectionContext& ctx, const MaatConfig& config = {});

std::string select_item(Strategy strategy, const ItemBank& bank, const SelectionContext& ctx,
                        const SelectionConfig& config = {});

/// KL index: integral of kl_item(theta_hat, s) over [theta_hat - delta, theta_hat + delta].
double kli_index(double theta_hat, double delta, const Item& item, int quadrature_points);

/// Expected model change of asking `item` next: sum_m P_m(theta) * |theta_plus(m) - theta|.
double expected_model_change(const ItemBank& bank, const Item& item, const SelectionContext& ctx,
                             const MaatConfig& config = {});

}  // namespace testagent
