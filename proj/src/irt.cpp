#include "testagent/irt.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <utility>

namespace testagent {

void validate_item(const Item& item) {
  if (item.num_levels < 1) {
    throw std::invalid_argument("item '" + item.id + "': num_levels must be >= 1");
  }
  if (static_cast<int>(item.thresholds.size()) != item.num_levels) {
    throw std::invalid_argument("item '" + item.id + "': expected " + std::to_string(item.num_levels) +
                                " thresholds, got " + std::to_string(item.thresholds.size()));
  }
  for (std::size_t m = 0; m < item.thresholds.size(); ++m) {
    if (!std::isfinite(item.thresholds[m])) {
      throw std::invalid_argument("item '" + item.id + "': non-finite threshold");
    }
    if (m > 0 && !(item.thresholds[m - 1] < item.thresholds[m])) {
      throw std::invalid_argument("item '" + item.id + "': thresholds must be strictly increasing");
    }
  }
}

ItemBank::ItemBank(std::vector<Item> items, int dimensions) : items_(std::move(items)), dimensions_(dimensions) {
  if (dimensions_ < 1) {
    throw std::invalid_argument("item bank needs at least one dimension");
  }
  index_.reserve(items_.size());
  for (std::size_t i = 0; i < items_.size(); ++i) {
    const Item& item = items_[i];
    validate_item(item);
    if (item.dimension < 0 || item.dimension >= dimensions_) {
      throw std::invalid_argument("item '" + item.id + "': dimension out of range");
    }
    if (!index_.emplace(item.id, i).second) {
      throw std::invalid_argument("duplicate item id '" + item.id + "'");
    }
  }
}

const Item* ItemBank::find(const std::string& id) const {
  auto it = index_.find(id);
  return it == index_.end() ? nullptr : &items_[it->second];
}

const Item& ItemBank::at(const std::string& id) const {
  const Item* item = find(id);
  if (item == nullptr) {
    throw std::out_of_range("unknown item id '" + id + "'");
  }
  return *item;
}

std::optional<std::size_t> ItemBank::index_of(const std::string& id) const {
  auto it = index_.find(id);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

int ItemBank::max_levels() const {
  int m = 0;
  for (const auto& item : items_) m = std::max(m, item.num_levels);
  return m;
}

namespace {

constexpr std::pair<RecordFlag, const char*> kFlagNames[] = {
    {RecordFlag::afm_fallback, "afm_fallback"},
    {RecordFlag::guessing, "guessing"},
    {RecordFlag::misleading, "misleading"},
    {RecordFlag::overconfidence, "overconfidence"},
};

void check_label(const Item& item, int label) {
  if (label < 0 || label > item.num_levels) {
    throw std::invalid_argument("label " + std::to_string(label) + " outside [0, " +
                                std::to_string(item.num_levels) + "] for item '" + item.id + "'");
  }
}

double theta_for(const AbilityEstimate& theta, const Item& item) {
  if (item.dimension < 0 || static_cast<std::size_t>(item.dimension) >= theta.values.size()) {
    throw std::invalid_argument("item '" + item.id + "': dimension outside ability vector");
  }
  return theta.values[static_cast<std::size_t>(item.dimension)];
}

// Logistic density sigma(x) * sigma(-x) at threshold m; zero at the boundaries.
double density(double theta, const Item& item, int m) {
  if (m <= 0 || m > item.num_levels) return 0.0;
  const double x = theta - item.thresholds[static_cast<std::size_t>(m - 1)];
  return sigmoid(x) * sigmoid(-x);
}

}  // namespace

std::vector<std::string> RecordFlags::names() const {
  std::vector<std::string> out;
  for (const auto& [flag, name] : kFlagNames) {
    if (has(flag)) out.emplace_back(name);
  }
  return out;
}

RecordFlags RecordFlags::from_names(const std::vector<std::string>& names) {
  RecordFlags flags;
  for (const auto& n : names) {
    bool known = false;
    for (const auto& [flag, name] : kFlagNames) {
      if (n == name) {
        flags.set(flag);
        known = true;
      }
    }
    if (!known) throw std::invalid_argument("unknown record flag '" + n + "'");
  }
  return flags;
}

double sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double log_sigmoid(double x) {
  if (x >= 0.0) {
    return -std::log1p(std::exp(-x));
  }
  return x - std::log1p(std::exp(x));
}

double prob_at_least(double theta, double beta) { return sigmoid(theta - beta); }

std::vector<double> category_probs(double theta, const Item& item) {
  validate_item(item);
  const int levels = item.num_levels;
  const auto& beta = item.thresholds;
  std::vector<double> p(static_cast<std::size_t>(levels) + 1);
  p[0] = sigmoid(beta[0] - theta);
  for (int m = 1; m < levels; ++m) {
    // sigma(a) - sigma(b) = sigma(a) * sigma(-b) * (1 - exp(b - a)) for a > b
    const double a = theta - beta[static_cast<std::size_t>(m - 1)];
    const double b = theta - beta[static_cast<std::size_t>(m)];
    p[static_cast<std::size_t>(m)] = sigmoid(a) * sigmoid(-b) * -std::expm1(b - a);
  }
  p[static_cast<std::size_t>(levels)] = sigmoid(theta - beta[static_cast<std::size_t>(levels - 1)]);
  return p;
}

std::vector<double> category_probs(const AbilityEstimate& theta, const Item& item) {
  return category_probs(theta_for(theta, item), item);
}

double log_category_prob(double theta, const Item& item, int label) {
  check_label(item, label);
  const auto& beta = item.thresholds;
  const int levels = item.num_levels;
  if (label == 0) return log_sigmoid(beta[0] - theta);
  if (label == levels) return log_sigmoid(theta - beta[static_cast<std::size_t>(levels - 1)]);
  const double a = theta - beta[static_cast<std::size_t>(label - 1)];
  const double b = theta - beta[static_cast<std::size_t>(label)];
  return log_sigmoid(a) + log_sigmoid(-b) + std::log(-std::expm1(b - a));
}

double score(double theta, const Item& item, int label) {
  check_label(item, label);
  const auto& beta = item.thresholds;
  const int levels = item.num_levels;
  if (label == 0) return -sigmoid(theta - beta[0]);
  if (label == levels) return sigmoid(beta[static_cast<std::size_t>(levels - 1)] - theta);
  // 1 - sigma_m - sigma_{m+1} rewritten as sigma(-x_m) - sigma(x_{m+1})
  return sigmoid(beta[static_cast<std::size_t>(label - 1)] - theta) -
         sigmoid(theta - beta[static_cast<std::size_t>(label)]);
}

double neg_hessian(double theta, const Item& item, int label) {
  check_label(item, label);
  return density(theta, item, label) + density(theta, item, label + 1);
}

double log_likelihood(const AbilityEstimate& theta, std::span<const ResponseRecord> records,
                      const ItemBank& bank) {
  double total = 0.0;
  for (const auto& r : records) {
    const Item& item = bank.at(r.item_id);
    total += log_category_prob(theta_for(theta, item), item, r.label);
  }
  return total;
}

std::vector<double> grad_theta(const AbilityEstimate& theta, std::span<const ResponseRecord> records,
                               const ItemBank& bank) {
  std::vector<double> g(theta.values.size(), 0.0);
  for (const auto& r : records) {
    const Item& item = bank.at(r.item_id);
    g[static_cast<std::size_t>(item.dimension)] += score(theta_for(theta, item), item, r.label);
  }
  return g;
}

double fisher_info(double theta, const Item& item) {
  const auto p = category_probs(theta, item);
  double info = 0.0;
  for (int m = 0; m <= item.num_levels; ++m) {
    // P'_m = P_m * score_m, so P'_m^2 / P_m = P_m * score_m^2
    const double s = score(theta, item, m);
    info += p[static_cast<std::size_t>(m)] * s * s;
  }
  return info;
}

double kl_item(double theta_a, double theta_b, const Item& item) {
  validate_item(item);
  double kl = 0.0;
  for (int m = 0; m <= item.num_levels; ++m) {
    const double log_a = log_category_prob(theta_a, item, m);
    const double log_b = log_category_prob(theta_b, item, m);
    kl += std::exp(log_a) * (log_a - log_b);
  }
  return std::max(kl, 0.0);
}

}  // namespace testagent
