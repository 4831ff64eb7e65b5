#pragma once

// Type classification from an ability vector and report assembly.
//
// A LabelMap pairs two letters per dimension; the second letter is the
// positive direction, so with pairs I/E N/S T/F J/P the type "ENFJ" encodes
// as [1, 0, 1, 0]. The classifier is one logistic head per dimension on that
// dimension's ability; probability exactly 0.5 resolves to the first letter.

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "testagent/estimation.hpp"
#include "testagent/gateway.hpp"
#include "testagent/session.hpp"

namespace testagent {

class LabelMap {
 public:
  LabelMap() = default;
  /// Throws std::invalid_argument unless every pair is two distinct single
  /// letters and no letter repeats across pairs.
  explicit LabelMap(std::vector<std::pair<std::string, std::string>> pairs);

  int dimensions() const { return static_cast<int>(pairs_.size()); }
  const std::vector<std::pair<std::string, std::string>>& pairs() const { return pairs_; }
  std::vector<int> encode(const std::string& type) const;
  std::string decode(std::span<const int> bits) const;
  /// All 2^D type strings in binary counting order.
  std::vector<std::string> all_types() const;

 private:
  std::vector<std::pair<std::string, std::string>> pairs_;
};

struct ClassifierTraining {
  double learning_rate = 0.5;
  int epochs = 3000;
  double l2 = 1e-3;
  int min_per_class = 10;

  void validate() const;
};

struct TypeClassifier {
  std::vector<double> weight;  // one per dimension
  std::vector<double> bias;
  std::vector<double> train_accuracy;
  std::size_t samples = 0;

  /// P(second letter) per dimension.
  std::vector<double> probabilities(std::span<const double> theta) const;
  std::vector<int> predict(std::span<const double> theta) const;

  nlohmann::json to_json() const;
  static TypeClassifier from_json(const nlohmann::json& doc);
};

/// Full-batch gradient descent on the mean cross-entropy plus l2/2 * w^2,
/// starting from zero. Throws std::invalid_argument when a dimension has
/// fewer than min_per_class samples of either letter.
TypeClassifier train_classifier(std::span<const std::vector<double>> thetas, std::span<const std::string> labels,
                                const LabelMap& label_map, const ClassifierTraining& config = {});

std::string classify(std::span<const double> theta, const TypeClassifier& classifier, const LabelMap& label_map);

/// Training pairs from simulated respondents: theta estimated from each full
/// response vector, label from the sign of the generating theta (zero maps
/// to the first letter).
TypeClassifier train_from_matrix(const ResponseMatrix& matrix, const ItemBank& bank, const LabelMap& label_map,
                                 const EstimationConfig& estimation = {}, const ClassifierTraining& config = {});

struct ReportTemplate {
  std::string type;
  std::string title;
  std::map<std::string, std::string> sections;  // prose by section id
};

/// Reads every <TYPE>.json under `dir`. A missing directory yields an empty set.
std::map<std::string, ReportTemplate> load_templates(const std::filesystem::path& dir);

/// Stable section ids in report order.
const std::vector<std::string>& report_section_ids();

struct ReportInputs {
  const CompletedSession& session;
  const ItemBank& bank;
  std::string type_string;  // empty when the domain has no type labels
  const LabelMap* label_map = nullptr;
  const TypeClassifier* classifier = nullptr;
  const std::map<std::string, ReportTemplate>* templates = nullptr;
  Gateway* gateway = nullptr;  // optional enrichment
  int highlights = 3;
};

/// Deterministic unless a gateway is given; the session is never modified.
nlohmann::json assemble_report(const ReportInputs& inputs);

}  // namespace testagent
