#pragma once

// Bank files, synthetic response generation and the calibration pipeline.
//
// Bank file (JSON, keys written in this order):
//
//   {
//     "schema_version": 1,
//     "domain": "mbti",
//     "dimensions": 4,
//     "num_levels": 6,
//     "label_map": [["I", "E"], ["N", "S"], ["T", "F"], ["J", "P"]],   // optional
//     "items": [
//       {"id": "ei01", "text": "...", "dimension": 0, "num_levels": 6,
//        "thresholds": [-1.5, -0.9, -0.3, 0.3, 0.9, 1.5]}                 // optional before calibration
//     ],
//     "provenance": ["free-form notes"]
//   }
//
// Reals are written rounded to 9 significant digits, so save -> load -> save
// is byte-identical.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "testagent/estimation.hpp"
#include "testagent/gateway.hpp"
#include "testagent/irt.hpp"

namespace testagent {

inline constexpr int kBankSchemaVersion = 1;
inline constexpr int kMatrixSchemaVersion = 1;

class BankError : public std::runtime_error {
 public:
  BankError(const std::string& message, std::string item_id = {}, std::string field = {});

  const std::string& item_id() const { return item_id_; }
  const std::string& field() const { return field_; }

 private:
  std::string item_id_;
  std::string field_;
};

struct BankFile {
  int schema_version = kBankSchemaVersion;
  std::string domain;
  int dimensions = 1;
  int num_levels = 1;  // M: the largest level count of any item
  std::vector<std::pair<std::string, std::string>> label_map;
  std::vector<Item> items;
  std::vector<std::string> provenance;

  bool calibrated() const;
  /// Throws BankError unless every item is calibrated.
  ItemBank bank() const;

  friend bool operator==(const BankFile&, const BankFile&) = default;
};

/// Rounds to 9 significant digits (the on-disk precision).
double round_sig9(double x);

/// Checks ids, dimensions, level counts and threshold ordering.
void validate_bank(const BankFile& bank);

nlohmann::ordered_json bank_to_json(const BankFile& bank);
BankFile bank_from_json(const nlohmann::json& doc);
BankFile load_bank(const std::filesystem::path& path);
void save_bank(const BankFile& bank, const std::filesystem::path& path);
std::string dump_bank(const BankFile& bank);

// ---------------------------------------------------------------------------
// Response matrices
//
//   {"schema_version": 1, "domain": "...", "respondents": [
//      {"id": "r0000", "theta_true": [0.1], "records": [{"item": "q1", "label": 1, "text": "..."}]}]}

nlohmann::ordered_json matrix_to_json(const ResponseMatrix& matrix, const std::string& domain);
ResponseMatrix matrix_from_json(const nlohmann::json& doc);
ResponseMatrix load_matrix(const std::filesystem::path& path);
void save_matrix(const ResponseMatrix& matrix, const std::string& domain, const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Generation

enum class GenerationMode { parametric, roleplay };

struct GenerationSpec {
  GenerationMode mode = GenerationMode::parametric;
  int respondents = 1000;
  std::vector<std::string> personas;  // roleplay: cycled over respondents
  std::uint64_t seed = 42;
  double max_skip_rate = 0.10;        // roleplay: fail above this fraction of skipped answers

  void validate() const;
};

GenerationMode parse_generation_mode(const std::string& name);

/// Parametric mode samples theta ~ N(0, I) and labels from the model (needs a
/// calibrated bank, no gateway). Roleplay mode asks the gateway to answer as
/// each persona; skipped answers are dropped. Respondent r uses its own seed
/// stream, so the matrix does not depend on scheduling.
ResponseMatrix generate_records(const BankFile& bank, const GenerationSpec& spec, Gateway* gateway = nullptr);

/// Draws one label from category_probs(theta, item) using a uniform variate u in [0, 1).
int sample_label(double theta, const Item& item, double u);

struct CalibrationReport {
  std::vector<ItemCalibration> items;
  std::vector<double> train_loss;
  std::vector<double> heldout_loss;
  int best_epoch = 0;
  int train_respondents = 0;
  int heldout_respondents = 0;
  std::optional<double> recovery_rmse;  // when the input bank carried generating thresholds

  nlohmann::ordered_json to_json() const;
};

struct CalibratedBank {
  BankFile bank;
  CalibrationReport report;
};

/// Fits thresholds to an existing response matrix. Output thresholds are
/// rounded to the on-disk precision.
CalibratedBank calibrate_bank(const BankFile& bank, const ResponseMatrix& matrix, const CalibrationConfig& config = {});

/// generate_records followed by calibrate_bank.
CalibratedBank build_calibrated_bank(const BankFile& bank, const GenerationSpec& spec, Gateway* gateway,
                                     const CalibrationConfig& config = {});

// ---------------------------------------------------------------------------
// Synthetic banks with generating thresholds

/// "mbti" (D=4, M=6, 60 statements), "scl" (D=1, M=4, 90), "math" (D=1, M=1,
/// 1485) or "standard" (D=1, 100 binary + 60 four-level items).
BankFile synthetic_bank(const std::string& name, std::uint64_t seed = 42);
std::vector<std::string> synthetic_bank_names();

}  // namespace testagent
