#include "testagent/question_bank.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "testagent/random.hpp"

namespace testagent {

using nlohmann::json;
using nlohmann::ordered_json;

BankError::BankError(const std::string& message, std::string item_id, std::string field)
    : std::runtime_error([&] {
        std::string where;
        if (!item_id.empty()) where += "item '" + item_id + "'";
        if (!field.empty()) where += (where.empty() ? "field '" : ", field '") + field + "'";
        return where.empty() ? message : where + ": " + message;
      }()),
      item_id_(std::move(item_id)),
      field_(std::move(field)) {}

double round_sig9(double x) {
  if (!std::isfinite(x) || x == 0.0) return x;
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", x);
  return std::strtod(buf, nullptr);
}

bool BankFile::calibrated() const {
  for (const auto& item : items) {
    if (!item.calibrated()) return false;
  }
  return !items.empty();
}

ItemBank BankFile::bank() const {
  for (const auto& item : items) {
    if (!item.calibrated()) throw BankError("item has no thresholds; calibrate the bank first", item.id, "thresholds");
  }
  try {
    return ItemBank(items, dimensions);
  } catch (const std::invalid_argument& e) {
    throw BankError(e.what());
  }
}

void validate_bank(const BankFile& bank) {
  if (bank.schema_version != kBankSchemaVersion) {
    throw BankError("unsupported schema_version " + std::to_string(bank.schema_version), {}, "schema_version");
  }
  if (bank.dimensions < 1) throw BankError("must be >= 1", {}, "dimensions");
  if (bank.num_levels < 1) throw BankError("must be >= 1", {}, "num_levels");
  if (!bank.label_map.empty()) {
    if (static_cast<int>(bank.label_map.size()) != bank.dimensions) {
      throw BankError("needs one letter pair per dimension", {}, "label_map");
    }
    for (const auto& [a, b] : bank.label_map) {
      if (a.empty() || b.empty() || a == b) throw BankError("pairs must hold two distinct letters", {}, "label_map");
    }
  }
  if (bank.items.empty()) throw BankError("bank has no items", {}, "items");
  std::set<std::string> ids;
  for (const auto& item : bank.items) {
    if (item.id.empty()) throw BankError("must not be empty", {}, "id");
    if (!ids.insert(item.id).second) throw BankError("duplicate item id", item.id, "id");
    if (item.dimension < 0 || item.dimension >= bank.dimensions) {
      throw BankError("must lie in [0, " + std::to_string(bank.dimensions) + ")", item.id, "dimension");
    }
    if (item.num_levels < 1 || item.num_levels > bank.num_levels) {
      throw BankError("must lie in [1, " + std::to_string(bank.num_levels) + "]", item.id, "num_levels");
    }
    if (item.thresholds.empty()) continue;
    if (static_cast<int>(item.thresholds.size()) != item.num_levels) {
      throw BankError("expected " + std::to_string(item.num_levels) + " values", item.id, "thresholds");
    }
    for (std::size_t k = 0; k < item.thresholds.size(); ++k) {
      if (!std::isfinite(item.thresholds[k])) throw BankError("non-finite value", item.id, "thresholds");
      if (k > 0 && !(item.thresholds[k - 1] < item.thresholds[k])) {
        throw BankError("must be strictly increasing", item.id, "thresholds");
      }
    }
  }
}

ordered_json bank_to_json(const BankFile& bank) {
  ordered_json doc;
  doc["schema_version"] = bank.schema_version;
  doc["domain"] = bank.domain;
  doc["dimensions"] = bank.dimensions;
  doc["num_levels"] = bank.num_levels;
  if (!bank.label_map.empty()) {
    doc["label_map"] = ordered_json::array();
    for (const auto& [a, b] : bank.label_map) doc["label_map"].push_back({a, b});
  }
  doc["items"] = ordered_json::array();
  for (const auto& item : bank.items) {
    ordered_json j;
    j["id"] = item.id;
    j["text"] = item.text;
    j["dimension"] = item.dimension;
    j["num_levels"] = item.num_levels;
    if (!item.thresholds.empty()) {
      j["thresholds"] = ordered_json::array();
      for (double b : item.thresholds) j["thresholds"].push_back(round_sig9(b));
    }
    doc["items"].push_back(std::move(j));
  }
  doc["provenance"] = bank.provenance;
  return doc;
}

namespace {

template <typename T>
T field_as(const json& obj, const char* key, const std::string& item_id) {
  if (!obj.contains(key)) throw BankError("missing", item_id, key);
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw BankError("has the wrong type", item_id, key);
  }
}

}  // namespace

BankFile bank_from_json(const json& doc) {
  if (!doc.is_object()) throw BankError("bank document must be a JSON object");
  BankFile bank;
  bank.schema_version = field_as<int>(doc, "schema_version", {});
  bank.domain = doc.contains("domain") ? field_as<std::string>(doc, "domain", {}) : std::string{};
  bank.dimensions = field_as<int>(doc, "dimensions", {});
  bank.num_levels = field_as<int>(doc, "num_levels", {});
  if (doc.contains("label_map")) {
    for (const auto& pair : doc["label_map"]) {
      if (!pair.is_array() || pair.size() != 2 || !pair[0].is_string() || !pair[1].is_string()) {
        throw BankError("each entry must be a pair of strings", {}, "label_map");
      }
      bank.label_map.emplace_back(pair[0].get<std::string>(), pair[1].get<std::string>());
    }
  }
  if (!doc.contains("items") || !doc["items"].is_array()) throw BankError("missing or not an array", {}, "items");
  for (std::size_t i = 0; i < doc["items"].size(); ++i) {
    const auto& j = doc["items"][i];
    if (!j.is_object()) throw BankError("entry " + std::to_string(i) + " is not an object", {}, "items");
    Item item;
    item.id = field_as<std::string>(j, "id", "#" + std::to_string(i));
    item.text = field_as<std::string>(j, "text", item.id);
    item.dimension = field_as<int>(j, "dimension", item.id);
    item.num_levels = j.contains("num_levels") ? field_as<int>(j, "num_levels", item.id) : bank.num_levels;
    if (j.contains("thresholds")) item.thresholds = field_as<std::vector<double>>(j, "thresholds", item.id);
    bank.items.push_back(std::move(item));
  }
  if (doc.contains("provenance")) bank.provenance = field_as<std::vector<std::string>>(doc, "provenance", {});
  validate_bank(bank);
  return bank;
}

std::string dump_bank(const BankFile& bank) {
  validate_bank(bank);
  return bank_to_json(bank).dump(2) + "\n";
}

BankFile load_bank(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw BankError("cannot open bank file " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw BankError(path.string() + ": " + e.what());
  }
  return bank_from_json(doc);
}

void save_bank(const BankFile& bank, const std::filesystem::path& path) {
  const std::string text = dump_bank(bank);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw BankError("cannot write bank file " + path.string());
  out << text;
}

// ---------------------------------------------------------------------------

ordered_json matrix_to_json(const ResponseMatrix& matrix, const std::string& domain) {
  ordered_json doc;
  doc["schema_version"] = kMatrixSchemaVersion;
  doc["domain"] = domain;
  doc["respondents"] = ordered_json::array();
  for (const auto& r : matrix.respondents) {
    ordered_json jr;
    jr["id"] = r.id;
    if (!r.theta_true.empty()) {
      jr["theta_true"] = ordered_json::array();
      for (double t : r.theta_true) jr["theta_true"].push_back(round_sig9(t));
    }
    jr["records"] = ordered_json::array();
    for (const auto& rec : r.records) {
      ordered_json jrec;
      jrec["item"] = rec.item_id;
      jrec["label"] = rec.label;
      if (rec.raw_text) jrec["text"] = *rec.raw_text;
      if (!rec.flags.empty()) jrec["flags"] = rec.flags.names();
      jr["records"].push_back(std::move(jrec));
    }
    doc["respondents"].push_back(std::move(jr));
  }
  return doc;
}

ResponseMatrix matrix_from_json(const json& doc) {
  if (!doc.is_object() || doc.value("schema_version", 0) != kMatrixSchemaVersion) {
    throw std::invalid_argument("response matrix: unsupported or missing schema_version");
  }
  ResponseMatrix matrix;
  for (const auto& jr : doc.at("respondents")) {
    Respondent r;
    r.id = jr.at("id").get<std::string>();
    if (jr.contains("theta_true")) r.theta_true = jr["theta_true"].get<std::vector<double>>();
    for (const auto& jrec : jr.at("records")) {
      ResponseRecord rec;
      rec.item_id = jrec.at("item").get<std::string>();
      rec.label = jrec.at("label").get<int>();
      if (jrec.contains("text")) rec.raw_text = jrec["text"].get<std::string>();
      if (jrec.contains("flags")) rec.flags = RecordFlags::from_names(jrec["flags"].get<std::vector<std::string>>());
      r.records.push_back(std::move(rec));
    }
    matrix.respondents.push_back(std::move(r));
  }
  return matrix;
}

ResponseMatrix load_matrix(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open response matrix " + path.string());
  return matrix_from_json(json::parse(in));
}

void save_matrix(const ResponseMatrix& matrix, const std::string& domain, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write response matrix " + path.string());
  out << matrix_to_json(matrix, domain).dump() << "\n";
}

// ---------------------------------------------------------------------------

void GenerationSpec::validate() const {
  if (respondents < 1) throw std::invalid_argument("respondents must be >= 1");
  if (!(max_skip_rate >= 0.0 && max_skip_rate < 1.0)) throw std::invalid_argument("max_skip_rate must lie in [0, 1)");
}

GenerationMode parse_generation_mode(const std::string& name) {
  if (name == "parametric") return GenerationMode::parametric;
  if (name == "roleplay") return GenerationMode::roleplay;
  throw std::invalid_argument("unknown generation mode '" + name + "'");
}

int sample_label(double theta, const Item& item, double u) {
  const auto p = category_probs(theta, item);
  double acc = 0.0;
  for (int m = 0; m < item.num_levels; ++m) {
    acc += p[static_cast<std::size_t>(m)];
    if (u < acc) return m;
  }
  return item.num_levels;
}

namespace {

std::string respondent_id(int r) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "r%05d", r);
  return buf;
}

ResponseMatrix generate_parametric(const BankFile& file, const GenerationSpec& spec) {
  const ItemBank bank = file.bank();
  ResponseMatrix matrix;
  matrix.respondents.resize(static_cast<std::size_t>(spec.respondents));
  for (int r = 0; r < spec.respondents; ++r) {
    std::mt19937_64 rng(derive_seed(spec.seed, {0x9e11u, static_cast<std::uint64_t>(r)}));
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    Respondent& resp = matrix.respondents[static_cast<std::size_t>(r)];
    resp.id = respondent_id(r);
    for (int d = 0; d < bank.dimensions(); ++d) resp.theta_true.push_back(normal(rng));
    resp.records.reserve(bank.size());
    for (const auto& item : bank.items()) {
      const double theta = resp.theta_true[static_cast<std::size_t>(item.dimension)];
      resp.records.push_back({item.id, sample_label(theta, item, unit(rng)), std::nullopt, {}});
    }
  }
  return matrix;
}

ResponseMatrix generate_roleplay(const BankFile& file, const GenerationSpec& spec, Gateway& gateway) {
  validate_bank(file);
  ResponseMatrix matrix;
  long skipped = 0, asked = 0;
  for (int r = 0; r < spec.respondents; ++r) {
    const std::string persona = spec.personas.empty()
                                    ? "respondent " + std::to_string(r)
                                    : spec.personas[static_cast<std::size_t>(r) % spec.personas.size()];
    const RoleplayResult result = gateway.simulate_respondent(persona, file.items, file.num_levels);
    Respondent resp;
    resp.id = respondent_id(r);
    for (std::size_t i = 0; i < file.items.size(); ++i) {
      const auto& answer = result.answers[i];
      if (!answer) continue;
      resp.records.push_back({file.items[i].id, answer->label, answer->text, {}});
    }
    skipped += result.skipped;
    asked += static_cast<long>(file.items.size());
    matrix.respondents.push_back(std::move(resp));
  }
  const double rate = static_cast<double>(skipped) / static_cast<double>(asked);
  if (rate > spec.max_skip_rate) {
    std::ostringstream msg;
    msg << "role-play generation skipped " << skipped << " of " << asked << " answers (" << rate * 100.0
        << "%), above the " << spec.max_skip_rate * 100.0 << "% limit";
    throw std::runtime_error(msg.str());
  }
  return matrix;
}

}  // namespace

ResponseMatrix generate_records(const BankFile& bank, const GenerationSpec& spec, Gateway* gateway) {
  spec.validate();
  if (spec.mode == GenerationMode::parametric) return generate_parametric(bank, spec);
  if (gateway == nullptr) throw std::invalid_argument("role-play generation needs a gateway");
  return generate_roleplay(bank, spec, *gateway);
}

// ---------------------------------------------------------------------------

ordered_json CalibrationReport::to_json() const {
  ordered_json doc;
  doc["best_epoch"] = best_epoch;
  doc["train_respondents"] = train_respondents;
  doc["heldout_respondents"] = heldout_respondents;
  doc["train_loss"] = ordered_json::array();
  for (double v : train_loss) doc["train_loss"].push_back(round_sig9(v));
  doc["heldout_loss"] = ordered_json::array();
  for (double v : heldout_loss) doc["heldout_loss"].push_back(round_sig9(v));
  if (recovery_rmse) doc["recovery_rmse"] = round_sig9(*recovery_rmse);
  doc["items"] = ordered_json::array();
  for (const auto& it : items) {
    doc["items"].push_back(ordered_json{{"id", it.item_id}, {"responses", it.responses}, {"degenerate", it.degenerate}});
  }
  return doc;
}

CalibratedBank calibrate_bank(const BankFile& bank, const ResponseMatrix& matrix, const CalibrationConfig& config) {
  validate_bank(bank);
  const CalibrationResult fit = calibrate_items(matrix, bank.items, bank.dimensions, config);

  CalibratedBank out;
  out.bank = bank;
  double se = 0.0;
  int n = 0;
  for (std::size_t i = 0; i < bank.items.size(); ++i) {
    std::vector<double> fitted;
    for (double b : fit.bank[i].thresholds) fitted.push_back(round_sig9(b));
    if (bank.items[i].calibrated()) {
      for (std::size_t k = 0; k < fitted.size(); ++k) {
        const double d = fitted[k] - bank.items[i].thresholds[k];
        se += d * d;
        ++n;
      }
    }
    out.bank.items[i].thresholds = std::move(fitted);
  }
  validate_bank(out.bank);
  out.bank.provenance.push_back("thresholds fitted to " + std::to_string(matrix.respondents.size()) +
                                " respondents (calibration seed " + std::to_string(config.seed) + ", best epoch " +
                                std::to_string(fit.best_epoch) + ")");

  out.report.items = fit.items;
  out.report.train_loss = fit.train_loss;
  out.report.heldout_loss = fit.heldout_loss;
  out.report.best_epoch = fit.best_epoch;
  out.report.train_respondents = fit.train_respondents;
  out.report.heldout_respondents = fit.heldout_respondents;
  if (n > 0) out.report.recovery_rmse = std::sqrt(se / n);
  return out;
}

CalibratedBank build_calibrated_bank(const BankFile& bank, const GenerationSpec& spec, Gateway* gateway,
                                     const CalibrationConfig& config) {
  return calibrate_bank(bank, generate_records(bank, spec, gateway), config);
}

}  // namespace testagent
