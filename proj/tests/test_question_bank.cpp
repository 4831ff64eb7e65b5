#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include "catch_amalgamated.hpp"
#include "testagent/question_bank.hpp"
#include "testagent/scripted_gateway.hpp"

using namespace testagent;
using nlohmann::json;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "testagent_tests";
  std::filesystem::create_directories(dir);
  return dir / name;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

BankFile tiny_bank() {
  BankFile b;
  b.domain = "tiny";
  b.dimensions = 2;
  b.num_levels = 2;
  b.label_map = {{"A", "B"}, {"C", "D"}};
  b.items = {Item{"q1", "first", 0, 2, {-0.5, 0.75}}, Item{"q2", "second", 1, 1, {0.125}}};
  b.provenance = {"hand made"};
  return b;
}

}  // namespace

TEST_CASE("bank save and load round-trip", "[bank]") {
  const auto path = temp_path("tiny.json");
  const BankFile bank = tiny_bank();
  save_bank(bank, path);
  const BankFile loaded = load_bank(path);
  CHECK(loaded == bank);
  const auto again = temp_path("tiny2.json");
  save_bank(loaded, again);
  CHECK(slurp(path) == slurp(again));
}

TEST_CASE("bank files keep 9 significant digits", "[bank]") {
  BankFile bank = tiny_bank();
  bank.items[0].thresholds = {-0.123456789123, 1.0 / 3.0};
  const auto doc = json::parse(dump_bank(bank));
  CHECK(doc["items"][0]["thresholds"][0].get<double>() == -0.123456789);
  CHECK(doc["items"][0]["thresholds"][1].get<double>() == 0.333333333);
  CHECK(round_sig9(round_sig9(1.0 / 7.0)) == round_sig9(1.0 / 7.0));
  // Key order is fixed.
  const std::string text = dump_bank(bank);
  CHECK(text.find("\"schema_version\"") < text.find("\"domain\""));
  CHECK(text.find("\"items\"") < text.find("\"provenance\""));
}

TEST_CASE("bank validation names the item and field", "[bank]") {
  auto doc = json::parse(dump_bank(tiny_bank()));
  auto dup = doc;
  dup["items"][1]["id"] = "q1";
  try {
    bank_from_json(dup);
    FAIL("duplicate id accepted");
  } catch (const BankError& e) {
    CHECK(e.item_id() == "q1");
    CHECK(std::string(e.what()).find("q1") != std::string::npos);
  }

  auto unordered = doc;
  unordered["items"][0]["thresholds"] = {0.5, 0.25};
  try {
    bank_from_json(unordered);
    FAIL("unordered thresholds accepted");
  } catch (const BankError& e) {
    CHECK(e.item_id() == "q1");
    CHECK(e.field() == "thresholds");
  }

  auto bad_dim = doc;
  bad_dim["items"][1]["dimension"] = 5;
  CHECK_THROWS_AS(bank_from_json(bad_dim), BankError);
  auto too_many_levels = doc;
  too_many_levels["items"][1]["num_levels"] = 3;
  CHECK_THROWS_AS(bank_from_json(too_many_levels), BankError);
  auto wrong_type = doc;
  wrong_type["items"][0]["dimension"] = "zero";
  CHECK_THROWS_AS(bank_from_json(wrong_type), BankError);
  auto version = doc;
  version["schema_version"] = 7;
  CHECK_THROWS_AS(bank_from_json(version), BankError);
  CHECK_THROWS_AS(load_bank("/nonexistent/bank.json"), BankError);
}

TEST_CASE("uncalibrated banks load but do not build an ItemBank", "[bank]") {
  BankFile b = tiny_bank();
  b.items[1].thresholds.clear();
  const auto loaded = bank_from_json(json::parse(dump_bank(b)));
  CHECK_FALSE(loaded.calibrated());
  CHECK_THROWS_AS(loaded.bank(), BankError);
  CHECK_THROWS(generate_records(loaded, GenerationSpec{}));
}

TEST_CASE("synthetic banks have the documented shapes", "[bank]") {
  const std::map<std::string, std::tuple<int, int, std::size_t>> shapes{
      {"mbti", {4, 6, 60}}, {"scl", {1, 4, 90}}, {"math", {1, 1, 1485}}, {"standard", {1, 4, 160}}};
  for (const auto& name : synthetic_bank_names()) {
    const BankFile b = synthetic_bank(name);
    const auto [d, m, n] = shapes.at(name);
    CHECK(b.dimensions == d);
    CHECK(b.num_levels == m);
    CHECK(b.items.size() == n);
    CHECK(b.calibrated());
    CHECK(synthetic_bank(name) == b);
  }
  const BankFile standard = synthetic_bank("standard");
  int binary = 0, graded = 0;
  for (const auto& item : standard.items) (item.num_levels == 1 ? binary : graded) += 1;
  CHECK(binary == 100);
  CHECK(graded == 60);
  CHECK(synthetic_bank("mbti").label_map.size() == 4);
  CHECK_THROWS(synthetic_bank("tarot"));
}

TEST_CASE("parametric generation", "[bank][generation]") {
  const BankFile bank = synthetic_bank("mbti");
  GenerationSpec spec;
  spec.respondents = 50;
  spec.seed = 5;
  const auto a = generate_records(bank, spec);
  const auto b = generate_records(bank, spec);
  CHECK(a == b);
  REQUIRE(a.respondents.size() == 50);
  for (const auto& r : a.respondents) {
    CHECK(r.theta_true.size() == 4);
    CHECK(r.records.size() == 60);
    for (const auto& rec : r.records) {
      CHECK(rec.label >= 0);
      CHECK(rec.label <= 6);
    }
  }
  // Respondent streams are independent of the respondent count.
  spec.respondents = 10;
  const auto c = generate_records(bank, spec);
  for (std::size_t r = 0; r < 10; ++r) CHECK(c.respondents[r] == a.respondents[r]);

  GenerationSpec defaults;
  CHECK(defaults.respondents == 1000);
  defaults.respondents = 0;
  CHECK_THROWS(defaults.validate());
}

TEST_CASE("sampled labels follow the model", "[bank][generation]") {
  const Item binary{"b", "binary", 0, 1, {0.0}};
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  int ones = 0;
  for (int i = 0; i < 10000; ++i) ones += sample_label(0.0, binary, unit(rng));
  CHECK(std::abs(ones - 5000) <= 3 * std::sqrt(10000 * 0.25));

  // Chi-square goodness of fit for a 7-category item, 10k draws, alpha = 0.01 (df 6: 16.812).
  const Item graded{"g", "graded", 0, 6, {-1.5, -0.9, -0.3, 0.3, 0.9, 1.5}};
  const double theta = 0.4;
  const auto p = category_probs(theta, graded);
  std::vector<int> counts(7, 0);
  for (int i = 0; i < 10000; ++i) ++counts[sample_label(theta, graded, unit(rng))];
  double chi2 = 0.0;
  for (int m = 0; m < 7; ++m) {
    const double expected = 10000 * p[m];
    chi2 += (counts[m] - expected) * (counts[m] - expected) / expected;
  }
  CHECK(chi2 < 16.812);
}

TEST_CASE("role-play generation through the gateway", "[bank][generation]") {
  BankFile bank = synthetic_bank("mbti");
  for (auto& item : bank.items) item.thresholds.clear();
  GenerationSpec spec;
  spec.mode = GenerationMode::roleplay;
  spec.respondents = 6;
  spec.personas = {"theta=2,2,2,2", "theta=-2,-2,-2,-2"};
  CHECK_THROWS(generate_records(bank, spec, nullptr));

  ScriptedGateway gateway;
  const auto matrix = generate_records(bank, spec, &gateway);
  REQUIRE(matrix.respondents.size() == 6);
  for (const auto& r : matrix.respondents) {
    CHECK(r.records.size() == 60);
    CHECK(r.records[0].raw_text.has_value());
  }

  // Too many skipped answers fail loudly.
  auto skipping = Scenario::from_json(json::parse(R"({"rules": [
      {"op": "simulate_respondent", "output": {"answers": [null, null, {"label": 9}]}}]})"));
  ScriptedGateway skipper(skipping);
  CHECK_THROWS_WITH(generate_records(bank, spec, &skipper), Catch::Matchers::ContainsSubstring("skipped"));
}

TEST_CASE("response matrix files round-trip", "[bank]") {
  const BankFile bank = synthetic_bank("standard");
  GenerationSpec spec;
  spec.respondents = 5;
  auto matrix = generate_records(bank, spec);
  matrix.respondents[0].records[0].raw_text = "hello";
  matrix.respondents[0].records[0].flags.set(RecordFlag::guessing);
  for (auto& r : matrix.respondents) {
    for (auto& t : r.theta_true) t = round_sig9(t);
  }
  const auto path = temp_path("matrix.json");
  save_matrix(matrix, "standard", path);
  CHECK(load_matrix(path) == matrix);
}

TEST_CASE("build_calibrated_bank", "[bank][calibration]") {
  const BankFile truth = synthetic_bank("mbti");
  GenerationSpec spec;
  spec.respondents = 300;
  CalibrationConfig config;
  config.max_epochs = 6;
  const auto a = build_calibrated_bank(truth, spec, nullptr, config);
  const auto b = build_calibrated_bank(truth, spec, nullptr, config);
  CHECK(a.bank == b.bank);
  CHECK(a.report.items.size() == truth.items.size());
  CHECK(a.report.recovery_rmse.has_value());
  CHECK(*a.report.recovery_rmse < 0.35);
  // Calibrated output passes load validation unchanged.
  CHECK(bank_from_json(json::parse(dump_bank(a.bank))) == a.bank);
  const auto report = a.report.to_json();
  CHECK(report["items"].size() == 60);
  CHECK(report["heldout_loss"].size() == a.report.heldout_loss.size());
}
