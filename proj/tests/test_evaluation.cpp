#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <sstream>

#include "catch_amalgamated.hpp"
#include "testagent/evaluation.hpp"
#include "testagent/question_bank.hpp"

using namespace testagent;

namespace {

ResponseMatrix records_for(const BankFile& bank, int respondents, std::uint64_t seed) {
  GenerationSpec spec;
  spec.respondents = respondents;
  spec.seed = seed;
  return generate_records(bank, spec);
}

BankFile small_bank() {
  BankFile b;
  b.domain = "small";
  b.dimensions = 2;
  b.num_levels = 3;
  for (int i = 0; i < 12; ++i) {
    Item item;
    item.id = "s" + std::to_string(10 + i);
    item.text = "small item";
    item.dimension = i % 2;
    item.num_levels = 1 + i % 3;
    for (int m = 0; m < item.num_levels; ++m) item.thresholds.push_back(-1.0 + 0.3 * i / 4.0 + 0.7 * m);
    b.items.push_back(item);
  }
  return b;
}

}  // namespace

TEST_CASE("stable summation", "[evaluation]") {
  StableSum s;
  s.add(1e16);
  s.add(1.0);
  s.add(-1e16);
  CHECK(s.value() == 1.0);
}

TEST_CASE("support/query split", "[evaluation]") {
  ResponseMatrix m;
  Respondent r{"a", {}, {}};
  for (int i = 0; i < 10; ++i) r.records.push_back({"i" + std::to_string(i), i % 2, std::nullopt, {}});
  m.respondents.push_back(r);
  m.respondents.push_back({"lonely", {{"i0", 1, std::nullopt, {}}}, {}});
  const auto s = split_support_query(m, 0.5, 3);
  REQUIRE(s.support.respondents.size() == 1);
  CHECK(s.support.respondents[0].records.size() == 5);
  CHECK(s.query.respondents[0].records.size() == 5);
  CHECK(s.excluded == std::vector<std::string>{"lonely"});

  std::set<std::string> seen;
  for (const auto& rec : s.support.respondents[0].records) seen.insert(rec.item_id);
  for (const auto& rec : s.query.respondents[0].records) CHECK(seen.insert(rec.item_id).second);
  CHECK(seen.size() == 10);

  const auto again = split_support_query(m, 0.5, 3);
  CHECK(again.support == s.support);
  CHECK(again.query == s.query);
  CHECK_THROWS(split_support_query(m, 1.0, 3));
}

TEST_CASE("split is disjoint and complete on random inputs", "[evaluation][property]") {
  const auto matrix = records_for(synthetic_bank("mbti"), 40, 9);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto s = split_support_query(matrix, 0.3, seed);
    for (std::size_t r = 0; r < matrix.respondents.size(); ++r) {
      std::multiset<std::string> all, parts;
      for (const auto& rec : matrix.respondents[r].records) all.insert(rec.item_id);
      for (const auto& rec : s.support.respondents[r].records) parts.insert(rec.item_id);
      for (const auto& rec : s.query.respondents[r].records) parts.insert(rec.item_id);
      CHECK(all == parts);
      CHECK(s.support.respondents[r].records.size() == 18);
    }
  }
}

TEST_CASE("midrank AUC", "[evaluation]") {
  const std::vector<double> perfect{0.1, 0.2, 0.3, 0.8, 0.9};
  const std::vector<int> labels{0, 0, 0, 1, 1};
  CHECK(auc_midrank(perfect, labels) == std::optional<double>(1.0));
  const std::vector<double> flat(5, 0.4);
  CHECK(auc_midrank(flat, labels) == std::optional<double>(0.5));
  const std::vector<int> one_class(5, 1);
  CHECK_FALSE(auc_midrank(perfect, one_class).has_value());

  std::mt19937_64 rng(10);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> scores;
  std::vector<int> y;
  for (int i = 0; i < 10000; ++i) {
    scores.push_back(u(rng));
    y.push_back(i % 2);
  }
  CHECK(std::abs(*auc_midrank(scores, y) - 0.5) <= 0.02);
}

TEST_CASE("ACC on binary items is the 0.5 threshold rule", "[evaluation]") {
  const BankFile file = synthetic_bank("math");
  const ItemBank bank = file.bank();
  ResponseMatrix subset;
  const auto full = records_for(file, 20, 4);
  for (const auto& r : full.respondents) {
    Respondent s{r.id, {r.records.begin(), r.records.begin() + 40}, r.theta_true};
    subset.respondents.push_back(s);
  }
  std::vector<AbilityEstimate> theta;
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n(0.0, 1.0);
  for (std::size_t r = 0; r < subset.respondents.size(); ++r) theta.push_back(AbilityEstimate{{n(rng)}, 0, true, 0});
  const auto score = acc_auc(theta, subset, bank);
  int hits = 0, total = 0;
  for (std::size_t r = 0; r < theta.size(); ++r) {
    for (const auto& rec : subset.respondents[r].records) {
      const double p1 = prob_at_least(theta[r].values[0], bank.at(rec.item_id).thresholds[0]);
      hits += ((p1 > 0.5 ? 1 : 0) == rec.label);
      ++total;
    }
  }
  CHECK(score.records == static_cast<std::size_t>(total));
  CHECK(score.acc == static_cast<double>(hits) / total);
  REQUIRE(score.auc.has_value());

  // Respondent order does not matter.
  auto rev_theta = theta;
  auto rev = subset;
  std::reverse(rev_theta.begin(), rev_theta.end());
  std::reverse(rev.respondents.begin(), rev.respondents.end());
  const auto score2 = acc_auc(rev_theta, rev, bank);
  CHECK(score2.acc == score.acc);
  CHECK(score2.auc == score.auc);
}

TEST_CASE("MSE is exactly zero once the whole bank is asked", "[evaluation]") {
  const BankFile file = small_bank();
  const ItemBank bank = file.bank();
  const auto matrix = records_for(file, 30, 6);
  SimulationConfig config;
  config.max_steps = static_cast<int>(bank.size());
  const std::vector<Strategy> all{Strategy::random, Strategy::fsi, Strategy::kli, Strategy::maat};
  const auto curves = simulate_mse(bank, all, matrix, config);
  REQUIRE(curves.size() == 4);
  for (const auto& c : curves) {
    REQUIRE(c.mean.size() == bank.size());
    CHECK(c.at(static_cast<int>(bank.size())) == 0.0);
  }
}

TEST_CASE("Random MSE decreases and is stable across seeds", "[evaluation][slow]") {
  const BankFile file = synthetic_bank("standard");
  const ItemBank bank = file.bank();
  const auto matrix = records_for(file, 200, 42);
  const std::vector<Strategy> random{Strategy::random};
  SimulationConfig config;
  const auto a = simulate_mse(bank, random, matrix, config).front();
  config.seed = 7;
  const auto b = simulate_mse(bank, random, matrix, config).front();

  // least-squares slope of mean MSE against t
  double st = 0, sm = 0, stt = 0, stm = 0;
  const double n = static_cast<double>(a.mean.size());
  for (std::size_t i = 0; i < a.mean.size(); ++i) {
    st += a.steps[i];
    sm += a.mean[i];
    stt += a.steps[i] * a.steps[i];
    stm += a.steps[i] * a.mean[i];
  }
  CHECK((n * stm - st * sm) / (n * stt - st * st) < 0.0);
  for (std::size_t i = 1; i < a.mean.size(); ++i) CHECK(a.mean[i] <= a.mean[i - 1] + 3 * a.stderr_[i]);
  for (std::size_t i = 0; i < a.mean.size(); ++i) {
    CHECK(std::abs(a.mean[i] - b.mean[i]) < 3 * std::hypot(a.stderr_[i], b.stderr_[i]));
  }
}

TEST_CASE("steps to threshold", "[evaluation]") {
  MseCurve ref{"random", {1, 2, 3, 4}, {0.8, 0.6, 0.5, 0.4}, {0, 0, 0, 0}, 10, 1};
  MseCurve better{"fsi", {1, 2, 3, 4}, {0.7, 0.5, 0.35, 0.3}, {0, 0, 0, 0}, 10, 1};
  MseCurve worse{"kli", {1, 2, 3, 4}, {0.9, 0.8, 0.7, 0.6}, {0, 0, 0, 0}, 10, 1};
  const std::vector<MseCurve> curves{ref, better, worse};
  const auto rows = steps_to_threshold(curves, "random", 4);
  CHECK(rows[0].ratio == 1.0);
  CHECK(rows[1].step == std::optional<int>(3));
  CHECK(rows[1].ratio < 1.0);
  CHECK_FALSE(rows[2].step.has_value());
  CHECK(rows[2].ratio > 1.0);
  CHECK_THROWS(steps_to_threshold(curves, "maat", 4));

  std::ostringstream out;
  write_steps_tsv(out, rows, 4);
  CHECK(out.str() ==
        "strategy\tthreshold\tstep\tratio\n"
        "random\t0.4000\t4\t1.0000\n"
        "fsi\t0.4000\t3\t0.7500\n"
        "kli\t0.4000\t>4\t1.2500\n");
}

TEST_CASE("tables are fixed-format", "[evaluation]") {
  const std::vector<MseCurve> curves{{"random", {1, 2}, {0.123456, 0.1}, {0.01, 0.02}, 3, 1},
                                     {"fsi", {1, 2}, {0.2, 0.05}, {0.0, 0.0}, 3, 1}};
  std::ostringstream out;
  write_curves_tsv(out, curves);
  CHECK(out.str() == "step\trandom\tfsi\n1\t0.1235\t0.2000\n2\t0.1000\t0.0500\n");
  std::ostringstream plot;
  write_curve_plot_data(plot, curves[0]);
  CHECK(plot.str() == "step\tmean\tstderr\n1\t0.1235\t0.0100\n2\t0.1000\t0.0200\n");
}

TEST_CASE("adaptive ACC/AUC after k steps on the support set", "[evaluation]") {
  const BankFile file = synthetic_bank("standard");
  const ItemBank bank = file.bank();
  const auto matrix = records_for(file, 40, 3);
  EvalConfig config;
  config.folds = 2;
  config.steps = {5, 20};
  const std::vector<Strategy> strategies{Strategy::random, Strategy::fsi};
  const auto rows = evaluate_adaptive(bank, matrix, strategies, config);
  REQUIRE(rows.size() == 4);
  for (const auto& r : rows) {
    CHECK(r.acc > 0.2);
    CHECK(r.acc < 1.0);
    REQUIRE(r.auc.has_value());
    CHECK(*r.auc > 0.6);
  }
  CHECK(evaluate_adaptive(bank, matrix, strategies, config).front().acc == rows.front().acc);
  std::ostringstream out;
  write_adaptive_tsv(out, rows);
  CHECK(out.str().rfind("strategy\tk\tacc\tauc\n", 0) == 0);
}
