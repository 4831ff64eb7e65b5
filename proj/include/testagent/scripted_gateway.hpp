#pragma once

// Deterministic offline gateway driven by a declarative scenario document:
//
//   {
//     "version": 1,
//     "seed": 7,
//     "defaults": {"contradiction": false, "justification_sufficient": true},
//     "rules": [
//       {"op": "judge_afm", "turn": 0, "pattern": "don't know",
//        "output": {"aligned": false, "similar_question": "..."}},
//       {"op": "extract_label", "pattern": "boring", "output": {"label": 6}}
//     ]
//   }
//
// A rule fires when `op` matches, `turn` (0-based per-operation call index)
// matches if given, `pattern` (case-insensitive regex) is found in the
// operation's primary text if given, and `kind` matches for probe_anomaly.
// The first matching rule wins; otherwise the built-in default applies.
// An output of {"error": "transport" | "malformed"} raises GatewayError.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <regex>
#include <string>
#include <vector>

#include "json.hpp"
#include "testagent/gateway.hpp"

namespace testagent {

struct ScenarioRule {
  std::string op;
  std::optional<int> turn;
  std::optional<std::string> pattern;
  std::optional<std::string> kind;
  nlohmann::json output;
};

struct Scenario {
  std::uint64_t seed = 0;
  bool default_contradiction = false;
  bool default_justification_sufficient = true;
  std::vector<ScenarioRule> rules;

  static Scenario from_json(const nlohmann::json& doc);
  static Scenario load(const std::filesystem::path& path);
};

class ScriptedGateway final : public Gateway {
 public:
  explicit ScriptedGateway(Scenario scenario = {});

  /// Number of calls made so far to `op`.
  int calls(const std::string& op) const;

 protected:
  std::string do_transform_question(const std::string& item_text) override;
  LabelExtraction do_extract_label(const std::string& question, const std::string& response,
                                   int num_levels) override;
  JudgeVerdict do_judge_afm(const std::string& question, const std::string& response, int num_levels) override;
  std::string do_similar_question(const std::string& question) override;
  std::string do_probe_anomaly(const std::string& question, const std::string& response, AnomalyKind kind) override;
  bool do_confirm_contradiction(const ContextTurn& earlier, const ContextTurn& current) override;
  bool do_justification_sufficient(const std::string& question, const std::string& response, int label,
                                   int num_levels) override;
  RoleplayResult do_simulate_respondent(const std::string& persona, std::span<const Item> items,
                                        int num_levels) override;
  std::string do_enrich_report(const std::string& type_string, const std::string& summary) override;

 private:
  const nlohmann::json* match(const std::string& op, const std::string& text,
                              std::optional<std::string_view> kind = std::nullopt);

  Scenario scenario_;
  std::vector<std::optional<std::regex>> compiled_;
  std::map<std::string, int> calls_;
};

/// Hidden ability vector for a stub persona: "theta=0.5,-1" parses directly,
/// any other text maps to a deterministic pseudo-ability in [-2, 2].
std::vector<double> persona_theta(const std::string& persona, int dimensions);

}  // namespace testagent
