#pragma once

// Gateway decorators used for session persistence. RecordingGateway forwards
// to another gateway and keeps every validated output (or error) as JSON;
// PlaybackGateway serves such a tape back in order, so a persisted session
// can be rebuilt without contacting the model.

#include <cstddef>
#include <string>

#include "json.hpp"
#include "testagent/gateway.hpp"

namespace testagent {

class RecordingGateway final : public Gateway {
 public:
  explicit RecordingGateway(Gateway& inner) : inner_(inner) {}

  /// One entry per call: {"op", "output"} or {"op", "error": {kind, message, raw}}.
  const nlohmann::json& tape() const { return tape_; }

 protected:
  std::string do_transform_question(const std::string& item_text) override;
  LabelExtraction do_extract_label(const std::string& question, const std::string& response, int num_levels) override;
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
  template <class F>
  auto record(const char* op, F&& call) -> decltype(call());

  Gateway& inner_;
  nlohmann::json tape_ = nlohmann::json::array();
};

/// Raised when a replay asks for a different operation than was recorded or
/// runs past the end of the tape.
class ReplayDivergence : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class PlaybackGateway final : public Gateway {
 public:
  explicit PlaybackGateway(nlohmann::json tape);

  /// Entries not yet consumed.
  std::size_t remaining() const { return tape_.size() - next_; }

 protected:
  std::string do_transform_question(const std::string& item_text) override;
  LabelExtraction do_extract_label(const std::string& question, const std::string& response, int num_levels) override;
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
  const nlohmann::json& take(const char* op);

  nlohmann::json tape_;
  std::size_t next_ = 0;
};

}  // namespace testagent
