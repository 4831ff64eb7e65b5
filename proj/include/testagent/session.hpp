#pragma once

// One adaptive conversational test. A session owns its history and ability
// estimate; every gateway exchange goes through the Gateway passed to each
// call, so a session can be moved between threads (and gateways) freely.
//
// Per step: extract label -> feedback checks (relevance, alignment,
// coherence) -> anomaly checks (guessing, misleading, overconfidence; the
// first trigger wins) -> accept, re-estimate, select the next item.

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "testagent/estimation.hpp"
#include "testagent/gateway.hpp"
#include "testagent/selection.hpp"

namespace testagent {

struct SessionConfig {
  int max_steps = 20;       // T
  int num_levels = 0;       // M; 0 takes the bank's largest
  int dimensions = 0;       // D; 0 takes the bank's
  Strategy strategy = Strategy::fsi;
  int afm_max_retries = 3;  // R
  double guessing_tau = 0.05;
  std::optional<int> contradiction_gap;  // default max(M - 1, 1) with the item's M
  std::uint64_t rng_seed = 42;
  EstimationConfig estimation;
  SelectionConfig selection;

  void validate() const;
  nlohmann::json to_json() const;
  static SessionConfig from_json(const nlohmann::json& doc);
};

enum class SessionStatus { awaiting_answer, awaiting_followup, completed };
enum class QuestionOrigin { fresh, afm_similar, anomaly_probe };

std::string_view to_string(SessionStatus status);
std::string_view to_string(QuestionOrigin origin);

struct PendingQuestion {
  std::string item_id;
  std::string text;  // what the test-taker sees
  int retry_count = 0;
  QuestionOrigin origin = QuestionOrigin::fresh;
  int afm_failures = 0;  // consecutive, this step
  // Set while an anomaly probe is outstanding.
  std::optional<AnomalyKind> probe_kind;
  std::optional<int> provisional_label;
  std::string first_response;
  std::string answered_question;  // the text the provisional or accepted label answers

  friend bool operator==(const PendingQuestion&, const PendingQuestion&) = default;
};

struct AnomalyLogEntry {
  int step = 0;  // the step being answered (1-based)
  std::string kind;
  std::string action;

  friend bool operator==(const AnomalyLogEntry&, const AnomalyLogEntry&) = default;
};

enum class EventKind { next_question, followup_question, completed };
std::string_view to_string(EventKind kind);

struct SessionEvent {
  EventKind kind = EventKind::next_question;
  std::optional<std::string> question;
  std::optional<std::string> item_id;
  int step = 0;
  int max_steps = 0;
  double theta_norm = 0.0;
  RecordFlags flags;  // flags of the record accepted by this answer, if any
  std::optional<std::string> origin;  // follow-ups only

  double progress() const { return max_steps > 0 ? static_cast<double>(step) / max_steps : 0.0; }
  /// Wire form; raw theta is never included.
  nlohmann::json to_json() const;
};

struct CompletedSession {
  std::string id;
  SessionConfig config;
  AbilityEstimate theta;
  std::vector<ResponseRecord> history;
  std::vector<AnomalyLogEntry> anomaly_log;
  int steps = 0;

  nlohmann::json to_json() const;
};

bool detect_guessing(std::span<const double> theta, const Item& item, int label, double tau);

class Session {
 public:
  /// Picks and renders the first question. Throws std::invalid_argument on a
  /// bad config or empty bank and GatewayError when rendering fails.
  static Session start(std::string id, const SessionConfig& config, std::shared_ptr<const ItemBank> bank,
                       Gateway& gateway);

  /// Runs one answer through the pipeline. On GatewayError the session is
  /// left exactly as it was, so the same answer can be retried.
  SessionEvent submit_response(const std::string& raw_text, Gateway& gateway);

  /// Throws std::logic_error before completion.
  CompletedSession finalize() const;

  const std::string& id() const { return id_; }
  const SessionConfig& config() const { return config_; }
  const ItemBank& bank() const { return *bank_; }
  std::shared_ptr<const ItemBank> bank_ptr() const { return bank_; }
  SessionStatus status() const { return status_; }
  int step() const { return static_cast<int>(history_.size()); }
  const AbilityEstimate& theta() const { return theta_; }
  const std::vector<ResponseRecord>& history() const { return history_; }
  const std::vector<AnomalyLogEntry>& anomaly_log() const { return anomaly_log_; }
  const std::optional<PendingQuestion>& pending() const { return pending_; }
  /// Raw answers in submission order, enough to replay the session.
  const std::vector<std::string>& transcript() const { return transcript_; }
  /// Every item shown as a fresh question, in order.
  const std::vector<std::string>& fresh_items() const { return fresh_items_; }
  /// The event that put the session in its current state.
  SessionEvent current_event() const;

  nlohmann::json to_json() const;
  static Session from_json(const nlohmann::json& doc, std::shared_ptr<const ItemBank> bank);

  friend bool operator==(const Session& a, const Session& b) { return a.to_json() == b.to_json(); }

 private:
  Session() = default;

  int item_levels(const Item& item) const;
  int contradiction_gap(const Item& item) const;
  void ask_fresh(Gateway& gateway);
  std::string rephrase(const std::optional<std::string>& suggested, Gateway& gateway) const;
  SessionEvent accept(int label, RecordFlags flags, const std::string& raw_text, Gateway& gateway);
  SessionEvent followup(std::string text, QuestionOrigin origin);
  SessionEvent answer_question(const std::string& raw_text, Gateway& gateway);
  SessionEvent answer_probe(const std::string& raw_text, Gateway& gateway);
  std::optional<std::size_t> contradicting_record(const Item& item, int label) const;

  std::string id_;
  SessionConfig config_;
  std::shared_ptr<const ItemBank> bank_;
  SessionStatus status_ = SessionStatus::awaiting_answer;
  AbilityEstimate theta_;
  std::vector<ResponseRecord> history_;
  std::vector<std::string> history_questions_;  // conversational text the accepted label answered
  std::vector<AnomalyLogEntry> anomaly_log_;
  std::optional<PendingQuestion> pending_;
  std::vector<std::string> transcript_;
  std::vector<std::string> fresh_items_;
  std::vector<std::string> shown_;  // every question text shown this step
  SessionEvent last_event_;
};

/// Feeds `inputs` through a fresh session; with the same config, bank and a
/// gateway in the same initial state the result matches the original.
Session replay_session(std::string id, const SessionConfig& config, std::shared_ptr<const ItemBank> bank,
                       Gateway& gateway, std::span<const std::string> inputs);

}  // namespace testagent
