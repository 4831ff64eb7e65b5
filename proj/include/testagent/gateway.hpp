#pragma once

// Boundary to the language model. Every duty goes through a non-virtual
// public method that checks preconditions and validates the reply before it
// reaches session logic; implementations override the protected do_* hooks.

#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "testagent/irt.hpp"

namespace testagent {

enum class AnomalyKind { guessing, misleading, overconfidence };

std::string_view to_string(AnomalyKind kind);
AnomalyKind parse_anomaly_kind(std::string_view name);

struct JudgeVerdict {
  bool relevant = true;
  bool aligned = true;
  bool coherent = true;
  std::optional<int> label;  // present iff all three checks pass
  std::optional<std::string> similar_question;
  std::string rationale;

  bool checks_pass() const { return relevant && aligned && coherent; }
};

struct LabelExtraction {
  int label = 0;
  std::string explanation;
};

struct RoleplayAnswer {
  int label = 0;
  std::string text;
};

struct RoleplayResult {
  std::vector<std::optional<RoleplayAnswer>> answers;  // one slot per item; empty when skipped
  int skipped = 0;
};

/// A prior exchange used as context by the contradiction check.
struct ContextTurn {
  std::string question;
  std::string response;
  int label = 0;
};

class GatewayError : public std::runtime_error {
 public:
  enum class Kind { precondition, transport, malformed };

  GatewayError(Kind kind, const std::string& message, std::string raw_payload = {})
      : std::runtime_error(message), kind_(kind), raw_payload_(std::move(raw_payload)) {}

  Kind kind() const { return kind_; }
  const std::string& raw_payload() const { return raw_payload_; }

 private:
  Kind kind_;
  std::string raw_payload_;
};

class Gateway {
 public:
  virtual ~Gateway() = default;

  /// Conversational rendering b = C(q) of a bank question.
  std::string transform_question(const std::string& item_text);
  /// Rating in [0, num_levels] read from a free-text answer.
  LabelExtraction extract_label(const std::string& question, const std::string& response, int num_levels);
  /// Relevance / alignment / coherence checks; carries a similar question when any fails.
  JudgeVerdict judge_afm(const std::string& question, const std::string& response, int num_levels);
  /// A fresh question close to `question`, used when the judge did not supply one.
  std::string similar_question(const std::string& question);
  /// Follow-up text for an anomaly: verification, decomposition or justification request.
  std::string probe_anomaly(const std::string& question, const std::string& response, AnomalyKind kind);
  /// Whether two answers on the same dimension are genuinely inconsistent.
  bool confirm_contradiction(const ContextTurn& earlier, const ContextTurn& current);
  /// Whether an extreme rating is backed by enough reasoning.
  bool justification_sufficient(const std::string& question, const std::string& response, int label,
                                int num_levels);
  /// Role-played answers to `items` by `persona`.
  RoleplayResult simulate_respondent(const std::string& persona, std::span<const Item> items, int num_levels);
  /// Free-text advice appended to a report (always marked as model-generated).
  std::string enrich_report(const std::string& type_string, const std::string& summary);

 protected:
  virtual std::string do_transform_question(const std::string& item_text) = 0;
  virtual LabelExtraction do_extract_label(const std::string& question, const std::string& response,
                                           int num_levels) = 0;
  virtual JudgeVerdict do_judge_afm(const std::string& question, const std::string& response, int num_levels) = 0;
  virtual std::string do_similar_question(const std::string& question) = 0;
  virtual std::string do_probe_anomaly(const std::string& question, const std::string& response,
                                       AnomalyKind kind) = 0;
  virtual bool do_confirm_contradiction(const ContextTurn& earlier, const ContextTurn& current) = 0;
  virtual bool do_justification_sufficient(const std::string& question, const std::string& response, int label,
                                           int num_levels) = 0;
  virtual RoleplayResult do_simulate_respondent(const std::string& persona, std::span<const Item> items,
                                                int num_levels) = 0;
  virtual std::string do_enrich_report(const std::string& type_string, const std::string& summary) = 0;
};

}  // namespace testagent
