#include "testagent/gateway.hpp"

#include <algorithm>
#include <cctype>

namespace testagent {

std::string_view to_string(AnomalyKind kind) {
  switch (kind) {
    case AnomalyKind::guessing:
      return "guessing";
    case AnomalyKind::misleading:
      return "misleading";
    case AnomalyKind::overconfidence:
      return "overconfidence";
  }
  return "unknown";
}

AnomalyKind parse_anomaly_kind(std::string_view name) {
  if (name == "guessing") return AnomalyKind::guessing;
  if (name == "misleading") return AnomalyKind::misleading;
  if (name == "overconfidence") return AnomalyKind::overconfidence;
  throw std::invalid_argument("unknown anomaly kind '" + std::string(name) + "'");
}

namespace {

bool blank(const std::string& s) {
  return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c) != 0; });
}

void require_text(const std::string& s, const char* what) {
  if (blank(s)) throw GatewayError(GatewayError::Kind::precondition, std::string(what) + " must not be empty");
}

void require_levels(int num_levels) {
  if (num_levels < 1) throw GatewayError(GatewayError::Kind::precondition, "num_levels must be >= 1");
}

std::string require_reply(std::string reply, const char* what) {
  if (blank(reply)) throw GatewayError(GatewayError::Kind::malformed, std::string("empty ") + what + " reply", reply);
  return reply;
}

}  // namespace

std::string Gateway::transform_question(const std::string& item_text) {
  require_text(item_text, "question text");
  return require_reply(do_transform_question(item_text), "transform_question");
}

LabelExtraction Gateway::extract_label(const std::string& question, const std::string& response, int num_levels) {
  require_levels(num_levels);
  require_text(response, "response");
  LabelExtraction out = do_extract_label(question, response, num_levels);
  if (out.label < 0 || out.label > num_levels) {
    throw GatewayError(GatewayError::Kind::malformed,
                       "label " + std::to_string(out.label) + " outside [0, " + std::to_string(num_levels) + "]");
  }
  return out;
}

JudgeVerdict Gateway::judge_afm(const std::string& question, const std::string& response, int num_levels) {
  require_levels(num_levels);
  require_text(question, "question");
  require_text(response, "response");
  JudgeVerdict v = do_judge_afm(question, response, num_levels);
  if (!v.checks_pass()) {
    v.label.reset();
  } else if (v.label && (*v.label < 0 || *v.label > num_levels)) {
    throw GatewayError(GatewayError::Kind::malformed, "judge label outside range");
  }
  if (v.similar_question && blank(*v.similar_question)) v.similar_question.reset();
  return v;
}

std::string Gateway::similar_question(const std::string& question) {
  require_text(question, "question");
  return require_reply(do_similar_question(question), "similar_question");
}

std::string Gateway::probe_anomaly(const std::string& question, const std::string& response, AnomalyKind kind) {
  require_text(question, "question");
  return require_reply(do_probe_anomaly(question, response, kind), "probe_anomaly");
}

bool Gateway::confirm_contradiction(const ContextTurn& earlier, const ContextTurn& current) {
  require_text(current.question, "question");
  return do_confirm_contradiction(earlier, current);
}

bool Gateway::justification_sufficient(const std::string& question, const std::string& response, int label,
                                       int num_levels) {
  require_levels(num_levels);
  require_text(question, "question");
  return do_justification_sufficient(question, response, label, num_levels);
}

RoleplayResult Gateway::simulate_respondent(const std::string& persona, std::span<const Item> items, int num_levels) {
  require_levels(num_levels);
  require_text(persona, "persona");
  if (items.empty()) throw GatewayError(GatewayError::Kind::precondition, "no items to answer");
  RoleplayResult r = do_simulate_respondent(persona, items, num_levels);
  r.answers.resize(items.size());
  int skipped = 0;
  for (std::size_t i = 0; i < items.size(); ++i) {
    auto& a = r.answers[i];
    if (a && (a->label < 0 || a->label > std::min(num_levels, items[i].num_levels))) a.reset();
    if (!a) ++skipped;
  }
  r.skipped = skipped;
  return r;
}

std::string Gateway::enrich_report(const std::string& type_string, const std::string& summary) {
  require_text(summary, "summary");
  return require_reply(do_enrich_report(type_string, summary), "enrich_report");
}

}  // namespace testagent
