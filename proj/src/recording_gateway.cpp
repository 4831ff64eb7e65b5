#include "testagent/recording_gateway.hpp"

namespace testagent {

using nlohmann::json;

namespace {

std::string_view kind_name(GatewayError::Kind kind) {
  switch (kind) {
    case GatewayError::Kind::precondition: return "precondition";
    case GatewayError::Kind::transport: return "transport";
    case GatewayError::Kind::malformed: return "malformed";
  }
  return "transport";
}

GatewayError::Kind parse_kind(const std::string& name) {
  if (name == "precondition") return GatewayError::Kind::precondition;
  if (name == "malformed") return GatewayError::Kind::malformed;
  return GatewayError::Kind::transport;
}

json encode(const std::string& s) { return s; }
json encode(bool b) { return b; }
json encode(const LabelExtraction& x) { return {{"label", x.label}, {"explanation", x.explanation}}; }

json encode(const JudgeVerdict& v) {
  json j = {{"relevant", v.relevant}, {"aligned", v.aligned}, {"coherent", v.coherent}, {"rationale", v.rationale}};
  if (v.label) j["label"] = *v.label;
  if (v.similar_question) j["similar_question"] = *v.similar_question;
  return j;
}

json encode(const RoleplayResult& r) {
  json answers = json::array();
  for (const auto& a : r.answers) {
    answers.push_back(a ? json{{"label", a->label}, {"text", a->text}} : json(nullptr));
  }
  return {{"answers", answers}, {"skipped", r.skipped}};
}

LabelExtraction decode_extraction(const json& j) { return {j.at("label").get<int>(), j.at("explanation")}; }

JudgeVerdict decode_verdict(const json& j) {
  JudgeVerdict v;
  v.relevant = j.at("relevant");
  v.aligned = j.at("aligned");
  v.coherent = j.at("coherent");
  v.rationale = j.value("rationale", "");
  if (j.contains("label")) v.label = j["label"].get<int>();
  if (j.contains("similar_question")) v.similar_question = j["similar_question"].get<std::string>();
  return v;
}

RoleplayResult decode_roleplay(const json& j) {
  RoleplayResult r;
  for (const auto& a : j.at("answers")) {
    if (a.is_null()) {
      r.answers.emplace_back();
    } else {
      r.answers.push_back(RoleplayAnswer{a.at("label").get<int>(), a.at("text")});
    }
  }
  r.skipped = j.at("skipped");
  return r;
}

}  // namespace

template <class F>
auto RecordingGateway::record(const char* op, F&& call) -> decltype(call()) {
  try {
    auto out = call();
    tape_.push_back({{"op", op}, {"output", encode(out)}});
    return out;
  } catch (const GatewayError& e) {
    tape_.push_back(
        {{"op", op}, {"error", {{"kind", kind_name(e.kind())}, {"message", e.what()}, {"raw", e.raw_payload()}}}});
    throw;
  }
}

std::string RecordingGateway::do_transform_question(const std::string& item_text) {
  return record("transform_question", [&] { return inner_.transform_question(item_text); });
}
LabelExtraction RecordingGateway::do_extract_label(const std::string& question, const std::string& response,
                                                   int num_levels) {
  return record("extract_label", [&] { return inner_.extract_label(question, response, num_levels); });
}
JudgeVerdict RecordingGateway::do_judge_afm(const std::string& question, const std::string& response,
                                            int num_levels) {
  return record("judge_afm", [&] { return inner_.judge_afm(question, response, num_levels); });
}
std::string RecordingGateway::do_similar_question(const std::string& question) {
  return record("similar_question", [&] { return inner_.similar_question(question); });
}
std::string RecordingGateway::do_probe_anomaly(const std::string& question, const std::string& response,
                                               AnomalyKind kind) {
  return record("probe_anomaly", [&] { return inner_.probe_anomaly(question, response, kind); });
}
bool RecordingGateway::do_confirm_contradiction(const ContextTurn& earlier, const ContextTurn& current) {
  return record("confirm_contradiction", [&] { return inner_.confirm_contradiction(earlier, current); });
}
bool RecordingGateway::do_justification_sufficient(const std::string& question, const std::string& response,
                                                   int label, int num_levels) {
  return record("justification_sufficient",
                [&] { return inner_.justification_sufficient(question, response, label, num_levels); });
}
RoleplayResult RecordingGateway::do_simulate_respondent(const std::string& persona, std::span<const Item> items,
                                                        int num_levels) {
  return record("simulate_respondent", [&] { return inner_.simulate_respondent(persona, items, num_levels); });
}
std::string RecordingGateway::do_enrich_report(const std::string& type_string, const std::string& summary) {
  return record("enrich_report", [&] { return inner_.enrich_report(type_string, summary); });
}

PlaybackGateway::PlaybackGateway(json tape) : tape_(std::move(tape)) {
  if (!tape_.is_array()) throw std::invalid_argument("gateway tape must be an array");
}

const json& PlaybackGateway::take(const char* op) {
  if (next_ >= tape_.size()) throw ReplayDivergence(std::string("tape exhausted before ") + op);
  const json& entry = tape_[next_++];
  if (entry.value("op", "") != op) {
    throw ReplayDivergence("tape has " + entry.value("op", std::string("?")) + " where " + op + " was requested");
  }
  if (entry.contains("error")) {
    const json& e = entry["error"];
    throw GatewayError(parse_kind(e.value("kind", "transport")), e.value("message", ""), e.value("raw", ""));
  }
  return entry.at("output");
}

std::string PlaybackGateway::do_transform_question(const std::string&) {
  return take("transform_question").get<std::string>();
}
LabelExtraction PlaybackGateway::do_extract_label(const std::string&, const std::string&, int) {
  return decode_extraction(take("extract_label"));
}
JudgeVerdict PlaybackGateway::do_judge_afm(const std::string&, const std::string&, int) {
  return decode_verdict(take("judge_afm"));
}
std::string PlaybackGateway::do_similar_question(const std::string&) {
  return take("similar_question").get<std::string>();
}
std::string PlaybackGateway::do_probe_anomaly(const std::string&, const std::string&, AnomalyKind) {
  return take("probe_anomaly").get<std::string>();
}
bool PlaybackGateway::do_confirm_contradiction(const ContextTurn&, const ContextTurn&) {
  return take("confirm_contradiction").get<bool>();
}
bool PlaybackGateway::do_justification_sufficient(const std::string&, const std::string&, int, int) {
  return take("justification_sufficient").get<bool>();
}
RoleplayResult PlaybackGateway::do_simulate_respondent(const std::string&, std::span<const Item>, int) {
  return decode_roleplay(take("simulate_respondent"));
}
std::string PlaybackGateway::do_enrich_report(const std::string&, const std::string&) {
  return take("enrich_report").get<std::string>();
}

}  // namespace testagent
