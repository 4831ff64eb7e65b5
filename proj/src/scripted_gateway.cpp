#include "testagent/scripted_gateway.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "testagent/random.hpp"

namespace testagent {

namespace {

const char* const kOps[] = {"transform_question", "extract_label",         "judge_afm",
                            "similar_question",   "probe_anomaly",         "confirm_contradiction",
                            "justification_sufficient", "simulate_respondent", "enrich_report"};

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

void raise_if_error(const nlohmann::json& out) {
  if (!out.is_object() || !out.contains("error")) return;
  const std::string kind = out["error"].get<std::string>();
  if (kind == "transport") throw GatewayError(GatewayError::Kind::transport, "scripted transport failure");
  throw GatewayError(GatewayError::Kind::malformed, "scripted malformed reply", out.dump());
}

std::string text_of(const nlohmann::json& out) {
  if (out.is_string()) return out.get<std::string>();
  return out.value("text", std::string{});
}

}  // namespace

Scenario Scenario::from_json(const nlohmann::json& doc) {
  if (!doc.is_object()) throw std::invalid_argument("scenario must be a JSON object");
  const int version = doc.value("version", 1);
  if (version != 1) throw std::invalid_argument("unsupported scenario version " + std::to_string(version));
  Scenario s;
  s.seed = doc.value("seed", std::uint64_t{0});
  if (doc.contains("defaults")) {
    const auto& d = doc["defaults"];
    s.default_contradiction = d.value("contradiction", false);
    s.default_justification_sufficient = d.value("justification_sufficient", true);
  }
  for (const auto& r : doc.value("rules", nlohmann::json::array())) {
    ScenarioRule rule;
    rule.op = r.at("op").get<std::string>();
    if (std::find(std::begin(kOps), std::end(kOps), rule.op) == std::end(kOps)) {
      throw std::invalid_argument("scenario rule has unknown op '" + rule.op + "'");
    }
    if (r.contains("turn")) rule.turn = r["turn"].get<int>();
    if (r.contains("pattern")) rule.pattern = r["pattern"].get<std::string>();
    if (r.contains("kind")) rule.kind = r["kind"].get<std::string>();
    rule.output = r.value("output", nlohmann::json::object());
    s.rules.push_back(std::move(rule));
  }
  return s;
}

Scenario Scenario::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open scenario file " + path.string());
  try {
    return from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("scenario " + path.string() + ": " + e.what());
  }
}

ScriptedGateway::ScriptedGateway(Scenario scenario) : scenario_(std::move(scenario)) {
  for (const auto& rule : scenario_.rules) {
    if (rule.pattern) {
      compiled_.emplace_back(std::regex(*rule.pattern, std::regex::ECMAScript | std::regex::icase));
    } else {
      compiled_.emplace_back(std::nullopt);
    }
  }
}

int ScriptedGateway::calls(const std::string& op) const {
  auto it = calls_.find(op);
  return it == calls_.end() ? 0 : it->second;
}

const nlohmann::json* ScriptedGateway::match(const std::string& op, const std::string& text,
                                             std::optional<std::string_view> kind) {
  const int turn = calls_[op]++;
  for (std::size_t i = 0; i < scenario_.rules.size(); ++i) {
    const auto& rule = scenario_.rules[i];
    if (rule.op != op) continue;
    if (rule.turn && *rule.turn != turn) continue;
    if (rule.kind && (!kind || *rule.kind != *kind)) continue;
    if (compiled_[i] && !std::regex_search(text, *compiled_[i])) continue;
    raise_if_error(rule.output);
    return &rule.output;
  }
  return nullptr;
}

std::string ScriptedGateway::do_transform_question(const std::string& item_text) {
  if (const auto* out = match("transform_question", item_text)) return text_of(*out);
  return "Q: " + item_text;
}

LabelExtraction ScriptedGateway::do_extract_label(const std::string& /*question*/, const std::string& response,
                                                  int /*num_levels*/) {
  if (const auto* out = match("extract_label", response)) {
    if (!out->contains("label")) throw GatewayError(GatewayError::Kind::malformed, "no label", out->dump());
    return LabelExtraction{(*out)["label"].get<int>(), out->value("explanation", std::string{})};
  }
  // Default: the first integer written in the answer.
  static const std::regex number(R"((^|[^0-9])([0-9]+))");
  std::smatch m;
  if (!std::regex_search(response, m, number)) {
    throw GatewayError(GatewayError::Kind::malformed, "no rating found in response", response);
  }
  return LabelExtraction{std::stoi(m[2].str()), "rating stated in the answer"};
}

JudgeVerdict ScriptedGateway::do_judge_afm(const std::string& question, const std::string& response,
                                           int /*num_levels*/) {
  JudgeVerdict v;
  if (const auto* out = match("judge_afm", response)) {
    v.relevant = out->value("relevant", true);
    v.aligned = out->value("aligned", true);
    v.coherent = out->value("coherent", true);
    if (out->contains("similar_question") && !(*out)["similar_question"].is_null()) {
      v.similar_question = (*out)["similar_question"].get<std::string>();
    }
    v.rationale = out->value("rationale", std::string{});
    return v;
  }
  v.rationale = "default verdict";
  (void)question;
  return v;
}

std::string ScriptedGateway::do_similar_question(const std::string& question) {
  if (const auto* out = match("similar_question", question)) return text_of(*out);
  return "In other words: " + question;
}

std::string ScriptedGateway::do_probe_anomaly(const std::string& question, const std::string& response,
                                              AnomalyKind kind) {
  if (const auto* out = match("probe_anomaly", response, to_string(kind))) return text_of(*out);
  switch (kind) {
    case AnomalyKind::guessing:
      return "Let me check that another way. " + question;
    case AnomalyKind::misleading:
      return "Let's take this one step at a time. " + question;
    case AnomalyKind::overconfidence:
      return "Could you elaborate on why you feel that way?";
  }
  return question;
}

bool ScriptedGateway::do_confirm_contradiction(const ContextTurn& /*earlier*/, const ContextTurn& current) {
  if (const auto* out = match("confirm_contradiction", current.response)) return out->value("confirm", true);
  return scenario_.default_contradiction;
}

bool ScriptedGateway::do_justification_sufficient(const std::string& /*question*/, const std::string& response,
                                                  int /*label*/, int /*num_levels*/) {
  if (const auto* out = match("justification_sufficient", response)) return out->value("sufficient", true);
  return scenario_.default_justification_sufficient;
}

std::vector<double> persona_theta(const std::string& persona, int dimensions) {
  std::vector<double> theta(static_cast<std::size_t>(std::max(dimensions, 1)), 0.0);
  const std::string prefix = "theta=";
  if (persona.rfind(prefix, 0) == 0) {
    std::stringstream ss(persona.substr(prefix.size()));
    std::string field;
    std::size_t d = 0;
    while (std::getline(ss, field, ',') && d < theta.size()) theta[d++] = std::stod(field);
    return theta;
  }
  std::uint64_t h = fnv1a(persona);
  for (auto& t : theta) {
    h = mix64(h);
    t = -2.0 + 4.0 * static_cast<double>(h >> 11) * 0x1.0p-53;
  }
  return theta;
}

RoleplayResult ScriptedGateway::do_simulate_respondent(const std::string& persona, std::span<const Item> items,
                                                       int num_levels) {
  const int call = calls("simulate_respondent");
  if (const auto* out = match("simulate_respondent", persona)) {
    RoleplayResult r;
    for (const auto& a : out->value("answers", nlohmann::json::array())) {
      if (a.is_null()) {
        r.answers.emplace_back(std::nullopt);
      } else {
        r.answers.emplace_back(RoleplayAnswer{a.at("label").get<int>(), a.value("text", std::string{})});
      }
    }
    return r;
  }
  int dims = 1;
  for (const auto& item : items) dims = std::max(dims, item.dimension + 1);
  const auto theta = persona_theta(persona, dims);
  std::mt19937_64 rng(derive_seed(scenario_.seed, {static_cast<std::uint64_t>(call), fnv1a(persona)}));
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  RoleplayResult r;
  for (const auto& source : items) {
    Item item = source;
    item.num_levels = std::min(item.num_levels, num_levels);
    if (!item.calibrated()) {
      // Uncalibrated items answer as if thresholds were spread evenly over [-2, 2].
      item.thresholds.clear();
      for (int m = 1; m <= item.num_levels; ++m) {
        item.thresholds.push_back(item.num_levels == 1 ? 0.0 : -2.0 + 4.0 * (m - 1) / (item.num_levels - 1));
      }
    }
    const auto p = category_probs(theta[static_cast<std::size_t>(item.dimension)], item);
    const double u = unit(rng);
    double acc = 0.0;
    int label = item.num_levels;
    for (int m = 0; m < item.num_levels; ++m) {
      acc += p[static_cast<std::size_t>(m)];
      if (u < acc) {
        label = m;
        break;
      }
    }
    r.answers.emplace_back(RoleplayAnswer{label, "Rating " + std::to_string(label)});
  }
  return r;
}

std::string ScriptedGateway::do_enrich_report(const std::string& type_string, const std::string& summary) {
  if (const auto* out = match("enrich_report", summary)) return text_of(*out);
  return "Scripted advice for type " + (type_string.empty() ? std::string("(unclassified)") : type_string) + ".";
}

}  // namespace testagent
