#include "testagent/http_gateway.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <regex>
#include <stdexcept>
#include <thread>

#include <httplib.h>
#include <spdlog/spdlog.h>

#include "testagent/prompts_v1.inc"

namespace testagent {

using nlohmann::json;

namespace {

// Replies that fail validation; turned into a re-prompt.
struct InvalidReply : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

const json& field(const json& doc, const char* key) {
  if (!doc.is_object() || !doc.contains(key)) throw InvalidReply(std::string("missing field \"") + key + "\"");
  return doc[key];
}

bool get_bool(const json& doc, const char* key) {
  const json& v = field(doc, key);
  if (!v.is_boolean()) throw InvalidReply(std::string("field \"") + key + "\" must be true or false");
  return v.get<bool>();
}

std::string get_text(const json& doc, const char* key) {
  const json& v = field(doc, key);
  if (!v.is_string()) throw InvalidReply(std::string("field \"") + key + "\" must be a string");
  std::string s = v.get<std::string>();
  if (std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c); })) {
    throw InvalidReply(std::string("field \"") + key + "\" is empty");
  }
  return s;
}

int get_label(const json& v, const char* key, int num_levels) {
  // Accept integral numbers only; 4.0 is fine, 4.5 is not.
  if (!v.is_number()) throw InvalidReply(std::string("field \"") + key + "\" must be an integer");
  const double x = v.get<double>();
  if (x != static_cast<double>(static_cast<long long>(x))) {
    throw InvalidReply(std::string("field \"") + key + "\" must be an integer");
  }
  if (x < 0 || x > num_levels) {
    throw InvalidReply(std::string("field \"") + key + "\" must be between 0 and " + std::to_string(num_levels));
  }
  return static_cast<int>(x);
}

std::string probe_instruction(AnomalyKind kind) {
  switch (kind) {
    case AnomalyKind::guessing: return std::string(prompt_asset("probe_guessing"));
    case AnomalyKind::misleading: return std::string(prompt_asset("probe_misleading"));
    case AnomalyKind::overconfidence: return std::string(prompt_asset("probe_overconfidence"));
  }
  return {};
}

std::string trim(std::string s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.pop_back();
  std::size_t i = 0;
  while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
  return s.substr(i);
}

// Python-style literal to JSON: single-quoted strings, True/False/None,
// trailing commas.
std::string pythonish_to_json(std::string_view in) {
  std::string out;
  out.reserve(in.size() + 16);
  std::size_t i = 0;
  while (i < in.size()) {
    const char c = in[i];
    if (c == '"' || c == '\'') {
      const char quote = c;
      out += '"';
      ++i;
      while (i < in.size() && in[i] != quote) {
        if (in[i] == '\\' && i + 1 < in.size()) {
          if (in[i + 1] == '\'') {
            out += '\'';
          } else {
            out += in[i];
            out += in[i + 1];
          }
          i += 2;
          continue;
        }
        if (in[i] == '"' && quote == '\'') {
          out += "\\\"";
        } else if (in[i] == '\n') {
          out += "\\n";
        } else {
          out += in[i];
        }
        ++i;
      }
      out += '"';
      ++i;
      continue;
    }
    if (std::isalpha(static_cast<unsigned char>(c))) {
      std::size_t j = i;
      while (j < in.size() && (std::isalnum(static_cast<unsigned char>(in[j])) || in[j] == '_')) ++j;
      const std::string_view word = in.substr(i, j - i);
      if (word == "True") {
        out += "true";
      } else if (word == "False") {
        out += "false";
      } else if (word == "None") {
        out += "null";
      } else {
        out += word;
      }
      i = j;
      continue;
    }
    if (c == ',') {
      std::size_t j = i + 1;
      while (j < in.size() && std::isspace(static_cast<unsigned char>(in[j]))) ++j;
      if (j < in.size() && (in[j] == '}' || in[j] == ']')) {
        i = j;
        continue;
      }
    }
    out += c;
    ++i;
  }
  return out;
}

}  // namespace

void GatewayConfig::validate() const {
  if (endpoint.rfind("http://", 0) != 0 && endpoint.rfind("https://", 0) != 0) {
    throw std::invalid_argument("gateway endpoint must be an http(s) URL");
  }
  if (!(timeout_seconds > 0.0)) throw std::invalid_argument("gateway timeout must be positive");
  if (max_retries < 0) throw std::invalid_argument("gateway max_retries must be >= 0");
  if (max_in_flight < 1 || max_in_flight > 1024) throw std::invalid_argument("gateway max_in_flight must be in [1, 1024]");
  if (temperature < 0.0 || simulation_temperature < 0.0) throw std::invalid_argument("temperature must be >= 0");
  if (model.empty()) throw std::invalid_argument("gateway model is empty");
}

json GatewayConfig::to_json() const {
  return {{"endpoint", endpoint},
          {"token_env", token_env},
          {"model", model},
          {"timeout_seconds", timeout_seconds},
          {"max_retries", max_retries},
          {"temperature", temperature},
          {"simulation_temperature", simulation_temperature},
          {"max_in_flight", max_in_flight},
          {"backoff_ms", backoff_ms}};
}

GatewayConfig GatewayConfig::from_json(const json& doc) {
  GatewayConfig c;
  try {
    c.endpoint = doc.value("endpoint", c.endpoint);
    c.token_env = doc.value("token_env", c.token_env);
    c.model = doc.value("model", c.model);
    c.timeout_seconds = doc.value("timeout_seconds", c.timeout_seconds);
    c.max_retries = doc.value("max_retries", c.max_retries);
    c.temperature = doc.value("temperature", c.temperature);
    c.simulation_temperature = doc.value("simulation_temperature", c.simulation_temperature);
    c.max_in_flight = doc.value("max_in_flight", c.max_in_flight);
    c.backoff_ms = doc.value("backoff_ms", c.backoff_ms);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("bad gateway config: ") + e.what());
  }
  c.validate();
  return c;
}

std::string_view prompt_asset(std::string_view name) {
  for (const auto& [key, text] : kPromptsV1) {
    if (key == name) return text;
  }
  throw std::out_of_range("no prompt asset named '" + std::string(name) + "'");
}

std::string render_prompt(std::string_view tmpl, const std::map<std::string, std::string>& values) {
  std::string out;
  std::size_t pos = 0;
  while (true) {
    const std::size_t open = tmpl.find("{{", pos);
    if (open == std::string_view::npos) break;
    const std::size_t close = tmpl.find("}}", open);
    if (close == std::string_view::npos) break;
    out.append(tmpl.substr(pos, open - pos));
    const std::string key(tmpl.substr(open + 2, close - open - 2));
    const auto it = values.find(key);
    if (it == values.end()) throw std::invalid_argument("prompt placeholder '" + key + "' has no value");
    out += it->second;
    pos = close + 2;
  }
  out.append(tmpl.substr(pos));
  return out;
}

std::string rating_scale(int num_levels) {
  if (num_levels < 1) throw std::invalid_argument("num_levels must be >= 1");
  if (num_levels == 1) return "0: No / does not apply\n1: Yes / applies";
  static const char* kSeven[] = {"Completely Disagree", "Mostly Disagree", "Somewhat Disagree", "Neutral",
                                 "Somewhat Agree",      "Mostly Agree",    "Completely Agree"};
  std::string out;
  for (int m = 0; m <= num_levels; ++m) {
    std::string anchor;
    if (num_levels == 6) {
      anchor = kSeven[m];
    } else if (m == 0) {
      anchor = "Completely Disagree";
    } else if (m == num_levels) {
      anchor = "Completely Agree";
    } else if (2 * m == num_levels) {
      anchor = "Neutral";
    } else {
      anchor = 2 * m < num_levels ? "leaning disagree" : "leaning agree";
    }
    out += std::to_string(m) + ": " + anchor + (m < num_levels ? "\n" : "");
  }
  return out;
}

json parse_lenient_json(std::string_view text) {
  const std::size_t start = text.find_first_of("{[");
  if (start == std::string_view::npos) throw std::invalid_argument("reply contains no JSON object");
  const char close = text[start] == '{' ? '}' : ']';
  const std::size_t end = text.rfind(close);
  if (end == std::string_view::npos || end < start) throw std::invalid_argument("reply contains no complete JSON object");
  const std::string_view body = text.substr(start, end - start + 1);
  json doc = json::parse(body, nullptr, false);
  if (!doc.is_discarded()) return doc;
  doc = json::parse(pythonish_to_json(body), nullptr, false);
  if (doc.is_discarded()) throw std::invalid_argument("reply is not valid JSON");
  return doc;
}

std::string redact(std::string text, const std::string& secret) {
  if (!secret.empty()) {
    for (std::size_t pos = text.find(secret); pos != std::string::npos; pos = text.find(secret, pos)) {
      text.replace(pos, secret.size(), "***");
    }
  }
  static const std::regex bearer(R"((Bearer\s+)[A-Za-z0-9._\-]+)");
  return std::regex_replace(text, bearer, "$1***");
}

struct HttpGateway::Endpoint {
  std::string origin;  // scheme://host[:port]
  std::string path;
};

HttpGateway::HttpGateway(GatewayConfig config)
    : config_(std::move(config)), endpoint_(std::make_unique<Endpoint>()), in_flight_(1024) {
  config_.validate();
  if (const char* t = std::getenv(config_.token_env.c_str())) token_ = t;
  const std::size_t scheme_end = config_.endpoint.find("://") + 3;
  const std::size_t slash = config_.endpoint.find('/', scheme_end);
  endpoint_->origin = config_.endpoint.substr(0, slash);
  endpoint_->path = slash == std::string::npos ? "/" : config_.endpoint.substr(slash);
  // Start with only max_in_flight permits available.
  for (int k = config_.max_in_flight; k < 1024; ++k) in_flight_.acquire();
}

HttpGateway::~HttpGateway() = default;

int HttpGateway::peak_in_flight() const {
  std::lock_guard lock(stats_mutex_);
  return peak_;
}

std::string HttpGateway::chat(const json& messages, double temperature) {
  const json body = {{"model", config_.model}, {"temperature", temperature}, {"messages", messages}};
  const std::string payload = body.dump();
  httplib::Headers headers;
  if (!token_.empty()) headers.emplace("Authorization", "Bearer " + token_);

  std::string last_error;
  for (int attempt = 0; attempt <= config_.max_retries; ++attempt) {
    if (attempt > 0) std::this_thread::sleep_for(std::chrono::milliseconds(config_.backoff_ms << (attempt - 1)));
    spdlog::debug("POST {}{} {}", endpoint_->origin, endpoint_->path, redact(payload, token_));

    httplib::Result res{nullptr, httplib::Error::Unknown};
    {
      in_flight_.acquire();
      {
        std::lock_guard lock(stats_mutex_);
        peak_ = std::max(peak_, ++active_);
      }
      httplib::Client client(endpoint_->origin);
      const auto timeout = std::chrono::duration<double>(config_.timeout_seconds);
      client.set_connection_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
      client.set_read_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
      client.set_write_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
      res = client.Post(endpoint_->path, headers, payload, "application/json");
      {
        std::lock_guard lock(stats_mutex_);
        --active_;
      }
      in_flight_.release();
    }

    if (!res) {
      last_error = "request failed: " + httplib::to_string(res.error());
      spdlog::warn("gateway {} (attempt {})", last_error, attempt + 1);
      continue;
    }
    spdlog::debug("reply {} {}", res->status, redact(res->body, token_));
    if (res->status == 429 || res->status >= 500) {
      last_error = "endpoint returned HTTP " + std::to_string(res->status);
      spdlog::warn("gateway {} (attempt {})", last_error, attempt + 1);
      continue;
    }
    if (res->status != 200) {
      throw GatewayError(GatewayError::Kind::transport, "endpoint returned HTTP " + std::to_string(res->status),
                         redact(res->body, token_));
    }
    const json envelope = json::parse(res->body, nullptr, false);
    if (envelope.is_discarded() || !envelope.contains("choices") || !envelope["choices"].is_array() ||
        envelope["choices"].empty()) {
      throw GatewayError(GatewayError::Kind::malformed, "reply has no choices", redact(res->body, token_));
    }
    const json& message = envelope["choices"][0].value("message", json::object());
    if (!message.contains("content") || !message["content"].is_string()) {
      throw GatewayError(GatewayError::Kind::malformed, "reply has no message content", redact(res->body, token_));
    }
    return message["content"].get<std::string>();
  }
  throw GatewayError(GatewayError::Kind::transport, last_error);
}

template <class Check>
auto HttpGateway::ask(const std::string& op, const std::string& user, double temperature, Check check)
    -> decltype(check(json{})) {
  json messages = json::array({{{"role", "system"}, {"content", std::string(prompt_asset("system"))}},
                               {{"role", "user"}, {"content", user}}});
  std::string content;
  std::string problem;
  for (int attempt = 0; attempt <= config_.max_retries; ++attempt) {
    content = chat(messages, temperature);
    try {
      return check(parse_lenient_json(content));
    } catch (const std::invalid_argument& e) {
      problem = e.what();
    }
    spdlog::info("{}: invalid reply ({}), re-prompting", op, problem);
    messages.push_back({{"role", "assistant"}, {"content", content}});
    messages.push_back({{"role", "user"},
                        {"content", "That reply was not usable: " + problem +
                                        ". Reply again with only the JSON object in the requested format."}});
  }
  throw GatewayError(GatewayError::Kind::malformed, op + ": " + problem, content);
}

std::string HttpGateway::do_transform_question(const std::string& item_text) {
  const std::string user = render_prompt(prompt_asset("transform_question"), {{"item_text", item_text}});
  return ask("transform_question", user, config_.temperature, [](const json& r) { return get_text(r, "question"); });
}

LabelExtraction HttpGateway::do_extract_label(const std::string& question, const std::string& response,
                                              int num_levels) {
  const std::string user = render_prompt(prompt_asset("extract_label"),
                                         {{"question", question},
                                          {"response", response},
                                          {"num_levels", std::to_string(num_levels)},
                                          {"scale", rating_scale(num_levels)}});
  return ask("extract_label", user, config_.temperature, [num_levels](const json& r) {
    LabelExtraction out;
    out.label = get_label(field(r, "label"), "label", num_levels);
    if (r.contains("explanation") && r["explanation"].is_string()) out.explanation = r["explanation"];
    return out;
  });
}

JudgeVerdict HttpGateway::do_judge_afm(const std::string& question, const std::string& response, int num_levels) {
  const std::string user = render_prompt(prompt_asset("judge_afm"),
                                         {{"question", question},
                                          {"response", response},
                                          {"num_levels", std::to_string(num_levels)},
                                          {"scale", rating_scale(num_levels)}});
  return ask("judge_afm", user, config_.temperature, [num_levels](const json& r) {
    JudgeVerdict v;
    v.relevant = get_bool(r, "relevant");
    v.aligned = get_bool(r, "aligned");
    v.coherent = get_bool(r, "coherent");
    if (v.checks_pass()) {
      if (!r.contains("label") || r["label"].is_null()) throw InvalidReply("label is required when all checks pass");
      v.label = get_label(r["label"], "label", num_levels);
    } else if (r.contains("similar_question") && r["similar_question"].is_string()) {
      v.similar_question = r["similar_question"].get<std::string>();
    }
    if (r.contains("rationale") && r["rationale"].is_string()) v.rationale = r["rationale"];
    return v;
  });
}

std::string HttpGateway::do_similar_question(const std::string& question) {
  const std::string user = render_prompt(prompt_asset("similar_question"), {{"question", question}});
  return ask("similar_question", user, config_.temperature, [](const json& r) { return get_text(r, "question"); });
}

std::string HttpGateway::do_probe_anomaly(const std::string& question, const std::string& response,
                                          AnomalyKind kind) {
  const std::string user = render_prompt(
      prompt_asset("probe_anomaly"),
      {{"instruction", trim(probe_instruction(kind))}, {"question", question}, {"response", response}});
  return ask("probe_anomaly", user, config_.temperature, [](const json& r) { return get_text(r, "question"); });
}

bool HttpGateway::do_confirm_contradiction(const ContextTurn& earlier, const ContextTurn& current) {
  const std::string user = render_prompt(prompt_asset("confirm_contradiction"),
                                         {{"earlier_question", earlier.question},
                                          {"earlier_response", earlier.response},
                                          {"earlier_label", std::to_string(earlier.label)},
                                          {"current_question", current.question},
                                          {"current_response", current.response},
                                          {"current_label", std::to_string(current.label)}});
  return ask("confirm_contradiction", user, config_.temperature,
             [](const json& r) { return get_bool(r, "contradiction"); });
}

bool HttpGateway::do_justification_sufficient(const std::string& question, const std::string& response, int label,
                                              int num_levels) {
  const std::string user = render_prompt(prompt_asset("justification_sufficient"),
                                         {{"question", question},
                                          {"response", response},
                                          {"label", std::to_string(label)},
                                          {"num_levels", std::to_string(num_levels)}});
  return ask("justification_sufficient", user, config_.temperature,
             [](const json& r) { return get_bool(r, "sufficient"); });
}

RoleplayResult HttpGateway::do_simulate_respondent(const std::string& persona, std::span<const Item> items,
                                                   int num_levels) {
  RoleplayResult result;
  result.answers.assign(items.size(), std::nullopt);
  std::vector<std::size_t> missing(items.size());
  for (std::size_t k = 0; k < items.size(); ++k) missing[k] = k;

  // Each round asks only for the statements still unanswered.
  for (int round = 0; round <= config_.max_retries && !missing.empty(); ++round) {
    std::string listing;
    for (std::size_t j = 0; j < missing.size(); ++j) {
      listing += "Question " + std::to_string(j + 1) + ": " + items[missing[j]].text + "\n";
    }
    const std::string user = render_prompt(
        prompt_asset("simulate_respondent"),
        {{"persona", persona}, {"scale", rating_scale(num_levels)}, {"items", trim(listing)}});
    json messages = json::array({{{"role", "system"}, {"content", std::string(prompt_asset("system"))}},
                                 {{"role", "user"}, {"content", user}}});
    json reply;
    try {
      reply = parse_lenient_json(chat(messages, config_.simulation_temperature));
    } catch (const std::invalid_argument& e) {
      spdlog::info("simulate_respondent: unreadable reply ({})", e.what());
      continue;
    }
    std::vector<std::size_t> still;
    for (std::size_t j = 0; j < missing.size(); ++j) {
      const Item& item = items[missing[j]];
      const std::string key = "Question " + std::to_string(j + 1);
      try {
        const json& entry = field(reply, key.c_str());
        RoleplayAnswer a;
        a.label = get_label(field(entry, "Answer"), "Answer", std::min(num_levels, item.num_levels));
        const json& text = field(entry, "Response");
        a.text = text.is_string() ? text.get<std::string>() : text.dump();
        result.answers[missing[j]] = a;
      } catch (const std::invalid_argument&) {
        still.push_back(missing[j]);
      }
    }
    missing = std::move(still);
  }
  result.skipped = static_cast<int>(missing.size());
  if (result.skipped > 0) spdlog::warn("simulate_respondent: {} item(s) skipped for '{}'", result.skipped, persona);
  return result;
}

std::string HttpGateway::do_enrich_report(const std::string& type_string, const std::string& summary) {
  const std::string user =
      render_prompt(prompt_asset("enrich_report"), {{"type", type_string}, {"summary", summary}});
  return ask("enrich_report", user, config_.simulation_temperature,
             [](const json& r) { return get_text(r, "advice"); });
}

}  // namespace testagent
