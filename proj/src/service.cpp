#include "testagent/service.hpp"

#include <algorithm>
#include <fstream>
#include <regex>
#include <sstream>

#include <httplib.h>
#include <spdlog/pattern_formatter.h>
#include <spdlog/spdlog.h>

#include "testagent/recording_gateway.hpp"

#ifndef TESTAGENT_VERSION
#define TESTAGENT_VERSION "0.0.0"
#endif

namespace testagent {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

ApiResponse error(int status, const std::string& code, const std::string& message) {
  return {status, {{"error", {{"code", code}, {"message", message}}}}, std::nullopt};
}

json turn_of(const json& record) {
  json turn = {{"event", record.at("event")}};
  if (record.at("type") == "answer") turn["answer"] = record.at("text");
  return turn;
}

template <class F>
auto with_tape(const json& record, Gateway* gateway, F&& fn) -> decltype(fn(*gateway)) {
  if (gateway) return fn(*gateway);
  PlaybackGateway playback(record.value("gateway", json::array()));
  auto out = fn(playback);
  if (playback.remaining() != 0) throw ReplayDivergence("record left gateway outputs unused");
  return out;
}

void expect_event(const json& record, const SessionEvent& event) {
  if (record.at("event") != event.to_json()) {
    throw ReplayDivergence("event of record " + record.at("seq").dump() + " differs on replay");
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// SessionStore

SessionStore::SessionStore(fs::path dir) : dir_(std::move(dir)) { fs::create_directories(dir_); }

void SessionStore::append(const std::string& id, const json& record) const {
  std::ofstream out(dir_ / (id + ".jsonl"), std::ios::app | std::ios::binary);
  out << record.dump() << '\n';
  out.flush();
  if (!out) throw std::runtime_error("cannot append to the event log of " + id);
}

void SessionStore::write_snapshot(const std::string& id, const json& snapshot) const {
  const fs::path target = dir_ / (id + ".snapshot.json");
  const fs::path tmp = dir_ / (id + ".snapshot.json.tmp");
  {
    std::ofstream out(tmp, std::ios::trunc | std::ios::binary);
    out << snapshot.dump() << '\n';
    out.flush();
    if (!out) throw std::runtime_error("cannot write the snapshot of " + id);
  }
  fs::rename(tmp, target);
}

std::vector<std::string> SessionStore::session_ids() const {
  std::vector<std::string> ids;
  for (const auto& entry : fs::directory_iterator(dir_)) {
    if (entry.is_regular_file() && entry.path().extension() == ".jsonl") ids.push_back(entry.path().stem().string());
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

std::vector<json> SessionStore::read_log(const std::string& id) const {
  std::ifstream in(dir_ / (id + ".jsonl"), std::ios::binary);
  if (!in) throw std::runtime_error("no event log for " + id);
  std::vector<json> records;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json rec = json::parse(line, nullptr, false);
    if (rec.is_discarded()) {
      throw std::runtime_error("event log of " + id + " has an unreadable line " + std::to_string(records.size()));
    }
    records.push_back(std::move(rec));
  }
  return records;
}

std::optional<json> SessionStore::read_snapshot(const std::string& id) const {
  std::ifstream in(dir_ / (id + ".snapshot.json"), std::ios::binary);
  if (!in) return std::nullopt;
  json doc = json::parse(in, nullptr, false);
  if (doc.is_discarded()) return std::nullopt;
  return doc;
}

json snapshot_json(const std::string& bank_id, const Session& session, const std::map<std::string, json>& nonces,
                   int seq) {
  json n = json::object();
  for (const auto& [k, v] : nonces) n[k] = v;
  return {{"session_id", session.id()}, {"bank_id", bank_id}, {"seq", seq}, {"state", session.to_json()},
          {"nonces", n}};
}

ReplayedSession replay_log(std::span<const json> records, std::shared_ptr<const ItemBank> bank, Gateway* gateway) {
  if (records.empty() || records[0].value("type", "") != "create") {
    throw ReplayDivergence("event log does not start with a create record");
  }
  const json& create = records[0];
  const SessionConfig config = SessionConfig::from_json(create.at("config"));
  std::optional<Session> session;
  with_tape(create, gateway, [&](Gateway& g) {
    session.emplace(Session::start(create.at("session_id"), config, bank, g));
    return 0;
  });
  expect_event(create, session->current_event());

  std::map<std::string, json> nonces;
  json turns = json::array({turn_of(create)});
  for (std::size_t k = 1; k < records.size(); ++k) {
    const json& rec = records[k];
    if (rec.value("seq", -1) != static_cast<int>(k)) throw ReplayDivergence("event log sequence is broken");
    const std::string type = rec.value("type", "");
    const std::string text = rec.at("text");
    if (type == "failed") {
      // The attempt raised GatewayError and left the session as it was.
      const bool failed = with_tape(rec, gateway, [&](Gateway& g) {
        Session trial = *session;
        try {
          trial.submit_response(text, g);
        } catch (const GatewayError&) {
          return true;
        }
        return false;
      });
      if (!failed) throw ReplayDivergence("failed attempt " + std::to_string(k) + " succeeds on replay");
      continue;
    }
    if (type != "answer") throw ReplayDivergence("unknown record type '" + type + "'");
    const SessionEvent ev = with_tape(rec, gateway, [&](Gateway& g) { return session->submit_response(text, g); });
    expect_event(rec, ev);
    if (rec.contains("nonce") && rec["nonce"].is_string()) nonces[rec["nonce"]] = rec.at("event");
    turns.push_back(turn_of(rec));
  }
  return {create.at("bank_id"), std::move(*session), std::move(nonces), std::move(turns),
          static_cast<int>(records.size()) - 1};
}

// ---------------------------------------------------------------------------
// Config

ServiceConfig ServiceConfig::from_json(const json& doc, const fs::path& base_dir) {
  if (!doc.is_object()) throw std::invalid_argument("service config must be an object");
  const auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : base_dir / p; };
  ServiceConfig c;
  try {
    c.host = doc.value("host", c.host);
    c.port = doc.value("port", c.port);
    if (doc.contains("data_dir")) c.data_dir = resolve(doc["data_dir"].get<std::string>());
    for (const auto& b : doc.value("banks", json::array())) {
      BankSpec spec;
      spec.id = b.at("id").get<std::string>();
      if (b.contains("path")) spec.path = resolve(b["path"].get<std::string>());
      spec.synthetic = b.value("synthetic", "");
      if (b.contains("templates")) spec.templates = resolve(b["templates"].get<std::string>());
      if (spec.path.empty() == spec.synthetic.empty()) {
        throw std::invalid_argument("bank '" + spec.id + "' needs exactly one of path or synthetic");
      }
      c.banks.push_back(std::move(spec));
    }
    if (doc.contains("gateway")) c.gateway = GatewayConfig::from_json(doc["gateway"]);
    if (doc.contains("stub") && !doc["stub"].is_null()) {
      c.stub = doc["stub"].is_string() ? Scenario::load(resolve(doc["stub"].get<std::string>()))
                                       : Scenario::from_json(doc["stub"]);
    }
    if (doc.contains("defaults")) c.defaults = SessionConfig::from_json(doc["defaults"]);
    c.max_steps_limit = doc.value("max_steps_limit", c.max_steps_limit);
    c.replay_check_sample = doc.value("replay_check_sample", c.replay_check_sample);
    c.enrich_reports = doc.value("enrich_reports", c.enrich_reports);
    c.classifier_respondents = doc.value("classifier_respondents", c.classifier_respondents);
    c.classifier_seed = doc.value("classifier_seed", c.classifier_seed);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("bad service config: ") + e.what());
  }
  if (c.port < 0 || c.port > 65535) throw std::invalid_argument("port must be in [0, 65535]");
  if (c.max_steps_limit < 1) throw std::invalid_argument("max_steps_limit must be >= 1");
  if (c.replay_check_sample < 0) throw std::invalid_argument("replay_check_sample must be >= 0");
  std::vector<std::string> ids;
  for (const auto& b : c.banks) ids.push_back(b.id);
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) throw std::invalid_argument("duplicate bank id");
  return c;
}

ServiceConfig ServiceConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open config " + path.string());
  const json doc = json::parse(in, nullptr, false);
  if (doc.is_discarded()) throw std::invalid_argument("config " + path.string() + " is not valid JSON");
  return from_json(doc, path.parent_path());
}

// ---------------------------------------------------------------------------
// Service

struct Service::Bank {
  std::string id;
  BankFile file;
  std::shared_ptr<const ItemBank> items;
  std::optional<LabelMap> label_map;
  std::optional<TypeClassifier> classifier;
  std::map<std::string, ReportTemplate> templates;
};

struct Service::Live {
  std::mutex mutex;
  std::shared_ptr<const Bank> bank;
  std::optional<Session> session;
  std::unique_ptr<Gateway> own_gateway;  // stub mode
  std::map<std::string, json> nonces;
  json turns = json::array();
  int seq = 0;
  std::optional<json> report;
};

Service::Service(ServiceConfig config, std::shared_ptr<Gateway> gateway)
    : config_(std::move(config)), store_(config_.data_dir), shared_gateway_(std::move(gateway)),
      id_rng_(std::random_device{}()) {
  if (!config_.stub && !shared_gateway_) shared_gateway_ = std::make_shared<HttpGateway>(config_.gateway);

  for (const auto& spec : config_.banks) {
    auto bank = std::make_shared<Bank>();
    bank->id = spec.id;
    bank->file = spec.synthetic.empty() ? load_bank(spec.path) : synthetic_bank(spec.synthetic);
    bank->items = std::make_shared<const ItemBank>(bank->file.bank());
    if (!bank->file.label_map.empty()) {
      bank->label_map.emplace(bank->file.label_map);
      GenerationSpec gen;
      gen.respondents = config_.classifier_respondents;
      gen.seed = config_.classifier_seed;
      bank->classifier = train_from_matrix(generate_records(bank->file, gen), *bank->items, *bank->label_map,
                                           config_.defaults.estimation);
    }
    if (!spec.templates.empty()) bank->templates = load_templates(spec.templates);
    spdlog::info("bank {} loaded: {} items, {} templates", spec.id, bank->items->size(), bank->templates.size());
    banks_[spec.id] = std::move(bank);
  }

  const auto ids = store_.session_ids();
  const std::size_t n = ids.size();
  const std::size_t sample = config_.replay_check_sample == 0 ? n : static_cast<std::size_t>(config_.replay_check_sample);
  for (std::size_t k = 0; k < n; ++k) {
    // Evenly spaced sample over the sorted ids.
    const bool check = sample >= n || (k * sample) / n != ((k + 1) * sample) / n;
    restore(ids[k], check);
  }
  if (n > 0) spdlog::info("restored {} session(s), {} quarantined", sessions_.size(), quarantined_.size());
}

Service::~Service() = default;

void Service::restore(const std::string& id, bool check) {
  try {
    const auto records = store_.read_log(id);
    if (records.empty()) throw std::runtime_error("empty event log");
    const std::string bank_id = records[0].value("bank_id", "");
    const auto bank_it = banks_.find(bank_id);
    if (bank_it == banks_.end()) throw std::runtime_error("unknown bank '" + bank_id + "'");
    const auto snapshot = store_.read_snapshot(id);
    const int last_seq = static_cast<int>(records.size()) - 1;
    const bool snapshot_current = snapshot && snapshot->value("seq", -1) == last_seq;

    auto live = std::make_shared<Live>();
    live->bank = bank_it->second;
    if (config_.stub || check || !snapshot_current) {
      // Stub sessions always re-execute so the scripted gateway resumes in step.
      if (config_.stub) live->own_gateway = std::make_unique<ScriptedGateway>(*config_.stub);
      ReplayedSession r = replay_log(records, bank_it->second->items, live->own_gateway.get());
      const json rebuilt = snapshot_json(bank_id, r.session, r.nonces, r.seq);
      if (snapshot_current && rebuilt != *snapshot) throw ReplayDivergence("replayed state differs from snapshot");
      if (!snapshot_current) store_.write_snapshot(id, rebuilt);
      live->session.emplace(std::move(r.session));
      live->nonces = std::move(r.nonces);
      live->turns = std::move(r.turns);
    } else {
      live->session.emplace(Session::from_json(snapshot->at("state"), bank_it->second->items));
      for (const auto& [k, v] : snapshot->at("nonces").items()) live->nonces[k] = v;
      for (const auto& rec : records) {
        if (rec.value("type", "") != "failed") live->turns.push_back(turn_of(rec));
      }
    }
    live->seq = last_seq;
    std::lock_guard lock(sessions_mutex_);
    sessions_[id] = std::move(live);
  } catch (const std::exception& e) {
    spdlog::error("session {} quarantined: {}", id, e.what());
    quarantined_.push_back(id);
  }
}

std::size_t Service::session_count() const {
  std::lock_guard lock(sessions_mutex_);
  return sessions_.size();
}

std::shared_ptr<Service::Live> Service::find(const std::string& id) const {
  std::lock_guard lock(sessions_mutex_);
  const auto it = sessions_.find(id);
  return it == sessions_.end() ? nullptr : it->second;
}

Gateway& Service::gateway_for(Live& live) { return live.own_gateway ? *live.own_gateway : *shared_gateway_; }

std::string Service::new_id() {
  std::lock_guard lock(sessions_mutex_);
  while (true) {
    std::ostringstream out;
    out << "s" << std::hex << (id_rng_() & 0xffffffffffffULL);
    const std::string id = out.str();
    if (!sessions_.count(id) && !fs::exists(store_.dir() / (id + ".jsonl"))) return id;
  }
}

ApiResponse Service::create_session(const std::string& body) {
  const json doc = json::parse(body, nullptr, false);
  if (doc.is_discarded() || !doc.is_object()) return error(400, "bad_request", "body must be a JSON object");
  if (!doc.contains("bank_id") || !doc["bank_id"].is_string()) {
    return error(400, "bad_request", "bank_id must be a string");
  }
  const auto bank_it = banks_.find(doc["bank_id"].get<std::string>());
  if (bank_it == banks_.end()) return error(404, "unknown_bank", "no bank '" + doc["bank_id"].get<std::string>() + "'");

  SessionConfig config = config_.defaults;
  if (doc.contains("strategy")) {
    if (!doc["strategy"].is_string()) return error(400, "bad_request", "strategy must be a string");
    try {
      config.strategy = parse_strategy(doc["strategy"].get<std::string>());
    } catch (const std::invalid_argument& e) {
      return error(400, "bad_request", e.what());
    }
  }
  if (doc.contains("max_steps")) {
    if (!doc["max_steps"].is_number_integer()) return error(400, "bad_request", "max_steps must be an integer");
    config.max_steps = doc["max_steps"].get<int>();
    if (config.max_steps < 1 || config.max_steps > config_.max_steps_limit) {
      return error(400, "bad_request", "max_steps must be in [1, " + std::to_string(config_.max_steps_limit) + "]");
    }
  }
  if (doc.contains("seed")) {
    if (!doc["seed"].is_number_unsigned()) return error(400, "bad_request", "seed must be a non-negative integer");
    config.rng_seed = doc["seed"].get<std::uint64_t>();
  }
  try {
    config.validate();
  } catch (const std::invalid_argument& e) {
    return error(400, "bad_request", e.what());
  }

  const std::string id = new_id();
  auto live = std::make_shared<Live>();
  live->bank = bank_it->second;
  if (config_.stub) live->own_gateway = std::make_unique<ScriptedGateway>(*config_.stub);
  RecordingGateway recorder(gateway_for(*live));
  try {
    live->session.emplace(Session::start(id, config, live->bank->items, recorder));
  } catch (const GatewayError& e) {
    spdlog::warn("session start failed: {}", e.what());
    ApiResponse r = error(502, "gateway_error", e.what());
    r.retry_after = 1;
    return r;
  } catch (const std::invalid_argument& e) {
    return error(400, "bad_request", e.what());
  }
  const json event = live->session->current_event().to_json();
  const json record = {{"seq", 0},         {"type", "create"},       {"session_id", id},
                       {"bank_id", live->bank->id}, {"config", config.to_json()}, {"gateway", recorder.tape()},
                       {"event", event}};
  store_.append(id, record);
  store_.write_snapshot(id, snapshot_json(live->bank->id, *live->session, live->nonces, 0));
  live->turns.push_back(turn_of(record));
  {
    std::lock_guard lock(sessions_mutex_);
    sessions_[id] = live;
  }
  spdlog::info("session {} created on bank {} ({}, T={})", id, live->bank->id, to_string(config.strategy),
               config.max_steps);
  json out = event;
  out["session_id"] = id;
  return {201, out, std::nullopt};
}

ApiResponse Service::answer(const std::string& id, const std::string& body) {
  const auto live = find(id);
  if (!live) return error(404, "unknown_session", "no session '" + id + "'");
  const json doc = json::parse(body, nullptr, false);
  if (doc.is_discarded() || !doc.is_object()) return error(400, "bad_request", "body must be a JSON object");
  if (!doc.contains("text") || !doc["text"].is_string()) return error(400, "bad_request", "text must be a string");
  const std::string text = doc["text"];
  if (std::all_of(text.begin(), text.end(), [](unsigned char c) { return std::isspace(c); })) {
    return error(400, "bad_request", "text must not be empty");
  }
  std::optional<std::string> nonce;
  if (doc.contains("nonce") && !doc["nonce"].is_null()) {
    if (!doc["nonce"].is_string() || doc["nonce"].get<std::string>().empty()) {
      return error(400, "bad_request", "nonce must be a non-empty string");
    }
    nonce = doc["nonce"].get<std::string>();
  }

  std::lock_guard lock(live->mutex);
  if (nonce) {
    const auto it = live->nonces.find(*nonce);
    if (it != live->nonces.end()) return {200, it->second, std::nullopt};
  }
  if (live->session->status() == SessionStatus::completed) {
    return error(409, "session_completed", "session '" + id + "' is already completed");
  }

  Session next = *live->session;
  RecordingGateway recorder(gateway_for(*live));
  SessionEvent event;
  try {
    event = next.submit_response(text, recorder);
  } catch (const GatewayError& e) {
    // Logged so a replay drives the gateway through the same calls.
    store_.append(id, {{"seq", live->seq + 1}, {"type", "failed"}, {"text", text}, {"gateway", recorder.tape()},
                       {"error", e.what()}});
    ++live->seq;
    spdlog::warn("session {}: gateway failure: {}", id, e.what());
    ApiResponse r = error(502, "gateway_error", e.what());
    r.retry_after = 1;
    return r;
  }
  const json event_json = event.to_json();
  json record = {{"seq", live->seq + 1}, {"type", "answer"}, {"nonce", nonce ? json(*nonce) : json(nullptr)},
                 {"text", text},         {"gateway", recorder.tape()}, {"event", event_json}};
  store_.append(id, record);
  ++live->seq;
  auto nonces = live->nonces;
  if (nonce) nonces[*nonce] = event_json;
  store_.write_snapshot(id, snapshot_json(live->bank->id, next, nonces, live->seq));
  live->session.emplace(std::move(next));
  live->nonces = std::move(nonces);
  live->turns.push_back(turn_of(record));
  if (event.kind == EventKind::completed) spdlog::info("session {} completed after {} steps", id, event.step);
  return {200, event_json, std::nullopt};
}

ApiResponse Service::get_session(const std::string& id) {
  const auto live = find(id);
  if (!live) return error(404, "unknown_session", "no session '" + id + "'");
  std::lock_guard lock(live->mutex);
  const Session& s = *live->session;
  const SessionEvent current = s.current_event();
  return {200,
          {{"session_id", id},
           {"bank_id", live->bank->id},
           {"status", to_string(s.status())},
           {"step", s.step()},
           {"max_steps", s.config().max_steps},
           {"progress", current.to_json()["progress"]},
           {"turns", live->turns}},
          std::nullopt};
}

ApiResponse Service::report(const std::string& id) {
  const auto live = find(id);
  if (!live) return error(404, "unknown_session", "no session '" + id + "'");
  std::lock_guard lock(live->mutex);
  if (live->session->status() != SessionStatus::completed) {
    return error(404, "not_completed", "session '" + id + "' has no report until it is completed");
  }
  if (!live->report) {
    const CompletedSession done = live->session->finalize();
    const Bank& bank = *live->bank;
    std::string type;
    if (bank.classifier && bank.label_map) type = classify(done.theta.values, *bank.classifier, *bank.label_map);
    ReportInputs in{done,
                    *bank.items,
                    type,
                    bank.label_map ? &*bank.label_map : nullptr,
                    bank.classifier ? &*bank.classifier : nullptr,
                    bank.templates.empty() ? nullptr : &bank.templates,
                    config_.enrich_reports ? &gateway_for(*live) : nullptr};
    live->report = assemble_report(in);
  }
  return {200, *live->report, std::nullopt};
}

ApiResponse Service::banks() const {
  json list = json::array();
  for (const auto& [id, bank] : banks_) {
    json pairs = json::array();
    for (const auto& [a, b] : bank->file.label_map) pairs.push_back({a, b});
    list.push_back({{"id", id},
                    {"domain", bank->file.domain},
                    {"dimensions", bank->file.dimensions},
                    {"num_levels", bank->file.num_levels},
                    {"items", bank->items->size()},
                    {"label_map", pairs},
                    {"templates", bank->templates.size()}});
  }
  return {200, {{"banks", list}}, std::nullopt};
}

ApiResponse Service::health() const {
  return {200,
          {{"status", "ok"},
           {"api", "v1"},
           {"version", TESTAGENT_VERSION},
           {"compiler", __VERSION__},
           {"gateway", config_.stub ? "stub" : "http"},
           {"sessions", session_count()},
           {"quarantined", quarantined_.size()}},
          std::nullopt};
}

void Service::mount(httplib::Server& server) {
  const auto send = [](httplib::Response& res, const ApiResponse& r) {
    res.status = r.status;
    if (r.retry_after) res.set_header("Retry-After", std::to_string(*r.retry_after));
    res.set_content(r.body.dump(), "application/json");
  };
  const auto guarded = [send](auto fn) {
    return [send, fn](const httplib::Request& req, httplib::Response& res) {
      try {
        send(res, fn(req));
      } catch (const std::exception& e) {
        spdlog::error("{} {} failed: {}", req.method, req.path, e.what());
        send(res, error(500, "internal", e.what()));
      }
    };
  };
  server.Post("/v1/sessions", guarded([this](const httplib::Request& req) { return create_session(req.body); }));
  server.Post(R"(/v1/sessions/([^/]+)/answer)",
              guarded([this](const httplib::Request& req) { return answer(req.matches[1], req.body); }));
  server.Get(R"(/v1/sessions/([^/]+)/report)",
             guarded([this](const httplib::Request& req) { return report(req.matches[1]); }));
  server.Get(R"(/v1/sessions/([^/]+))",
             guarded([this](const httplib::Request& req) { return get_session(req.matches[1]); }));
  server.Get("/v1/banks", guarded([this](const httplib::Request&) { return banks(); }));
  server.Get("/v1/health", guarded([this](const httplib::Request&) { return health(); }));
  server.set_error_handler([send](const httplib::Request& req, httplib::Response& res) {
    if (res.status == 404 && res.body.empty()) send(res, error(404, "not_found", "no route for " + req.path));
  });
  server.set_logger([](const httplib::Request& req, const httplib::Response& res) {
    spdlog::debug("{} {} -> {}", req.method, req.path, res.status);
  });
}

namespace {

class JsonPayload final : public spdlog::custom_flag_formatter {
 public:
  void format(const spdlog::details::log_msg& msg, const std::tm&, spdlog::memory_buf_t& dest) override {
    const std::string text = json(std::string(msg.payload.data(), msg.payload.size())).dump();
    dest.append(text.data(), text.data() + text.size());
  }
  std::unique_ptr<custom_flag_formatter> clone() const override { return std::make_unique<JsonPayload>(); }
};

}  // namespace

void use_json_logging() {
  auto formatter = std::make_unique<spdlog::pattern_formatter>();
  formatter->add_flag<JsonPayload>('*').set_pattern(R"({"time":"%Y-%m-%dT%H:%M:%S.%e","level":"%l","msg":%*})");
  spdlog::set_formatter(std::move(formatter));
}

}  // namespace testagent
