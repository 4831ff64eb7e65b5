#include <chrono>
#include <filesystem>
#include <fstream>
#include <future>
#include <regex>
#include <thread>

#include <httplib.h>

#include "catch_amalgamated.hpp"
#include "testagent/recording_gateway.hpp"
#include "testagent/service.hpp"

using namespace testagent;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "testagent_tests" / name;
  fs::remove_all(dir);
  return dir;
}

ServiceConfig stub_config(const std::string& name) {
  ServiceConfig c;
  c.data_dir = fresh_dir(name);
  c.banks.push_back({"mbti", {}, "mbti", fs::path(TESTAGENT_SOURCE_DIR) / "data/templates/mbti"});
  c.banks.push_back({"standard", {}, "standard", {}});
  c.stub = Scenario::from_json(json::parse(R"({
    "version": 1,
    "rules": [
      {"op": "extract_label", "pattern": "boom", "output": {"error": "transport"}},
      {"op": "judge_afm", "pattern": "no idea", "output": {"aligned": false}}
    ]})"));
  c.classifier_respondents = 200;
  return c;
}

std::string create_body(const std::string& bank, int steps, int seed = 42) {
  return json{{"bank_id", bank}, {"strategy", "fsi"}, {"max_steps", steps}, {"seed", seed}}.dump();
}

std::string answer_body(const std::string& text, const std::string& nonce = "") {
  json j = {{"text", text}};
  if (!nonce.empty()) j["nonce"] = nonce;
  return j.dump();
}

class Running {
 public:
  explicit Running(Service& service) {
    service.mount(server_);
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~Running() {
    server_.stop();
    thread_.join();
  }
  httplib::Client client() const { return httplib::Client("127.0.0.1", port_); }

 private:
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
};

// Answers "<digit>" immediately; answers containing "slow" wait for release().
class BlockingGateway final : public Gateway {
 public:
  void release() { gate_.set_value(); }
  std::future<void>& entered() { return entered_future_; }

 protected:
  std::string do_transform_question(const std::string& t) override { return "Q: " + t; }
  LabelExtraction do_extract_label(const std::string&, const std::string& r, int) override {
    if (r.find("slow") != std::string::npos) {
      entered_.set_value();
      released_.wait();
    }
    std::smatch m;
    std::regex_search(r, m, std::regex("[0-9]"));
    return {std::stoi(m.str()), ""};
  }
  JudgeVerdict do_judge_afm(const std::string&, const std::string&, int) override { return {}; }
  std::string do_similar_question(const std::string& q) override { return "Again: " + q; }
  std::string do_probe_anomaly(const std::string& q, const std::string&, AnomalyKind) override { return "Why? " + q; }
  bool do_confirm_contradiction(const ContextTurn&, const ContextTurn&) override { return false; }
  bool do_justification_sufficient(const std::string&, const std::string&, int, int) override { return true; }
  RoleplayResult do_simulate_respondent(const std::string&, std::span<const Item>, int) override { return {}; }
  std::string do_enrich_report(const std::string&, const std::string&) override { return "advice"; }

 private:
  std::promise<void> gate_;
  std::shared_future<void> released_ = gate_.get_future().share();
  std::promise<void> entered_;
  std::future<void> entered_future_ = entered_.get_future();
};

}  // namespace

TEST_CASE("stub-backed session over HTTP completes in T steps and serves a report", "[service]") {
  Service service(stub_config("http_full"));
  Running running(service);
  auto cli = running.client();

  auto health = cli.Get("/v1/health");
  REQUIRE(health);
  CHECK(health->status == 200);
  CHECK(json::parse(health->body)["gateway"] == "stub");

  auto banks = cli.Get("/v1/banks");
  REQUIRE(banks);
  const json bank_list = json::parse(banks->body)["banks"];
  REQUIRE(bank_list.size() == 2);
  CHECK(bank_list[0]["id"] == "mbti");
  CHECK(bank_list[0]["items"] == 60);
  CHECK(bank_list[0]["templates"] == 16);

  const int T = 5;
  auto created = cli.Post("/v1/sessions", create_body("mbti", T), "application/json");
  REQUIRE(created);
  REQUIRE(created->status == 201);
  const json first = json::parse(created->body);
  const std::string id = first["session_id"];
  CHECK(first["kind"] == "next_question");
  CHECK(first["step"] == 0);
  CHECK(first["progress"]["fraction"] == 0.0);
  CHECK(first["question"].get<std::string>().rfind("Q: ", 0) == 0);
  CHECK_FALSE(first.contains("theta"));

  auto early = cli.Get("/v1/sessions/" + id + "/report");
  REQUIRE(early);
  CHECK(early->status == 404);

  json last = json::object();
  int posts = 0;
  for (int k = 0; k < 20 && last.value("kind", "") != "completed"; ++k) {
    auto r = cli.Post("/v1/sessions/" + id + "/answer", answer_body("3, it depends", "n" + std::to_string(k)),
                      "application/json");
    REQUIRE(r);
    REQUIRE(r->status == 200);
    last = json::parse(r->body);
    ++posts;
    CHECK(last["step"] == k + 1);
  }
  CHECK(posts == T);
  CHECK(last["kind"] == "completed");
  CHECK(last["progress"]["fraction"] == 1.0);

  auto rep = cli.Get("/v1/sessions/" + id + "/report");
  REQUIRE(rep);
  REQUIRE(rep->status == 200);
  const json report = json::parse(rep->body);
  CHECK(report["session_id"] == id);
  CHECK(report["steps"] == T);
  REQUIRE(report["type"].is_string());
  CHECK(report["type"].get<std::string>().size() == 4);
  CHECK(report["template"] == true);
  CHECK(report["sections"][0]["id"] == "type_overview");

  auto state = cli.Get("/v1/sessions/" + id);
  REQUIRE(state);
  const json s = json::parse(state->body);
  CHECK(s["status"] == "completed");
  CHECK(s["turns"].size() == T + 1);
  CHECK(s["turns"][1]["answer"] == "3, it depends");

  // Answering a completed session conflicts.
  auto late = cli.Post("/v1/sessions/" + id + "/answer", answer_body("4", "late"), "application/json");
  REQUIRE(late);
  CHECK(late->status == 409);
  CHECK(json::parse(late->body)["error"]["code"] == "session_completed");

  // A replayed nonce still returns its original event after completion.
  auto again = cli.Post("/v1/sessions/" + id + "/answer", answer_body("ignored", "n0"), "application/json");
  REQUIRE(again);
  CHECK(again->status == 200);
  CHECK(json::parse(again->body)["step"] == 1);
}

TEST_CASE("duplicate nonce returns the original event", "[service]") {
  Service service(stub_config("idempotent"));
  const std::string id = service.create_session(create_body("mbti", 5)).body["session_id"];
  const ApiResponse a = service.answer(id, answer_body("3", "turn-1"));
  REQUIRE(a.status == 200);
  const ApiResponse b = service.answer(id, answer_body("5 because", "turn-1"));
  CHECK(b.status == 200);
  CHECK(b.body == a.body);
  CHECK(service.get_session(id).body["step"] == 1);
  const auto log = SessionStore(service.config().data_dir).read_log(id);
  CHECK(log.size() == 2);

  // Without a nonce every submission counts.
  CHECK(service.answer(id, answer_body("3")).body["step"] == 2);
  CHECK(service.answer(id, answer_body("3")).body["step"] == 3);
}

TEST_CASE("request validation", "[service]") {
  Service service(stub_config("validation"));
  CHECK(service.create_session("not json").status == 400);
  CHECK(service.create_session("[]").status == 400);
  CHECK(service.create_session(R"({"strategy": "fsi"})").status == 400);
  CHECK(service.create_session(R"({"bank_id": "mbti", "strategy": "best"})").status == 400);
  CHECK(service.create_session(R"({"bank_id": "mbti", "max_steps": 0})").status == 400);
  CHECK(service.create_session(R"({"bank_id": "mbti", "max_steps": "five"})").status == 400);
  CHECK(service.create_session(R"({"bank_id": "mbti", "seed": -1})").status == 400);
  CHECK(service.create_session(R"({"bank_id": "nope"})").status == 404);
  const ApiResponse ok = service.create_session(R"({"bank_id": "standard"})");
  REQUIRE(ok.status == 201);
  const std::string id = ok.body["session_id"];
  CHECK(service.answer(id, "{").status == 400);
  CHECK(service.answer(id, R"({"text": 3})").status == 400);
  CHECK(service.answer(id, R"({"text": "   "})").status == 400);
  CHECK(service.answer(id, R"({"text": "1", "nonce": 5})").status == 400);
  CHECK(service.answer("missing", answer_body("1")).status == 404);
  CHECK(service.report("missing").status == 404);
  CHECK(service.get_session("missing").status == 404);
  CHECK(service.get_session(id).body["step"] == 0);
}

TEST_CASE("gateway failure is a retryable 502", "[service]") {
  Service service(stub_config("bad_gateway"));
  Running running(service);
  auto cli = running.client();
  const std::string id = json::parse(cli.Post("/v1/sessions", create_body("mbti", 3), "application/json")->body)["session_id"];
  const json before = service.get_session(id).body;

  auto failed = cli.Post("/v1/sessions/" + id + "/answer", answer_body("boom 3", "x1"), "application/json");
  REQUIRE(failed);
  CHECK(failed->status == 502);
  CHECK(failed->get_header_value("Retry-After") == "1");
  CHECK(service.get_session(id).body == before);

  // The same nonce is free to retry because nothing was recorded for it.
  auto retried = cli.Post("/v1/sessions/" + id + "/answer", answer_body("3", "x1"), "application/json");
  REQUIRE(retried);
  CHECK(retried->status == 200);
  CHECK(json::parse(retried->body)["step"] == 1);

  auto unknown = cli.Get("/v1/nowhere");
  REQUIRE(unknown);
  CHECK(unknown->status == 404);
  CHECK(json::parse(unknown->body)["error"]["code"] == "not_found");
}

TEST_CASE("interleaved sessions have independent transcripts", "[service]") {
  const auto drive = [](Service& service, const std::string& id, const std::vector<std::string>& answers) {
    std::vector<json> events;
    for (const auto& a : answers) events.push_back(service.answer(id, answer_body(a)).body);
    return events;
  };
  const std::vector<std::string> a_answers{"3", "no idea", "4", "2", "3"};
  const std::vector<std::string> b_answers{"5", "1", "3", "3", "4"};

  Service alone(stub_config("isolated"));
  const std::string a0 = alone.create_session(create_body("mbti", 5, 1)).body["session_id"];
  const auto a_ref = drive(alone, a0, a_answers);
  const std::string b0 = alone.create_session(create_body("mbti", 5, 2)).body["session_id"];
  const auto b_ref = drive(alone, b0, b_answers);

  Service mixed(stub_config("interleaved"));
  const std::string a = mixed.create_session(create_body("mbti", 5, 1)).body["session_id"];
  const std::string b = mixed.create_session(create_body("mbti", 5, 2)).body["session_id"];
  std::vector<json> a_events, b_events;
  for (std::size_t k = 0; k < a_answers.size(); ++k) {
    b_events.push_back(mixed.answer(b, answer_body(b_answers[k])).body);
    a_events.push_back(mixed.answer(a, answer_body(a_answers[k])).body);
  }
  CHECK(a_events == a_ref);
  CHECK(b_events == b_ref);
  CHECK(a_events[1]["kind"] == "followup");
}

TEST_CASE("restart restores sessions from the event log", "[service]") {
  ServiceConfig config = stub_config("restart");
  std::string id;
  json state;
  {
    Service first(config);
    id = first.create_session(create_body("mbti", 6)).body["session_id"];
    for (const char* a : {"3", "no idea", "4", "boom 2", "2"}) first.answer(id, answer_body(a, std::string("k") + a));
    state = first.get_session(id).body;
  }
  config.replay_check_sample = 0;
  Service second(config);
  CHECK(second.quarantined().empty());
  REQUIRE(second.session_count() == 1);
  CHECK(second.get_session(id).body == state);
  // Idempotency survives the restart.
  CHECK(second.answer(id, answer_body("x", "k3")).body == state["turns"][1]["event"]);

  // The stub resumes in step: continuing matches an uninterrupted run.
  ServiceConfig straight_config = stub_config("restart_reference");
  Service straight(straight_config);
  const std::string ref = straight.create_session(create_body("mbti", 6)).body["session_id"];
  for (const char* a : {"3", "no idea", "4", "boom 2", "2"}) straight.answer(ref, answer_body(a));
  for (const char* a : {"5 because", "3"}) {
    CHECK(second.answer(id, answer_body(a)).body == straight.answer(ref, answer_body(a)).body);
  }
}

TEST_CASE("live-mode logs replay through recorded gateway outputs", "[service]") {
  ServiceConfig config = stub_config("playback");
  config.stub.reset();
  config.replay_check_sample = 0;
  auto scripted = std::make_shared<ScriptedGateway>(Scenario::from_json(json::parse(R"({
    "version": 1,
    "rules": [{"op": "judge_afm", "pattern": "no idea", "output": {"aligned": false}}]})")));
  std::string id;
  json state;
  {
    Service first(config, scripted);
    id = first.create_session(create_body("mbti", 4)).body["session_id"];
    for (const char* a : {"3", "no idea", "6", "0", "2", "3", "4"}) first.answer(id, answer_body(a));
    state = first.get_session(id).body;
  }
  SessionStore store(config.data_dir);
  const auto records = store.read_log(id);
  const json snapshot = *store.read_snapshot(id);

  // Playback rebuilds the snapshot exactly, with no live gateway at all.
  const auto bank = std::make_shared<const ItemBank>(synthetic_bank("mbti").bank());
  const ReplayedSession replayed = replay_log(records, bank);
  CHECK(snapshot_json(replayed.bank_id, replayed.session, replayed.nonces, replayed.seq) == snapshot);

  {
    Service second(config, std::make_shared<BlockingGateway>());
    CHECK(second.quarantined().empty());
    CHECK(second.get_session(id).body == state);
  }

  // A tampered log fails the startup check.
  {
    std::ofstream out(config.data_dir / (id + ".jsonl"), std::ios::trunc);
    auto bad = records;
    bad[1]["event"]["step"] = 7;
    for (const auto& r : bad) out << r.dump() << '\n';
  }
  Service third(config, scripted);
  CHECK(third.quarantined() == std::vector<std::string>{id});
  CHECK(third.get_session(id).status == 404);
}

TEST_CASE("a slow gateway call does not block other sessions", "[service]") {
  ServiceConfig config = stub_config("blocking");
  config.stub.reset();
  auto gateway = std::make_shared<BlockingGateway>();
  Service service(config, gateway);
  const std::string a = service.create_session(create_body("standard", 3)).body["session_id"];
  const std::string b = service.create_session(create_body("standard", 3)).body["session_id"];

  auto pending = std::async(std::launch::async, [&] { return service.answer(a, answer_body("slow 1")); });
  REQUIRE(gateway->entered().wait_for(std::chrono::seconds(10)) == std::future_status::ready);
  // Session a is mid-call; b proceeds and a's state is still readable elsewhere.
  CHECK(service.answer(b, answer_body("1")).body["step"] == 1);
  CHECK(service.banks().status == 200);
  gateway->release();
  CHECK(pending.get().body["step"] == 1);
}

TEST_CASE("service config parsing", "[service]") {
  const json doc = json::parse(R"({
    "port": 9000, "data_dir": "sessions",
    "banks": [{"id": "m", "synthetic": "mbti", "templates": "templates/mbti"},
              {"id": "f", "path": "/abs/bank.json"}],
    "gateway": {"model": "local-model", "endpoint": "http://localhost:1234/v1/chat/completions"},
    "defaults": {"afm_max_retries": 2},
    "enrich_reports": true})");
  const ServiceConfig c = ServiceConfig::from_json(doc, "/etc/testagent");
  CHECK(c.port == 9000);
  CHECK(c.data_dir == fs::path("/etc/testagent/sessions"));
  CHECK(c.banks[0].templates == fs::path("/etc/testagent/templates/mbti"));
  CHECK(c.banks[1].path == fs::path("/abs/bank.json"));
  CHECK(c.gateway.model == "local-model");
  CHECK(c.defaults.afm_max_retries == 2);
  CHECK(c.enrich_reports);
  CHECK_FALSE(c.stub.has_value());
  CHECK_THROWS_AS(ServiceConfig::from_json(json::parse(R"({"banks": [{"id": "x"}]})")), std::invalid_argument);
  CHECK_THROWS_AS(ServiceConfig::from_json(json::parse(R"({"port": 70000})")), std::invalid_argument);
  CHECK_THROWS_AS(
      ServiceConfig::from_json(json::parse(R"({"banks": [{"id": "x", "synthetic": "mbti"}, {"id": "x", "synthetic": "scl"}]})")),
      std::invalid_argument);
}
