#pragma once

// HTTP service for the session lifecycle (/v1) and its file-backed store.
//
// Every session owns an append-only JSONL event log (<id>.jsonl, one record
// per state transition, including the gateway outputs the transition used)
// and a snapshot of its latest state (<id>.snapshot.json). Replaying the log
// through a PlaybackGateway rebuilds the snapshot exactly; the service checks
// this on startup.

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "testagent/http_gateway.hpp"
#include "testagent/question_bank.hpp"
#include "testagent/report.hpp"
#include "testagent/scripted_gateway.hpp"
#include "testagent/session.hpp"

namespace httplib {
class Server;
}

namespace testagent {

class SessionStore {
 public:
  /// Creates `dir` if needed.
  explicit SessionStore(std::filesystem::path dir);

  const std::filesystem::path& dir() const { return dir_; }
  /// Appends one record as a line and flushes it.
  void append(const std::string& id, const nlohmann::json& record) const;
  /// Replaces the snapshot atomically (write then rename).
  void write_snapshot(const std::string& id, const nlohmann::json& snapshot) const;
  /// Ids with an event log, sorted.
  std::vector<std::string> session_ids() const;
  /// Throws std::runtime_error on an unreadable line.
  std::vector<nlohmann::json> read_log(const std::string& id) const;
  std::optional<nlohmann::json> read_snapshot(const std::string& id) const;

 private:
  std::filesystem::path dir_;
};

/// Session rebuilt from its event log.
struct ReplayedSession {
  std::string bank_id;
  Session session;
  std::map<std::string, nlohmann::json> nonces;  // nonce -> original event
  nlohmann::json turns = nlohmann::json::array();
  int seq = -1;
};

/// Re-runs every record. With `gateway` null each record is served from its
/// own recorded outputs; otherwise the records are re-executed against
/// `gateway`. Throws ReplayDivergence when any event differs from the log.
ReplayedSession replay_log(std::span<const nlohmann::json> records, std::shared_ptr<const ItemBank> bank,
                           Gateway* gateway = nullptr);

/// The snapshot document stored for a session.
nlohmann::json snapshot_json(const std::string& bank_id, const Session& session,
                             const std::map<std::string, nlohmann::json>& nonces, int seq);

struct BankSpec {
  std::string id;
  std::filesystem::path path;       // bank file; empty when `synthetic` is set
  std::string synthetic;            // built-in bank name
  std::filesystem::path templates;  // optional report templates
};

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::filesystem::path data_dir = "var/sessions";
  std::vector<BankSpec> banks;
  GatewayConfig gateway;
  std::optional<Scenario> stub;  // scripted gateway per session instead of HTTP
  SessionConfig defaults;        // bank_id, strategy, max_steps and seed come per request
  int max_steps_limit = 500;
  int replay_check_sample = 16;  // sessions re-verified on startup; 0 checks all
  bool enrich_reports = false;
  int classifier_respondents = 400;
  std::uint64_t classifier_seed = 42;

  /// Relative paths resolve against `base_dir`. Throws std::invalid_argument.
  static ServiceConfig from_json(const nlohmann::json& doc, const std::filesystem::path& base_dir = {});
  static ServiceConfig load(const std::filesystem::path& path);
};

struct ApiResponse {
  int status = 200;
  nlohmann::json body;
  std::optional<int> retry_after;  // seconds, for 502
};

class Service {
 public:
  /// Loads banks, trains classifiers and restores persisted sessions. When
  /// `gateway` is null and no stub is configured an HttpGateway is built
  /// from the config.
  explicit Service(ServiceConfig config, std::shared_ptr<Gateway> gateway = nullptr);
  ~Service();

  ApiResponse create_session(const std::string& body);
  ApiResponse answer(const std::string& id, const std::string& body);
  ApiResponse get_session(const std::string& id);
  ApiResponse report(const std::string& id);
  ApiResponse banks() const;
  ApiResponse health() const;

  /// Registers the /v1 routes.
  void mount(httplib::Server& server);

  const ServiceConfig& config() const { return config_; }
  std::size_t session_count() const;
  /// Sessions whose log failed the startup check; they are not served.
  const std::vector<std::string>& quarantined() const { return quarantined_; }

 private:
  struct Bank;
  struct Live;

  std::shared_ptr<Live> find(const std::string& id) const;
  Gateway& gateway_for(Live& live);
  void restore(const std::string& id, bool check);
  std::string new_id();

  ServiceConfig config_;
  SessionStore store_;
  std::shared_ptr<Gateway> shared_gateway_;
  std::map<std::string, std::shared_ptr<const Bank>> banks_;
  mutable std::mutex sessions_mutex_;
  std::map<std::string, std::shared_ptr<Live>> sessions_;
  std::vector<std::string> quarantined_;
  std::mt19937_64 id_rng_;
};

/// Line-delimited JSON log records for the default spdlog logger.
void use_json_logging();

}  // namespace testagent
