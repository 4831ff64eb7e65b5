#pragma once

// Gateway backed by an OpenAI-style chat-completions endpoint. Every reply
// must be a JSON object matching the duty's schema; invalid replies are
// re-prompted up to max_retries times and then surface as GatewayError.

#include <chrono>
#include <map>
#include <memory>
#include <mutex>
#include <semaphore>
#include <string>
#include <string_view>

#include "json.hpp"
#include "testagent/gateway.hpp"

namespace testagent {

struct GatewayConfig {
  std::string endpoint = "https://api.openai.com/v1/chat/completions";
  std::string token_env = "TESTAGENT_API_KEY";
  std::string model = "gpt-4o-mini";
  double timeout_seconds = 30.0;
  int max_retries = 2;
  double temperature = 0.0;             // judgments
  double simulation_temperature = 0.7;  // role-play only
  int max_in_flight = 4;
  int backoff_ms = 250;  // doubled per transport retry

  void validate() const;
  nlohmann::json to_json() const;
  static GatewayConfig from_json(const nlohmann::json& doc);
};

/// Prompt text by asset name (e.g. "judge_afm"); throws std::out_of_range.
std::string_view prompt_asset(std::string_view name);
/// Replaces every {{key}}; throws std::invalid_argument on an unknown placeholder.
std::string render_prompt(std::string_view tmpl, const std::map<std::string, std::string>& values);
/// Anchored descriptions of the labels 0..num_levels, one per line.
std::string rating_scale(int num_levels);

/// Parses a model reply as JSON, tolerating code fences, surrounding prose,
/// single-quoted strings, Python literals and trailing commas.
/// Throws std::invalid_argument when nothing parseable is found.
nlohmann::json parse_lenient_json(std::string_view text);

/// Masks `secret` and any bearer token in `text`.
std::string redact(std::string text, const std::string& secret);

class HttpGateway final : public Gateway {
 public:
  /// Reads the token from the configured environment variable (may be unset
  /// for local endpoints).
  explicit HttpGateway(GatewayConfig config);
  ~HttpGateway() override;

  const GatewayConfig& config() const { return config_; }
  /// Largest number of concurrent requests seen so far.
  int peak_in_flight() const;

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
  struct Endpoint;

  /// One chat exchange with transport retries; returns the message content.
  std::string chat(const nlohmann::json& messages, double temperature);
  /// Sends `user`, validates with `check` (which throws std::invalid_argument
  /// on a bad reply) and re-prompts with the error until it passes.
  template <class Check>
  auto ask(const std::string& op, const std::string& user, double temperature, Check check)
      -> decltype(check(nlohmann::json{}));

  GatewayConfig config_;
  std::string token_;
  std::unique_ptr<Endpoint> endpoint_;
  std::counting_semaphore<1024> in_flight_;
  mutable std::mutex stats_mutex_;
  int active_ = 0;
  int peak_ = 0;
};

}  // namespace testagent
