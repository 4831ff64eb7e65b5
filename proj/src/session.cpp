#include "testagent/session.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <spdlog/spdlog.h>

namespace testagent {

using nlohmann::json;

namespace {

bool blank(const std::string& s) {
  return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c); });
}

// Gateway failures other than transport mean "the reply was unusable"; the
// session treats them as a failed check. Transport failures propagate.
template <class F>
auto soft_call(F&& f) -> std::optional<decltype(f())> {
  try {
    return f();
  } catch (const GatewayError& e) {
    if (e.kind() == GatewayError::Kind::transport) throw;
    spdlog::debug("gateway reply rejected: {}", e.what());
    return std::nullopt;
  }
}

// Detectors fail open: any gateway failure counts as "no anomaly".
template <class F>
auto fail_open(F&& f) -> std::optional<decltype(f())> {
  try {
    return f();
  } catch (const GatewayError& e) {
    spdlog::warn("anomaly check skipped after gateway failure: {}", e.what());
    return std::nullopt;
  }
}

json record_to_json(const ResponseRecord& r) {
  json j = {{"item", r.item_id}, {"label", r.label}};
  if (r.raw_text) j["text"] = *r.raw_text;
  if (!r.flags.empty()) j["flags"] = r.flags.names();
  return j;
}

ResponseRecord record_from_json(const json& j) {
  ResponseRecord r;
  r.item_id = j.at("item").get<std::string>();
  r.label = j.at("label").get<int>();
  if (j.contains("text")) r.raw_text = j["text"].get<std::string>();
  if (j.contains("flags")) r.flags = RecordFlags::from_names(j["flags"].get<std::vector<std::string>>());
  return r;
}

json theta_to_json(const AbilityEstimate& t) {
  return {{"values", t.values}, {"step", t.step}, {"converged", t.converged}, {"objective", t.objective}};
}

AbilityEstimate theta_from_json(const json& j) {
  AbilityEstimate t;
  t.values = j.at("values").get<std::vector<double>>();
  t.step = j.at("step").get<int>();
  t.converged = j.at("converged").get<bool>();
  t.objective = j.at("objective").get<double>();
  return t;
}

QuestionOrigin parse_origin(const std::string& s) {
  if (s == "fresh") return QuestionOrigin::fresh;
  if (s == "afm_similar") return QuestionOrigin::afm_similar;
  if (s == "anomaly_probe") return QuestionOrigin::anomaly_probe;
  throw std::invalid_argument("unknown question origin '" + s + "'");
}

SessionStatus parse_status(const std::string& s) {
  if (s == "awaiting_answer") return SessionStatus::awaiting_answer;
  if (s == "awaiting_followup") return SessionStatus::awaiting_followup;
  if (s == "completed") return SessionStatus::completed;
  throw std::invalid_argument("unknown session status '" + s + "'");
}

EventKind parse_event_kind(const std::string& s) {
  if (s == "next_question") return EventKind::next_question;
  if (s == "followup") return EventKind::followup_question;
  if (s == "completed") return EventKind::completed;
  throw std::invalid_argument("unknown event kind '" + s + "'");
}

json pending_to_json(const PendingQuestion& p) {
  json j = {{"item_id", p.item_id},
            {"text", p.text},
            {"retry_count", p.retry_count},
            {"origin", to_string(p.origin)},
            {"afm_failures", p.afm_failures},
            {"first_response", p.first_response},
            {"answered_question", p.answered_question}};
  j["probe_kind"] = p.probe_kind ? json(to_string(*p.probe_kind)) : json(nullptr);
  j["provisional_label"] = p.provisional_label ? json(*p.provisional_label) : json(nullptr);
  return j;
}

PendingQuestion pending_from_json(const json& j) {
  PendingQuestion p;
  p.item_id = j.at("item_id").get<std::string>();
  p.text = j.at("text").get<std::string>();
  p.retry_count = j.at("retry_count").get<int>();
  p.origin = parse_origin(j.at("origin").get<std::string>());
  p.afm_failures = j.at("afm_failures").get<int>();
  p.first_response = j.at("first_response").get<std::string>();
  p.answered_question = j.at("answered_question").get<std::string>();
  if (!j.at("probe_kind").is_null()) p.probe_kind = parse_anomaly_kind(j["probe_kind"].get<std::string>());
  if (!j.at("provisional_label").is_null()) p.provisional_label = j["provisional_label"].get<int>();
  return p;
}

json event_state_to_json(const SessionEvent& e) {
  json j = e.to_json();
  j["theta_norm"] = e.theta_norm;  // full precision for snapshots
  return j;
}

SessionEvent event_from_json(const json& j) {
  SessionEvent e;
  e.kind = parse_event_kind(j.at("kind").get<std::string>());
  if (j.contains("question")) e.question = j["question"].get<std::string>();
  if (j.contains("item_id")) e.item_id = j["item_id"].get<std::string>();
  e.step = j.at("step").get<int>();
  e.max_steps = j.at("max_steps").get<int>();
  e.theta_norm = j.at("theta_norm").get<double>();
  e.flags = RecordFlags::from_names(j.at("flags").get<std::vector<std::string>>());
  if (j.contains("origin")) e.origin = j["origin"].get<std::string>();
  return e;
}

double norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace

std::string_view to_string(SessionStatus status) {
  switch (status) {
    case SessionStatus::awaiting_answer: return "awaiting_answer";
    case SessionStatus::awaiting_followup: return "awaiting_followup";
    case SessionStatus::completed: return "completed";
  }
  return "?";
}

std::string_view to_string(QuestionOrigin origin) {
  switch (origin) {
    case QuestionOrigin::fresh: return "fresh";
    case QuestionOrigin::afm_similar: return "afm_similar";
    case QuestionOrigin::anomaly_probe: return "anomaly_probe";
  }
  return "?";
}

std::string_view to_string(EventKind kind) {
  switch (kind) {
    case EventKind::next_question: return "next_question";
    case EventKind::followup_question: return "followup";
    case EventKind::completed: return "completed";
  }
  return "?";
}

void SessionConfig::validate() const {
  if (max_steps < 1) throw std::invalid_argument("max_steps must be >= 1");
  if (afm_max_retries < 1) throw std::invalid_argument("afm_max_retries must be >= 1");
  if (!(guessing_tau > 0.0 && guessing_tau < 0.5)) throw std::invalid_argument("guessing_tau must be in (0, 0.5)");
  if (num_levels < 0) throw std::invalid_argument("num_levels must be >= 0");
  if (dimensions < 0) throw std::invalid_argument("dimensions must be >= 0");
  if (contradiction_gap && *contradiction_gap < 1) throw std::invalid_argument("contradiction_gap must be >= 1");
  estimation.validate();
  selection.kli.validate();
  if (selection.maat.warm_start_iters < 1) throw std::invalid_argument("maat warm_start_iters must be >= 1");
}

json SessionConfig::to_json() const {
  json j = {{"max_steps", max_steps},
            {"num_levels", num_levels},
            {"dimensions", dimensions},
            {"strategy", testagent::to_string(strategy)},
            {"afm_max_retries", afm_max_retries},
            {"guessing_tau", guessing_tau},
            {"rng_seed", rng_seed}};
  j["contradiction_gap"] = contradiction_gap ? json(*contradiction_gap) : json(nullptr);
  j["estimation"] = {{"prior_variance", estimation.prior_variance}, {"max_iters", estimation.max_iters},
                     {"grad_tol", estimation.grad_tol},             {"grid_lo", estimation.grid_lo},
                     {"grid_hi", estimation.grid_hi},               {"grid_points", estimation.grid_points},
                     {"grid_fallback", estimation.grid_fallback}};
  j["selection"] = {{"kli_delta_scale", selection.kli.delta_scale},
                    {"kli_quadrature_points", selection.kli.quadrature_points},
                    {"maat_warm_start_iters", selection.maat.warm_start_iters}};
  return j;
}

SessionConfig SessionConfig::from_json(const json& j) {
  if (!j.is_object()) throw std::invalid_argument("session config must be an object");
  SessionConfig c;
  try {
    c.max_steps = j.value("max_steps", c.max_steps);
    c.num_levels = j.value("num_levels", c.num_levels);
    c.dimensions = j.value("dimensions", c.dimensions);
    if (j.contains("strategy")) c.strategy = parse_strategy(j["strategy"].get<std::string>());
    c.afm_max_retries = j.value("afm_max_retries", c.afm_max_retries);
    c.guessing_tau = j.value("guessing_tau", c.guessing_tau);
    c.rng_seed = j.value("rng_seed", c.rng_seed);
    if (j.contains("contradiction_gap") && !j["contradiction_gap"].is_null()) {
      c.contradiction_gap = j["contradiction_gap"].get<int>();
    }
    if (j.contains("estimation")) {
      const json& e = j["estimation"];
      auto& est = c.estimation;
      est.prior_variance = e.value("prior_variance", est.prior_variance);
      est.max_iters = e.value("max_iters", est.max_iters);
      est.grad_tol = e.value("grad_tol", est.grad_tol);
      est.grid_lo = e.value("grid_lo", est.grid_lo);
      est.grid_hi = e.value("grid_hi", est.grid_hi);
      est.grid_points = e.value("grid_points", est.grid_points);
      est.grid_fallback = e.value("grid_fallback", est.grid_fallback);
    }
    if (j.contains("selection")) {
      const json& s = j["selection"];
      c.selection.kli.delta_scale = s.value("kli_delta_scale", c.selection.kli.delta_scale);
      c.selection.kli.quadrature_points = s.value("kli_quadrature_points", c.selection.kli.quadrature_points);
      c.selection.maat.warm_start_iters = s.value("maat_warm_start_iters", c.selection.maat.warm_start_iters);
    }
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("bad session config: ") + e.what());
  }
  c.validate();
  return c;
}

json SessionEvent::to_json() const {
  json j = {{"kind", testagent::to_string(kind)},
            {"step", step},
            {"max_steps", max_steps},
            {"progress", {{"fraction", progress()}, {"theta_norm", std::round(theta_norm * 1e4) / 1e4}}},
            {"flags", flags.names()}};
  if (question) j["question"] = *question;
  if (item_id) j["item_id"] = *item_id;
  if (origin) j["origin"] = *origin;
  return j;
}

json CompletedSession::to_json() const {
  json history_json = json::array();
  for (const auto& r : history) history_json.push_back(record_to_json(r));
  json log = json::array();
  for (const auto& e : anomaly_log) log.push_back({{"step", e.step}, {"kind", e.kind}, {"action", e.action}});
  return {{"id", id},         {"config", config.to_json()}, {"theta", theta_to_json(theta)},
          {"steps", steps},   {"history", history_json},    {"anomaly_log", log}};
}

bool detect_guessing(std::span<const double> theta, const Item& item, int label, double tau) {
  const auto p = category_probs(theta[static_cast<std::size_t>(item.dimension)], item);
  return p.at(static_cast<std::size_t>(label)) < tau;
}

Session Session::start(std::string id, const SessionConfig& config, std::shared_ptr<const ItemBank> bank,
                       Gateway& gateway) {
  config.validate();
  if (!bank || bank->size() == 0) throw std::invalid_argument("session needs a non-empty bank");
  Session s;
  s.id_ = std::move(id);
  s.config_ = config;
  if (s.config_.dimensions == 0) s.config_.dimensions = bank->dimensions();
  if (s.config_.num_levels == 0) s.config_.num_levels = bank->max_levels();
  if (s.config_.dimensions != bank->dimensions()) {
    throw std::invalid_argument("config dimensions do not match the bank");
  }
  if (s.config_.num_levels != bank->max_levels()) {
    throw std::invalid_argument("config num_levels does not match the bank");
  }
  s.bank_ = std::move(bank);
  s.theta_ = AbilityEstimate::zero(s.config_.dimensions);
  s.ask_fresh(gateway);
  s.last_event_ = SessionEvent{EventKind::next_question, s.pending_->text, s.pending_->item_id, 0,
                               s.config_.max_steps, 0.0, {}, std::nullopt};
  return s;
}

int Session::item_levels(const Item& item) const { return item.num_levels; }

int Session::contradiction_gap(const Item& item) const {
  return config_.contradiction_gap.value_or(std::max(item_levels(item) - 1, 1));
}

void Session::ask_fresh(Gateway& gateway) {
  SelectionContext ctx;
  ctx.theta = theta_;
  ctx.asked.insert(fresh_items_.begin(), fresh_items_.end());
  ctx.step = step() + 1;
  ctx.records = history_;
  ctx.rng_seed = config_.rng_seed;
  SelectionConfig sel = config_.selection;
  sel.maat.estimation = config_.estimation;
  const std::string item_id = select_item(config_.strategy, *bank_, ctx, sel);
  const std::string text = gateway.transform_question(bank_->at(item_id).text);
  PendingQuestion p;
  p.item_id = item_id;
  p.text = text;
  pending_ = p;
  fresh_items_.push_back(item_id);
  shown_ = {text};
  status_ = SessionStatus::awaiting_answer;
}

std::string Session::rephrase(const std::optional<std::string>& suggested, Gateway& gateway) const {
  const auto seen = [this](const std::string& t) { return std::find(shown_.begin(), shown_.end(), t) != shown_.end(); };
  std::string text = suggested ? *suggested : gateway.similar_question(pending_->text);
  // A repeat of something already shown is regenerated once.
  if (seen(text)) text = gateway.similar_question(pending_->text);
  return text;
}

SessionEvent Session::followup(std::string text, QuestionOrigin origin) {
  pending_->text = text;
  pending_->origin = origin;
  ++pending_->retry_count;
  shown_.push_back(std::move(text));
  status_ = SessionStatus::awaiting_followup;
  return SessionEvent{EventKind::followup_question, pending_->text, pending_->item_id,  step(),
                      config_.max_steps,            norm(theta_.values), {}, std::string(to_string(origin))};
}

std::optional<std::size_t> Session::contradicting_record(const Item& item, int label) const {
  const int gap = contradiction_gap(item);
  // Most recent conflicting answer on the same dimension.
  for (std::size_t k = history_.size(); k-- > 0;) {
    const auto& r = history_[k];
    if (bank_->at(r.item_id).dimension != item.dimension) continue;
    if (std::abs(r.label - label) >= gap) return k;
  }
  return std::nullopt;
}

SessionEvent Session::answer_question(const std::string& raw_text, Gateway& gateway) {
  const Item& item = bank_->at(pending_->item_id);
  const int m = item_levels(item);
  const int t = step() + 1;

  std::optional<int> label;
  std::optional<std::string> suggested;
  bool accepted = false;
  if (!blank(raw_text)) {
    if (auto ex = soft_call([&] { return gateway.extract_label(pending_->text, raw_text, m); })) label = ex->label;
    if (label) {
      if (auto v = soft_call([&] { return gateway.judge_afm(pending_->text, raw_text, m); })) {
        accepted = v->checks_pass();
        suggested = v->similar_question;
      }
    }
  }

  if (!accepted) {
    if (++pending_->afm_failures >= config_.afm_max_retries) {
      const int midpoint = m / 2;
      anomaly_log_.push_back({t, "afm_fallback",
                              "assigned midpoint label " + std::to_string(midpoint) + " after " +
                                  std::to_string(pending_->afm_failures) + " unusable answers"});
      RecordFlags flags;
      flags.set(RecordFlag::afm_fallback);
      pending_->answered_question = pending_->text;
      return accept(midpoint, flags, raw_text, gateway);
    }
    return followup(rephrase(suggested, gateway), QuestionOrigin::afm_similar);
  }

  const int y = *label;
  pending_->answered_question = pending_->text;
  const auto probe = [&](AnomalyKind kind, std::string action) {
    anomaly_log_.push_back({t, std::string(to_string(kind)), std::move(action)});
    pending_->probe_kind = kind;
    pending_->provisional_label = y;
    pending_->first_response = raw_text;
    std::string text = gateway.probe_anomaly(pending_->text, raw_text, kind);
    if (std::find(shown_.begin(), shown_.end(), text) != shown_.end()) text = gateway.similar_question(pending_->text);
    return followup(std::move(text), QuestionOrigin::anomaly_probe);
  };

  if (detect_guessing(theta_.values, item, y, config_.guessing_tau)) {
    return probe(AnomalyKind::guessing, "label " + std::to_string(y) + " is unlikely at the current estimate; asked a verification question");
  }
  if (const auto k = contradicting_record(item, y)) {
    const ResponseRecord& earlier = history_[*k];
    const ContextTurn before{history_questions_[*k], earlier.raw_text.value_or(""), earlier.label};
    const ContextTurn now{pending_->text, raw_text, y};
    const auto confirmed = fail_open([&] { return gateway.confirm_contradiction(before, now); });
    if (confirmed.value_or(false)) {
      return probe(AnomalyKind::misleading, "label " + std::to_string(y) + " contradicts label " +
                                                std::to_string(earlier.label) + " on " + earlier.item_id +
                                                "; asked a decomposed question");
    }
  }
  if (y == 0 || y == m) {
    const auto sufficient =
        fail_open([&] { return gateway.justification_sufficient(pending_->text, raw_text, y, m); });
    if (!sufficient.value_or(true)) {
      return probe(AnomalyKind::overconfidence,
                   "extreme label " + std::to_string(y) + " given without reasons; asked for justification");
    }
  }
  return accept(y, {}, raw_text, gateway);
}

SessionEvent Session::answer_probe(const std::string& raw_text, Gateway& gateway) {
  const Item& item = bank_->at(pending_->item_id);
  const int m = item_levels(item);
  const AnomalyKind kind = *pending_->probe_kind;
  int label = *pending_->provisional_label;

  // Overconfidence re-reads the original answer together with the elaboration.
  const std::string combined = pending_->first_response + "\n" + raw_text;
  const std::string& source = kind == AnomalyKind::overconfidence ? combined : raw_text;
  const std::string& question = kind == AnomalyKind::overconfidence ? pending_->answered_question : pending_->text;
  if (!blank(raw_text)) {
    if (auto ex = soft_call([&] { return gateway.extract_label(question, source, m); })) label = ex->label;
  }
  RecordFlags flags;
  flags.set(kind == AnomalyKind::guessing     ? RecordFlag::guessing
            : kind == AnomalyKind::misleading ? RecordFlag::misleading
                                              : RecordFlag::overconfidence);
  return accept(label, flags, combined, gateway);
}

SessionEvent Session::accept(int label, RecordFlags flags, const std::string& raw_text, Gateway& gateway) {
  history_.push_back(ResponseRecord{pending_->item_id, label, raw_text, flags});
  history_questions_.push_back(pending_->answered_question);
  theta_ = estimate_ability(history_, *bank_, config_.estimation);
  theta_.step = step();

  if (step() >= config_.max_steps || fresh_items_.size() >= bank_->size()) {
    pending_.reset();
    shown_.clear();
    status_ = SessionStatus::completed;
    return SessionEvent{EventKind::completed, std::nullopt, std::nullopt, step(), config_.max_steps,
                        norm(theta_.values), flags, std::nullopt};
  }
  ask_fresh(gateway);
  return SessionEvent{EventKind::next_question, pending_->text, pending_->item_id, step(), config_.max_steps,
                      norm(theta_.values), flags, std::nullopt};
}

SessionEvent Session::submit_response(const std::string& raw_text, Gateway& gateway) {
  if (status_ == SessionStatus::completed) throw std::logic_error("session " + id_ + " is already completed");
  // Work on a copy so a gateway failure leaves this session untouched.
  Session next = *this;
  SessionEvent event = next.pending_->probe_kind ? next.answer_probe(raw_text, gateway)
                                                 : next.answer_question(raw_text, gateway);
  next.transcript_.push_back(raw_text);
  next.last_event_ = event;
  *this = std::move(next);
  return event;
}

SessionEvent Session::current_event() const { return last_event_; }

CompletedSession Session::finalize() const {
  if (status_ != SessionStatus::completed) throw std::logic_error("session " + id_ + " is not completed");
  return CompletedSession{id_, config_, theta_, history_, anomaly_log_, step()};
}

json Session::to_json() const {
  json history = json::array();
  for (const auto& r : history_) history.push_back(record_to_json(r));
  json log = json::array();
  for (const auto& e : anomaly_log_) log.push_back({{"step", e.step}, {"kind", e.kind}, {"action", e.action}});
  json j = {{"id", id_},
            {"config", config_.to_json()},
            {"status", to_string(status_)},
            {"theta", theta_to_json(theta_)},
            {"history", history},
            {"history_questions", history_questions_},
            {"anomaly_log", log},
            {"transcript", transcript_},
            {"fresh_items", fresh_items_},
            {"shown", shown_},
            {"last_event", event_state_to_json(last_event_)}};
  j["pending"] = pending_ ? pending_to_json(*pending_) : json(nullptr);
  return j;
}

Session Session::from_json(const json& j, std::shared_ptr<const ItemBank> bank) {
  if (!bank) throw std::invalid_argument("session restore needs a bank");
  Session s;
  try {
    s.id_ = j.at("id").get<std::string>();
    s.config_ = SessionConfig::from_json(j.at("config"));
    s.status_ = parse_status(j.at("status").get<std::string>());
    s.theta_ = theta_from_json(j.at("theta"));
    for (const auto& r : j.at("history")) s.history_.push_back(record_from_json(r));
    s.history_questions_ = j.at("history_questions").get<std::vector<std::string>>();
    for (const auto& e : j.at("anomaly_log")) {
      s.anomaly_log_.push_back(
          {e.at("step").get<int>(), e.at("kind").get<std::string>(), e.at("action").get<std::string>()});
    }
    s.transcript_ = j.at("transcript").get<std::vector<std::string>>();
    s.fresh_items_ = j.at("fresh_items").get<std::vector<std::string>>();
    s.shown_ = j.at("shown").get<std::vector<std::string>>();
    s.last_event_ = event_from_json(j.at("last_event"));
    if (!j.at("pending").is_null()) s.pending_ = pending_from_json(j["pending"]);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("bad session snapshot: ") + e.what());
  }
  for (const auto& id : s.fresh_items_) {
    if (!bank->find(id)) throw std::invalid_argument("snapshot item '" + id + "' is not in the bank");
  }
  if (s.config_.dimensions != bank->dimensions()) throw std::invalid_argument("snapshot does not match the bank");
  s.bank_ = std::move(bank);
  return s;
}

Session replay_session(std::string id, const SessionConfig& config, std::shared_ptr<const ItemBank> bank,
                       Gateway& gateway, std::span<const std::string> inputs) {
  Session s = Session::start(std::move(id), config, std::move(bank), gateway);
  for (const auto& text : inputs) s.submit_response(text, gateway);
  return s;
}

}  // namespace testagent
