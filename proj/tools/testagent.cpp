// Command-line front end: bank tooling, simulations, the HTTP service and a
// terminal demo session.

#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <httplib.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "testagent/evaluation.hpp"
#include "testagent/http_gateway.hpp"
#include "testagent/question_bank.hpp"
#include "testagent/report.hpp"
#include "testagent/scripted_gateway.hpp"
#include "testagent/service.hpp"
#include "testagent/session.hpp"

using namespace testagent;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Common {
  std::uint64_t seed = 42;
  std::string config_path;
  std::string stub_path;
  bool verbose = false;
  bool json_logs = false;
};

// "synthetic:<name>" or a bank file path.
BankFile resolve_bank(const std::string& spec, std::uint64_t seed) {
  const std::string prefix = "synthetic:";
  if (spec.rfind(prefix, 0) == 0) return synthetic_bank(spec.substr(prefix.size()), seed);
  return load_bank(spec);
}

std::vector<Strategy> parse_strategies(const std::string& list) {
  std::vector<Strategy> out;
  std::stringstream in(list);
  for (std::string name; std::getline(in, name, ',');) {
    if (!name.empty()) out.push_back(parse_strategy(name));
  }
  if (out.empty()) throw std::invalid_argument("no strategies given");
  return out;
}

ServiceConfig load_config(const Common& common) {
  ServiceConfig config = common.config_path.empty() ? ServiceConfig{} : ServiceConfig::load(common.config_path);
  if (!common.stub_path.empty()) config.stub = Scenario::load(common.stub_path);
  return config;
}

std::unique_ptr<Gateway> make_gateway(const ServiceConfig& config) {
  if (config.stub) return std::make_unique<ScriptedGateway>(*config.stub);
  return std::make_unique<HttpGateway>(config.gateway);
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

std::string render(const json& body) {
  if (body.is_string()) return body.get<std::string>();
  std::string out;
  for (const auto& entry : body) out += "  - " + (entry.is_string() ? entry.get<std::string>() : entry.dump()) + "\n";
  return out.empty() ? "  (none)\n" : out;
}

std::vector<std::string> read_lines(std::istream& in) {
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

httplib::Server* g_server = nullptr;

void stop_server(int) {
  if (g_server) g_server->stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adaptive psychological testing: sessions, simulations and the /v1 service"};
  app.require_subcommand(1);
  app.fallthrough();
  Common common;
  app.add_option("--seed", common.seed, "Seed for every random stream")->capture_default_str();
  app.add_option("--config", common.config_path, "Service/gateway config file (JSON)")->check(CLI::ExistingFile);
  app.add_option("--stub", common.stub_path, "Scripted gateway scenario instead of the HTTP endpoint")
      ->check(CLI::ExistingFile);
  app.add_flag("-v,--verbose", common.verbose, "Debug logging");
  app.add_flag("--log-json", common.json_logs, "Line-delimited JSON log records");

  // make-bank
  auto* make_bank = app.add_subcommand("make-bank", "Write a built-in synthetic bank with generating thresholds");
  std::string bank_name;
  std::string out_path;
  make_bank->add_option("--name", bank_name, "mbti | scl | math | standard")->required();
  make_bank->add_option("--out", out_path, "Output bank file")->required();

  // generate
  auto* generate = app.add_subcommand("generate", "Generate response records from a bank");
  std::string bank_spec;
  int respondents = 1000;
  std::string mode = "parametric";
  std::string personas_path;
  generate->add_option("--bank", bank_spec, "Bank file or synthetic:<name>")->required();
  generate->add_option("--respondents", respondents)->capture_default_str();
  generate->add_option("--mode", mode, "parametric | roleplay")->capture_default_str();
  generate->add_option("--personas", personas_path, "Roleplay personas, one per line")->check(CLI::ExistingFile);
  generate->add_option("--out", out_path, "Output response-matrix file")->required();

  // calibrate
  auto* calibrate = app.add_subcommand("calibrate", "Fit item thresholds to response records");
  std::string matrix_path;
  std::string report_path;
  calibrate->add_option("--bank", bank_spec, "Bank file or synthetic:<name>")->required();
  calibrate->add_option("--matrix", matrix_path, "Response records; generated parametrically when omitted")
      ->check(CLI::ExistingFile);
  calibrate->add_option("--respondents", respondents, "Respondents to generate without --matrix")
      ->capture_default_str();
  calibrate->add_option("--out", out_path, "Calibrated bank file")->required();
  calibrate->add_option("--report", report_path, "Calibration report (JSON)");

  // simulate-mse
  auto* simulate = app.add_subcommand("simulate-mse", "Ability-estimate MSE curves per selection strategy");
  std::string strategies = "random,fsi,kli,maat";
  int steps = 20;
  std::string out_dir = ".";
  int reference_step = 20;
  std::string sim_bank = "synthetic:standard";
  int sim_respondents = 200;
  simulate->add_option("--bank", sim_bank, "Bank file or synthetic:<name>")->capture_default_str();
  simulate->add_option("--strategies", strategies)->capture_default_str();
  simulate->add_option("--respondents", sim_respondents)->capture_default_str();
  simulate->add_option("--steps", steps)->capture_default_str();
  simulate->add_option("--reference-step", reference_step, "Step of Random's MSE used as the target")
      ->capture_default_str();
  simulate->add_option("--out-dir", out_dir)->capture_default_str();

  // evaluate
  auto* evaluate = app.add_subcommand("evaluate", "ACC/AUC on held-out records after k adaptive steps");
  std::vector<int> ks{5, 10, 20};
  int folds = 5;
  double ratio = 0.5;
  std::string table_path;
  std::string eval_bank;
  int eval_respondents = 200;
  std::string eval_strategies = "random,fsi,kli,maat";
  evaluate->add_option("--bank", eval_bank, "Bank file or synthetic:<name>")->required();
  evaluate->add_option("--matrix", matrix_path, "Response records; generated parametrically when omitted")
      ->check(CLI::ExistingFile);
  evaluate->add_option("--respondents", eval_respondents, "Respondents to generate without --matrix")
      ->capture_default_str();
  evaluate->add_option("--strategies", eval_strategies)->capture_default_str();
  evaluate->add_option("--steps", ks, "Values of k")->delimiter(',')->capture_default_str();
  evaluate->add_option("--folds", folds)->capture_default_str();
  evaluate->add_option("--support-ratio", ratio)->capture_default_str();
  evaluate->add_option("--out", table_path, "Table file (stdout when omitted)");

  // serve
  auto* serve = app.add_subcommand("serve", "Run the /v1 HTTP service");
  int port = -1;
  serve->add_option("--port", port, "Overrides the config port");

  // demo
  auto* demo = app.add_subcommand("demo", "Terminal session with the stub or live gateway");
  std::string answers_path;
  std::string templates_dir;
  std::string strategy = "fsi";
  bool print_json = false;
  std::string demo_bank = "synthetic:mbti";
  int demo_steps = 20;
  demo->add_option("--bank", demo_bank, "Bank file or synthetic:<name>")->capture_default_str();
  demo->add_option("--steps", demo_steps)->capture_default_str();
  demo->add_option("--strategy", strategy)->capture_default_str();
  demo->add_option("--answers", answers_path, "Answers, one per line (stdin when omitted)")
      ->check(CLI::ExistingFile);
  demo->add_option("--templates", templates_dir, "Report templates directory")->check(CLI::ExistingDirectory);
  demo->add_flag("--json", print_json, "Print the report document as JSON");

  CLI11_PARSE(app, argc, argv);

  spdlog::set_default_logger(spdlog::stderr_color_mt("testagent"));
  spdlog::set_level(common.verbose ? spdlog::level::debug : spdlog::level::info);
  if (common.json_logs) use_json_logging();

  try {
    if (make_bank->parsed()) {
      save_bank(synthetic_bank(bank_name, common.seed), out_path);
      spdlog::info("wrote {}", out_path);

    } else if (generate->parsed()) {
      const BankFile bank = resolve_bank(bank_spec, common.seed);
      GenerationSpec spec;
      spec.mode = parse_generation_mode(mode);
      spec.respondents = respondents;
      spec.seed = common.seed;
      if (!personas_path.empty()) {
        std::ifstream in(personas_path);
        spec.personas = read_lines(in);
      }
      std::unique_ptr<Gateway> gateway;
      if (spec.mode == GenerationMode::roleplay) gateway = make_gateway(load_config(common));
      save_matrix(generate_records(bank, spec, gateway.get()), bank.domain, out_path);
      spdlog::info("wrote {} respondents to {}", respondents, out_path);

    } else if (calibrate->parsed()) {
      const BankFile bank = resolve_bank(bank_spec, common.seed);
      CalibrationConfig cfg;
      cfg.seed = common.seed;
      CalibratedBank result;
      if (matrix_path.empty()) {
        GenerationSpec spec;
        spec.respondents = respondents;
        spec.seed = common.seed;
        result = build_calibrated_bank(bank, spec, nullptr, cfg);
      } else {
        result = calibrate_bank(bank, load_matrix(matrix_path), cfg);
      }
      save_bank(result.bank, out_path);
      if (!report_path.empty()) write_file(report_path, result.report.to_json().dump(2) + "\n");
      if (result.report.recovery_rmse) spdlog::info("threshold recovery RMSE {:.4f}", *result.report.recovery_rmse);
      spdlog::info("wrote {}", out_path);

    } else if (simulate->parsed()) {
      const ServiceConfig config = load_config(common);
      const BankFile bank_file = resolve_bank(sim_bank, common.seed);
      const ItemBank bank = bank_file.bank();
      GenerationSpec spec;
      spec.respondents = sim_respondents;
      spec.seed = common.seed;
      const ResponseMatrix matrix = generate_records(bank_file, spec);
      SimulationConfig sim;
      sim.max_steps = steps;
      sim.seed = common.seed;
      sim.estimation = config.defaults.estimation;
      sim.selection = config.defaults.selection;
      const auto list = parse_strategies(strategies);
      const auto curves = simulate_mse(bank, list, matrix, sim);
      fs::create_directories(out_dir);
      for (const auto& c : curves) {
        std::ostringstream out;
        write_curve_plot_data(out, c);
        write_file(fs::path(out_dir) / ("mse_" + c.strategy + ".tsv"), out.str());
      }
      std::ostringstream table;
      write_curves_tsv(table, curves);
      write_file(fs::path(out_dir) / "mse_curves.tsv", table.str());
      std::cout << table.str();
      const bool has_random = std::any_of(curves.begin(), curves.end(), [](const MseCurve& c) { return c.strategy == "random"; });
      if (has_random && reference_step <= steps) {
        std::ostringstream rows;
        write_steps_tsv(rows, steps_to_threshold(curves, "random", reference_step), reference_step);
        write_file(fs::path(out_dir) / "steps_to_threshold.tsv", rows.str());
        std::cout << "\n" << rows.str();
      }

    } else if (evaluate->parsed()) {
      const ServiceConfig config = load_config(common);
      const BankFile bank_file = resolve_bank(eval_bank, common.seed);
      ResponseMatrix matrix;
      if (matrix_path.empty()) {
        GenerationSpec spec;
        spec.respondents = eval_respondents;
        spec.seed = common.seed;
        matrix = generate_records(bank_file, spec);
      } else {
        matrix = load_matrix(matrix_path);
      }
      EvalConfig cfg;
      cfg.steps = ks;
      cfg.folds = folds;
      cfg.split_ratio = ratio;
      cfg.seed = common.seed;
      cfg.estimation = config.defaults.estimation;
      cfg.selection = config.defaults.selection;
      const auto rows = evaluate_adaptive(bank_file.bank(), matrix, parse_strategies(eval_strategies), cfg);
      std::ostringstream out;
      write_adaptive_tsv(out, rows);
      if (table_path.empty()) {
        std::cout << out.str();
      } else {
        write_file(table_path, out.str());
      }

    } else if (serve->parsed()) {
      ServiceConfig config = load_config(common);
      if (port >= 0) config.port = port;
      if (config.banks.empty()) config.banks.push_back({"mbti", {}, "mbti", {}});
      Service service(config);
      httplib::Server server;
      service.mount(server);
      g_server = &server;
      std::signal(SIGINT, stop_server);
      std::signal(SIGTERM, stop_server);
      spdlog::info("listening on {}:{}", config.host, config.port);
      if (!server.listen(config.host, config.port)) throw std::runtime_error("cannot listen on port " + std::to_string(config.port));
      spdlog::info("stopped");

    } else if (demo->parsed()) {
      const ServiceConfig config = load_config(common);
      const BankFile bank_file = resolve_bank(demo_bank, common.seed);
      const auto bank = std::make_shared<const ItemBank>(bank_file.bank());
      auto gateway = make_gateway(config);
      SessionConfig session_config = config.defaults;
      session_config.max_steps = demo_steps;
      session_config.strategy = parse_strategy(strategy);
      session_config.rng_seed = common.seed;

      std::ifstream answers_file;
      if (!answers_path.empty()) answers_file.open(answers_path);
      std::istream& in = answers_path.empty() ? std::cin : answers_file;

      Session session = Session::start("demo", session_config, bank, *gateway);
      SessionEvent event = session.current_event();
      int failures = 0;
      while (session.status() != SessionStatus::completed) {
        const bool followup = event.kind == EventKind::followup_question;
        std::cout << "[" << event.step + 1 << "/" << event.max_steps << "]" << (followup ? " (follow-up)" : "") << " "
                  << event.question.value_or("") << "\n> " << std::flush;
        std::string line;
        if (!std::getline(in, line)) throw std::runtime_error("input ended before the session completed");
        if (!answers_path.empty()) std::cout << line << "\n";
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
          std::cout << "(please type an answer)\n";
          continue;
        }
        try {
          event = session.submit_response(line, *gateway);
          failures = 0;
        } catch (const GatewayError& e) {
          // The session is unchanged, so the same question can be answered again.
          if (++failures >= 3) throw;
          std::cout << "(the model could not be reached: " << e.what() << "; please answer again)\n";
        }
      }

      const CompletedSession done = session.finalize();
      std::optional<LabelMap> label_map;
      std::optional<TypeClassifier> classifier;
      std::string type;
      if (!bank_file.label_map.empty()) {
        label_map.emplace(bank_file.label_map);
        GenerationSpec spec;
        spec.respondents = config.classifier_respondents;
        spec.seed = config.classifier_seed;
        classifier = train_from_matrix(generate_records(bank_file, spec), *bank, *label_map, session_config.estimation);
        type = classify(done.theta.values, *classifier, *label_map);
      }
      const auto templates = templates_dir.empty() ? std::map<std::string, ReportTemplate>{} : load_templates(templates_dir);
      ReportInputs inputs{done,
                          *bank,
                          type,
                          label_map ? &*label_map : nullptr,
                          classifier ? &*classifier : nullptr,
                          templates.empty() ? nullptr : &templates,
                          config.enrich_reports ? gateway.get() : nullptr};
      const json report = assemble_report(inputs);
      if (print_json) {
        std::cout << report.dump(2) << "\n";
      } else {
        std::string title = report["title"].is_string() ? report["title"].get<std::string>() : "Report";
        if (!report["title"].is_string() && !type.empty()) title += " (" + type + ")";
        std::cout << "\n=== " << title << " ===\n";
        for (const auto& section : report["sections"]) {
          std::cout << "\n## " << section["heading"].get<std::string>() << "\n" << render(section["body"]) << "\n";
        }
      }
    }
  } catch (const std::exception& e) {
    json err = {{"error", {{"message", e.what()}}}};
    if (const auto* g = dynamic_cast<const GatewayError*>(&e)) {
      err["error"]["type"] = "gateway";
      if (!g->raw_payload().empty()) err["error"]["raw"] = g->raw_payload();
    } else if (const auto* b = dynamic_cast<const BankError*>(&e)) {
      err["error"]["type"] = "bank";
      if (!b->item_id().empty()) err["error"]["item_id"] = b->item_id();
      if (!b->field().empty()) err["error"]["field"] = b->field();
    } else if (dynamic_cast<const std::invalid_argument*>(&e)) {
      err["error"]["type"] = "invalid_argument";
    } else {
      err["error"]["type"] = "runtime";
    }
    std::cerr << err.dump() << std::endl;
    return 1;
  }
  return 0;
}
