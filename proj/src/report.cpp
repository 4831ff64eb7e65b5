#include "testagent/report.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <stdexcept>

#include <spdlog/spdlog.h>

namespace testagent {

using nlohmann::json;

namespace {

double round4(double x) { return std::round(x * 1e4) / 1e4; }

struct SectionInfo {
  const char* id;
  const char* heading;
};

constexpr SectionInfo kSections[] = {
    {"type_overview", "Personality Type Overview"},
    {"dimension_summary", "Dimension Summary"},
    {"career_advice", "Career and Job Advice"},
    {"interpersonal_advice", "Interpersonal Relationship Advice"},
    {"personal_growth", "Personal Growth Advice"},
    {"misconceptions", "Common Misconceptions"},
    {"session_notes", "Session Notes"},
    {"item_highlights", "Item Highlights"},
    {"model_advice", "Additional Advice (model-generated)"},
};

const char* heading_of(const std::string& id) {
  for (const auto& s : kSections) {
    if (id == s.id) return s.heading;
  }
  return "";
}

bool is_prose(const std::string& id) {
  return id == "type_overview" || id == "career_advice" || id == "interpersonal_advice" || id == "personal_growth" ||
         id == "misconceptions";
}

const char* strength(double theta) {
  const double a = std::abs(theta);
  if (a < 0.5) return "slight";
  if (a < 1.5) return "moderate";
  return "clear";
}

}  // namespace

LabelMap::LabelMap(std::vector<std::pair<std::string, std::string>> pairs) : pairs_(std::move(pairs)) {
  std::set<std::string> seen;
  for (const auto& [a, b] : pairs_) {
    if (a.size() != 1 || b.size() != 1 || a == b) {
      throw std::invalid_argument("label pair '" + a + "/" + b + "' must be two distinct letters");
    }
    if (!seen.insert(a).second || !seen.insert(b).second) {
      throw std::invalid_argument("letter repeated across label pairs");
    }
  }
}

std::vector<int> LabelMap::encode(const std::string& type) const {
  if (type.size() != pairs_.size()) {
    throw std::invalid_argument("type '" + type + "' needs " + std::to_string(pairs_.size()) + " letters");
  }
  std::vector<int> bits;
  for (std::size_t d = 0; d < pairs_.size(); ++d) {
    const std::string c(1, type[d]);
    if (c == pairs_[d].first) {
      bits.push_back(0);
    } else if (c == pairs_[d].second) {
      bits.push_back(1);
    } else {
      throw std::invalid_argument("letter '" + c + "' is not valid for dimension " + std::to_string(d));
    }
  }
  return bits;
}

std::string LabelMap::decode(std::span<const int> bits) const {
  if (bits.size() != pairs_.size()) throw std::invalid_argument("bit vector length does not match the label map");
  std::string out;
  for (std::size_t d = 0; d < bits.size(); ++d) {
    if (bits[d] != 0 && bits[d] != 1) throw std::invalid_argument("bits must be 0 or 1");
    out += bits[d] ? pairs_[d].second : pairs_[d].first;
  }
  return out;
}

std::vector<std::string> LabelMap::all_types() const {
  std::vector<std::string> out;
  const std::size_t d = pairs_.size();
  for (std::size_t code = 0; code < (std::size_t{1} << d); ++code) {
    std::vector<int> bits(d);
    for (std::size_t k = 0; k < d; ++k) bits[k] = static_cast<int>((code >> (d - 1 - k)) & 1u);
    out.push_back(decode(bits));
  }
  return out;
}

void ClassifierTraining::validate() const {
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be positive");
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (l2 < 0.0) throw std::invalid_argument("l2 must be >= 0");
  if (min_per_class < 1) throw std::invalid_argument("min_per_class must be >= 1");
}

std::vector<double> TypeClassifier::probabilities(std::span<const double> theta) const {
  if (theta.size() != weight.size()) throw std::invalid_argument("theta dimension does not match the classifier");
  std::vector<double> p;
  for (std::size_t d = 0; d < weight.size(); ++d) p.push_back(sigmoid(weight[d] * theta[d] + bias[d]));
  return p;
}

std::vector<int> TypeClassifier::predict(std::span<const double> theta) const {
  if (theta.size() != weight.size()) throw std::invalid_argument("theta dimension does not match the classifier");
  std::vector<int> bits;
  // logit 0 is probability 0.5, which goes to the first letter
  for (std::size_t d = 0; d < weight.size(); ++d) bits.push_back(weight[d] * theta[d] + bias[d] > 0.0 ? 1 : 0);
  return bits;
}

json TypeClassifier::to_json() const {
  return {{"weight", weight}, {"bias", bias}, {"train_accuracy", train_accuracy}, {"samples", samples}};
}

TypeClassifier TypeClassifier::from_json(const json& doc) {
  TypeClassifier c;
  try {
    c.weight = doc.at("weight").get<std::vector<double>>();
    c.bias = doc.at("bias").get<std::vector<double>>();
    c.train_accuracy = doc.value("train_accuracy", std::vector<double>{});
    c.samples = doc.value("samples", std::size_t{0});
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("bad classifier document: ") + e.what());
  }
  if (c.weight.size() != c.bias.size()) throw std::invalid_argument("classifier weight and bias sizes differ");
  return c;
}

TypeClassifier train_classifier(std::span<const std::vector<double>> thetas, std::span<const std::string> labels,
                                const LabelMap& label_map, const ClassifierTraining& config) {
  config.validate();
  if (thetas.size() != labels.size()) throw std::invalid_argument("thetas and labels differ in length");
  const std::size_t dims = static_cast<std::size_t>(label_map.dimensions());
  if (dims == 0) throw std::invalid_argument("label map is empty");
  std::vector<std::vector<int>> bits;
  for (std::size_t i = 0; i < thetas.size(); ++i) {
    if (thetas[i].size() != dims) throw std::invalid_argument("theta sample " + std::to_string(i) + " has wrong size");
    bits.push_back(label_map.encode(labels[i]));
  }

  TypeClassifier c;
  c.samples = thetas.size();
  const double n = static_cast<double>(thetas.size());
  for (std::size_t d = 0; d < dims; ++d) {
    std::size_t ones = 0;
    for (const auto& b : bits) ones += static_cast<std::size_t>(b[d]);
    const std::size_t min_class = std::min(ones, thetas.size() - ones);
    if (min_class < static_cast<std::size_t>(config.min_per_class)) {
      const auto& [a, b] = label_map.pairs()[d];
      throw std::invalid_argument("dimension " + a + "/" + b + " has only " + std::to_string(min_class) +
                                  " samples of one letter (need " + std::to_string(config.min_per_class) + ")");
    }
    double w = 0.0, bias = 0.0;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
      double gw = 0.0, gb = 0.0;
      for (std::size_t i = 0; i < thetas.size(); ++i) {
        const double x = thetas[i][d];
        const double r = sigmoid(w * x + bias) - bits[i][d];
        gw += r * x;
        gb += r;
      }
      w -= config.learning_rate * (gw / n + config.l2 * w);
      bias -= config.learning_rate * (gb / n);
    }
    std::size_t correct = 0;
    for (std::size_t i = 0; i < thetas.size(); ++i) {
      correct += ((w * thetas[i][d] + bias > 0.0 ? 1 : 0) == bits[i][d]) ? 1 : 0;
    }
    c.weight.push_back(w);
    c.bias.push_back(bias);
    c.train_accuracy.push_back(static_cast<double>(correct) / n);
  }
  return c;
}

std::string classify(std::span<const double> theta, const TypeClassifier& classifier, const LabelMap& label_map) {
  return label_map.decode(classifier.predict(theta));
}

TypeClassifier train_from_matrix(const ResponseMatrix& matrix, const ItemBank& bank, const LabelMap& label_map,
                                 const EstimationConfig& estimation, const ClassifierTraining& config) {
  std::vector<std::vector<double>> thetas;
  std::vector<std::string> labels;
  for (const auto& r : matrix.respondents) {
    if (r.theta_true.size() != static_cast<std::size_t>(label_map.dimensions())) {
      throw std::invalid_argument("respondent " + r.id + " has no generating theta of the right size");
    }
    thetas.push_back(estimate_ability(r.records, bank, estimation).values);
    std::vector<int> bits;
    for (double t : r.theta_true) bits.push_back(t > 0.0 ? 1 : 0);
    labels.push_back(label_map.decode(bits));
  }
  return train_classifier(thetas, labels, label_map, config);
}

std::map<std::string, ReportTemplate> load_templates(const std::filesystem::path& dir) {
  std::map<std::string, ReportTemplate> out;
  if (!std::filesystem::is_directory(dir)) return out;
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.path().extension() == ".json") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& path : files) {
    std::ifstream in(path);
    try {
      const json doc = json::parse(in);
      ReportTemplate t;
      t.type = doc.at("type").get<std::string>();
      t.title = doc.value("title", t.type);
      for (const auto& [id, text] : doc.at("sections").items()) {
        if (!is_prose(id)) throw std::invalid_argument("unknown template section '" + id + "'");
        t.sections[id] = text.get<std::string>();
      }
      if (t.type != path.stem().string()) throw std::invalid_argument("type does not match the file name");
      out.emplace(t.type, std::move(t));
    } catch (const std::exception& e) {
      throw std::invalid_argument("template " + path.string() + ": " + e.what());
    }
  }
  return out;
}

const std::vector<std::string>& report_section_ids() {
  static const std::vector<std::string> ids = [] {
    std::vector<std::string> v;
    for (const auto& s : kSections) v.emplace_back(s.id);
    return v;
  }();
  return ids;
}

json assemble_report(const ReportInputs& in) {
  const CompletedSession& s = in.session;
  const ReportTemplate* tmpl = nullptr;
  if (in.templates && !in.type_string.empty()) {
    if (auto it = in.templates->find(in.type_string); it != in.templates->end()) tmpl = &it->second;
  }

  json sections = json::array();
  const auto add = [&](const std::string& id, json body) {
    sections.push_back({{"id", id}, {"heading", heading_of(id)}, {"body", std::move(body)}});
  };
  const auto add_prose = [&](const std::string& id) {
    if (!tmpl) return;
    if (auto it = tmpl->sections.find(id); it != tmpl->sections.end()) add(id, it->second);
  };

  add_prose("type_overview");

  json dims = json::array();
  std::vector<double> probs;
  if (in.classifier) probs = in.classifier->probabilities(s.theta.values);
  for (std::size_t d = 0; d < s.theta.values.size(); ++d) {
    const double theta = s.theta.values[d];
    json entry = {{"dimension", d}, {"theta", round4(theta)}, {"strength", strength(theta)}};
    if (in.label_map && static_cast<int>(d) < in.label_map->dimensions()) {
      const auto& [first, second] = in.label_map->pairs()[d];
      entry["letters"] = first + "/" + second;
      if (!probs.empty()) {
        const bool pos = in.classifier->predict(s.theta.values)[d] == 1;
        entry["leaning"] = pos ? second : first;
        entry["probability"] = round4(pos ? probs[d] : 1.0 - probs[d]);
      } else {
        entry["leaning"] = theta > 0.0 ? second : first;
      }
    }
    dims.push_back(std::move(entry));
  }
  add("dimension_summary", std::move(dims));

  add_prose("career_advice");
  add_prose("interpersonal_advice");
  add_prose("personal_growth");
  add_prose("misconceptions");

  json notes = json::array();
  for (const auto& e : s.anomaly_log) notes.push_back({{"step", e.step}, {"kind", e.kind}, {"action", e.action}});
  add("session_notes", std::move(notes));

  // Strongest answers first: distance from the item's midpoint, then step order.
  std::vector<std::size_t> order(s.history.size());
  for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
  const auto distance = [&](std::size_t k) {
    const auto& r = s.history[k];
    return std::abs(2 * r.label - in.bank.at(r.item_id).num_levels);
  };
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return distance(a) > distance(b); });
  json highlights = json::array();
  for (std::size_t k = 0; k < order.size() && static_cast<int>(k) < in.highlights; ++k) {
    const auto& r = s.history[order[k]];
    const Item& item = in.bank.at(r.item_id);
    highlights.push_back({{"step", order[k] + 1},
                          {"item", r.item_id},
                          {"text", item.text},
                          {"label", r.label},
                          {"num_levels", item.num_levels},
                          {"flags", r.flags.names()}});
  }
  add("item_highlights", std::move(highlights));

  if (in.gateway) {
    std::string summary = "type " + (in.type_string.empty() ? std::string("n/a") : in.type_string) + "; theta";
    for (double t : s.theta.values) summary += " " + std::to_string(round4(t));
    summary += "; " + std::to_string(s.anomaly_log.size()) + " session notes";
    try {
      const std::string advice = in.gateway->enrich_report(in.type_string.empty() ? "n/a" : in.type_string, summary);
      sections.push_back({{"id", "model_advice"},
                          {"heading", heading_of("model_advice")},
                          {"body", advice},
                          {"model_generated", true}});
    } catch (const GatewayError& e) {
      spdlog::warn("report enrichment skipped: {}", e.what());
    }
  }

  json doc = {{"session_id", s.id},
              {"type", in.type_string.empty() ? json(nullptr) : json(in.type_string)},
              {"title", tmpl ? json(tmpl->title) : json(nullptr)},
              {"steps", s.steps},
              {"template", tmpl != nullptr},
              {"sections", std::move(sections)}};
  return doc;
}

}  // namespace testagent
