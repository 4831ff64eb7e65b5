#include <array>
#include <cstdio>
#include <random>
#include <stdexcept>

#include "testagent/question_bank.hpp"
#include "testagent/random.hpp"

namespace testagent {

namespace {

// Agreeing moves the respondent towards the second letter of the pair.
constexpr std::array<const char*, 15> kExtraversion = {
    "You feel recharged after an evening spent with a big group of friends.",
    "You are usually the one who starts a conversation with a stranger.",
    "You prefer lively places over quiet ones when you go out.",
    "You think out loud when working through a problem.",
    "You enjoy being at the centre of attention at a party.",
    "You would rather join a team project than work on something alone.",
    "You find it easy to introduce yourself to new people.",
    "A weekend without social plans feels wasted to you.",
    "You like to talk through your day with someone as soon as you get home.",
    "You are comfortable speaking up in a large meeting.",
    "You tend to have a wide circle of acquaintances.",
    "You get restless when you have to spend a long time on your own.",
    "You enjoy networking events and meeting people in your field.",
    "You often share your feelings openly with people you just met.",
    "You feel energised by busy, noisy environments.",
};

constexpr std::array<const char*, 15> kSensing = {
    "You trust facts you can check more than hunches.",
    "You prefer step-by-step instructions to a general overview.",
    "You notice small practical details that others overlook.",
    "You would rather improve something that works than invent something new.",
    "You focus on what is happening now rather than on future possibilities.",
    "You like tasks with clear, concrete results.",
    "You remember specific facts more easily than overall patterns.",
    "You prefer proven methods to experimental ones.",
    "You describe things literally rather than with metaphors.",
    "You get impatient with discussions that stay abstract for too long.",
    "You rely on past experience when making a decision.",
    "You like reading manuals before using a new device.",
    "You are more interested in how things work than in what they could become.",
    "You would choose a realistic plan over an inspiring vision.",
    "You prefer hands-on learning to learning from theory.",
};

constexpr std::array<const char*, 15> kFeeling = {
    "You consider how a decision will affect people's feelings before making it.",
    "You find it hard to give criticism even when it is deserved.",
    "Harmony in a group matters more to you than winning an argument.",
    "You are easily moved by other people's stories.",
    "You would rather be kind than be right.",
    "You pay attention to the mood of the people around you.",
    "You tend to take disagreements personally.",
    "Your values guide your choices more than cost-benefit analysis.",
    "You often put other people's needs before your own.",
    "You find it natural to comfort a friend who is upset.",
    "You judge an idea partly by how the people behind it will feel.",
    "You avoid conflict whenever you can.",
    "You are persuaded more by personal examples than by statistics.",
    "You feel uneasy when someone in the room is being treated unfairly.",
    "You appreciate praise for your warmth more than praise for your competence.",
};

constexpr std::array<const char*, 15> kPerceiving = {
    "You like to keep your options open rather than settle plans early.",
    "You often start tasks close to the deadline.",
    "You enjoy improvising when plans change at the last minute.",
    "Your workspace tends to be a little messy.",
    "You find strict schedules confining.",
    "You prefer to explore first and decide later.",
    "You often switch between several projects at once.",
    "You are comfortable leaving a decision unmade for a while.",
    "You pack for a trip at the last moment.",
    "You like spontaneous weekends with no fixed agenda.",
    "You see rules as guidelines that can bend.",
    "You rarely make to-do lists.",
    "You enjoy starting projects more than finishing them.",
    "You adapt easily when a meeting takes an unexpected turn.",
    "You would rather wander around a new city than follow an itinerary.",
};

constexpr std::array<const char*, 30> kSymptoms = {
    "headaches",
    "feeling nervous or shaky inside",
    "unwanted thoughts that keep coming back",
    "feeling faint or dizzy",
    "losing interest in things you used to enjoy",
    "feeling critical of others",
    "trouble remembering things",
    "worrying about being careless",
    "feeling easily annoyed or irritated",
    "pains in your chest",
    "feeling afraid in open spaces",
    "feeling low in energy",
    "thoughts of ending your life",
    "feeling that others are watching you",
    "trouble falling asleep",
    "feeling lonely",
    "feeling blue",
    "feeling that nobody understands you",
    "feeling tense or keyed up",
    "heavy feelings in your arms or legs",
    "crying easily",
    "feeling that you have to check things again and again",
    "trouble concentrating",
    "feeling hopeless about the future",
    "temper outbursts you could not control",
    "avoiding places because they frighten you",
    "feeling self-conscious with others",
    "nausea or an upset stomach",
    "sudden fear for no reason",
    "feeling worthless",
};

constexpr std::array<const char*, 3> kScalePeriods = {"over the past week", "over the past month",
                                                      "in the last few days"};

Item make(std::string id, std::string text, int dimension, std::vector<double> thresholds) {
  Item item;
  item.id = std::move(id);
  item.text = std::move(text);
  item.dimension = dimension;
  item.num_levels = static_cast<int>(thresholds.size());
  item.thresholds = std::move(thresholds);
  return item;
}

std::string numbered(const char* prefix, int k, int width) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%0*d", prefix, width, k);
  return buf;
}

BankFile mbti(std::mt19937_64& rng) {
  BankFile bank;
  bank.domain = "mbti";
  bank.dimensions = 4;
  bank.num_levels = 6;
  bank.label_map = {{"I", "E"}, {"N", "S"}, {"T", "F"}, {"J", "P"}};
  const std::array<const std::array<const char*, 15>*, 4> dims = {&kExtraversion, &kSensing, &kFeeling, &kPerceiving};
  const char* prefixes[] = {"ei", "sn", "tf", "jp"};
  std::uniform_real_distribution<double> centre(-0.8, 0.8);
  std::uniform_real_distribution<double> spread(0.5, 0.7);
  // Interleave dimensions so every prefix of the bank covers all four.
  for (int k = 0; k < 15; ++k) {
    for (int d = 0; d < 4; ++d) {
      const double c = centre(rng), sp = spread(rng);
      std::vector<double> b;
      for (int m = 0; m < 6; ++m) b.push_back(round_sig9(c + (m - 2.5) * sp * 1.2));
      bank.items.push_back(make(numbered(prefixes[d], k + 1, 2), (*dims[d])[k], d, b));
    }
  }
  bank.provenance.push_back("synthetic personality statements with generating thresholds");
  return bank;
}

BankFile scl(std::mt19937_64& rng) {
  BankFile bank;
  bank.domain = "scl";
  bank.dimensions = 1;
  bank.num_levels = 4;
  std::uniform_real_distribution<double> centre(-0.5, 1.5);
  std::uniform_real_distribution<double> gap(0.5, 1.0);
  int k = 0;
  for (const char* period : kScalePeriods) {
    for (const char* symptom : kSymptoms) {
      std::vector<double> b;
      double x = centre(rng) - 1.5 * 0.75;
      for (int m = 0; m < 4; ++m, x += gap(rng)) b.push_back(round_sig9(x));
      bank.items.push_back(make(numbered("scl", ++k, 2),
                                std::string("How much were you bothered by ") + symptom + " " + period + "?", 0, b));
    }
  }
  bank.provenance.push_back("synthetic symptom checklist with generating thresholds");
  return bank;
}

BankFile math(std::mt19937_64& rng) {
  BankFile bank;
  bank.domain = "math";
  bank.dimensions = 1;
  bank.num_levels = 1;
  std::uniform_real_distribution<double> difficulty(-2.5, 2.5);
  for (int k = 1; k <= 1485; ++k) {
    const double beta = round_sig9(difficulty(rng));
    // Harder items get larger operands and more operations.
    const int scale = beta < -1.0 ? 10 : beta < 0.5 ? 100 : 1000;
    std::uniform_int_distribution<int> operand(2, scale);
    const int a = operand(rng), b = operand(rng), c = operand(rng);
    std::string text;
    if (beta < -1.0) {
      text = "What is " + std::to_string(a) + " + " + std::to_string(b) + "?";
    } else if (beta < 0.5) {
      text = "What is " + std::to_string(a) + " * " + std::to_string(b) + " - " + std::to_string(c) + "?";
    } else {
      text = "Solve for x: " + std::to_string(a) + "x + " + std::to_string(b) + " = " + std::to_string(c) +
             ". Give x as a fraction.";
    }
    bank.items.push_back(make(numbered("m", k, 4), text, 0, {beta}));
  }
  bank.provenance.push_back("synthetic arithmetic items with generating difficulties");
  return bank;
}

BankFile standard(std::mt19937_64& rng) {
  BankFile bank;
  bank.domain = "standard";
  bank.dimensions = 1;
  bank.num_levels = 4;
  std::uniform_real_distribution<double> difficulty(-2.5, 2.5);
  for (int k = 1; k <= 100; ++k) {
    bank.items.push_back(
        make(numbered("b", k, 3), "Binary item " + std::to_string(k), 0, {round_sig9(difficulty(rng))}));
  }
  std::uniform_real_distribution<double> centre(-1.0, 1.0);
  std::uniform_real_distribution<double> gap(0.6, 1.0);
  for (int k = 1; k <= 60; ++k) {
    const double c = centre(rng), g = gap(rng);
    std::vector<double> b;
    for (int m = 0; m < 4; ++m) b.push_back(round_sig9(c + (m - 1.5) * g));
    bank.items.push_back(make(numbered("g", k, 2), "Graded item " + std::to_string(k), 0, b));
  }
  bank.provenance.push_back("standard synthetic bank: 100 binary and 60 four-level items");
  return bank;
}

std::uint64_t name_tag(const std::string& name) {
  std::uint64_t h = 0;
  for (unsigned char c : name) h = h * 131 + c;
  return h;
}

}  // namespace

std::vector<std::string> synthetic_bank_names() { return {"mbti", "scl", "math", "standard"}; }

BankFile synthetic_bank(const std::string& name, std::uint64_t seed) {
  std::mt19937_64 rng(derive_seed(seed, {name_tag(name)}));
  BankFile bank;
  if (name == "mbti") {
    bank = mbti(rng);
  } else if (name == "scl") {
    bank = scl(rng);
  } else if (name == "math") {
    bank = math(rng);
  } else if (name == "standard") {
    bank = standard(rng);
  } else {
    throw std::invalid_argument("unknown synthetic bank '" + name + "'");
  }
  validate_bank(bank);
  return bank;
}

}  // namespace testagent
