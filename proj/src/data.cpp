#include "cmc/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <random>

#include "cmc/error.hpp"
#include "json.hpp"

namespace cmc {

namespace {

struct Pair {
  const char* key;
  const char* value;
};

constexpr Pair kColors[] = {
    {"sky", "blue"},     {"grass", "green"},  {"snow", "white"},   {"coal", "black"},
    {"blood", "red"},    {"sun", "yellow"},   {"carrot", "orange"}, {"plum", "purple"},
    {"cloud", "grey"},   {"leaf", "green"},   {"milk", "white"},   {"night", "black"},
    {"banana", "yellow"}, {"cherry", "red"},  {"sea", "blue"},     {"chocolate", "brown"},
};

struct Animal {
  const char* name;
  const char* home;
  const char* sound;
};

constexpr Animal kAnimals[] = {
    {"cow", "farm", "moo"},     {"dog", "house", "woof"},    {"duck", "pond", "quack"},
    {"bee", "hive", "buzz"},    {"owl", "tree", "hoot"},     {"lion", "savanna", "roar"},
    {"frog", "pond", "croak"},  {"sheep", "field", "baa"},   {"cat", "house", "meow"},
    {"horse", "stable", "neigh"}, {"pig", "farm", "oink"},   {"bird", "nest", "tweet"},
    {"wolf", "forest", "howl"}, {"snake", "grass", "hiss"},  {"mouse", "hole", "squeak"},
    {"goat", "hill", "bleat"},
};

constexpr const char* kWords[] = {"lamp", "stone", "river", "apple", "cloud", "table", "music", "light",
                                  "paper", "glass", "bread", "chair", "water", "money", "green", "house",
                                  "smile", "dream", "train", "plant", "storm", "beach", "night", "sugar"};

constexpr const char* kSyllables[] = {"zor", "bax", "mel", "tik", "quo", "ran", "vel", "dun",
                                      "pim", "sa",  "lek", "nor", "fib", "gal", "hox", "jen"};

constexpr const char* kPlaceAdj[] = {"red",   "stone",  "misty", "iron",   "silver", "old",   "green", "dark",
                                     "sandy", "frozen", "quiet", "golden", "broken", "salty", "windy", "cedar"};
constexpr const char* kPlaceNoun[] = {"valley", "harbor", "hills", "bridge", "lake",  "mill",  "meadow", "forest",
                                      "beach",  "peak",   "bay",   "field",  "tower", "marsh", "cliff",  "grove"};
constexpr const char* kJobVerb[] = {"bakes", "fixes", "sells",  "paints", "tames",  "brews",  "sews",   "carves",
                                    "grows", "mends", "reads", "forges", "herds", "builds", "weaves", "catches"};
constexpr const char* kJobNoun[] = {"bread", "boats", "maps",   "doors", "horses", "tea",   "coats", "wood",
                                    "rice",  "nets",  "stars", "swords", "goats",  "carts", "rugs",  "eels"};

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <typename T>
void shuffle(std::vector<T>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(v[i - 1], v[j]);
  }
}

std::string upper(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return out;
}

std::string capitalize(std::string s) {
  if (!s.empty()) s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
  return s;
}

// Two-word answers drawn without replacement from a 16 x 16 grid.
class AnswerGrid {
 public:
  AnswerGrid(const char* const* first, const char* const* second, std::mt19937_64& rng)
      : first_(first), second_(second) {
    for (std::size_t i = 0; i < 256; ++i) free_.push_back(i);
    shuffle(free_, rng);
  }

  std::string take() {
    const auto i = free_.back();
    free_.pop_back();
    return at(i);
  }

  std::vector<std::string> others(std::string_view truth, std::size_t count, std::mt19937_64& rng) const {
    std::vector<std::string> out;
    while (out.size() < count) {
      auto s = at(rng() % 256);
      if (s != truth && std::find(out.begin(), out.end(), s) == out.end()) out.push_back(std::move(s));
    }
    return out;
  }

 private:
  std::string at(std::size_t i) const { return std::string(first_[i / 16]) + " " + second_[i % 16]; }

  const char* const* first_;
  const char* const* second_;
  std::vector<std::size_t> free_;
};

template <typename F>
void for_each_line(const std::filesystem::path& path, F&& f) {
  std::ifstream in(path);
  if (!in) fail_data("cannot open " + path.string());
  std::string line;
  std::size_t no = 0;
  while (std::getline(in, line)) {
    ++no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      fail_data(path.string() + ":" + std::to_string(no) + ": " + e.what());
    }
    try {
      f(j);
    } catch (const nlohmann::json::exception& e) {
      fail_data(path.string() + ":" + std::to_string(no) + ": " + e.what());
    }
  }
}

void write_lines(const std::filesystem::path& path, const std::vector<nlohmann::json>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail_data("cannot write " + path.string());
  for (const auto& r : rows) out << r.dump() << '\n';
}

}  // namespace

std::string_view to_string(TaskKind k) {
  switch (k) {
    case TaskKind::instruction_format: return "instruction-format";
    case TaskKind::forget_retain_facts: return "forget-retain-facts";
    case TaskKind::cross_task_control: return "cross-task-control";
  }
  return "?";
}

TaskKind parse_task_kind(std::string_view name) {
  if (name == "instruction-format") return TaskKind::instruction_format;
  if (name == "forget-retain-facts") return TaskKind::forget_retain_facts;
  if (name == "cross-task-control") return TaskKind::cross_task_control;
  fail_config("unknown task kind '" + std::string(name) + "'");
}

void SyntheticTaskSpec::validate() const {
  if (kind == TaskKind::forget_retain_facts) {
    if (size < 2) fail_config("facts task needs size >= 2");
    if (size > std::size(kSyllables) * (std::size(kSyllables) - 1)) fail_config("facts task size exceeds the name pool");
    if (!(forget_fraction > 0.0 && forget_fraction < 1.0)) fail_config("forget_fraction must lie in (0, 1)");
  } else if (size < 1) {
    fail_config("size must be at least 1");
  }
  if (format_marker.find('\n') != std::string::npos) fail_config("format_marker must not contain a newline");
}

std::string prompt_for(std::string_view question) { return "Q: " + std::string(question) + " "; }

std::string apply_format(std::string_view marker, std::string_view answer) {
  if (marker.empty()) return std::string(answer);
  const auto at = marker.find("{}");
  if (at == std::string_view::npos) return std::string(marker);
  return std::string(marker.substr(0, at)) + std::string(answer) + std::string(marker.substr(at + 2));
}

std::string cross_task_format(std::string_view answer) { return "[" + upper(answer) + "]"; }

std::vector<PoolItem> instruction_pool(bool heldout) {
  std::vector<PoolItem> all;
  for (const auto& c : kColors) all.push_back({std::string("what color is the ") + c.key + "?", c.value});
  for (const auto& a : kAnimals) {
    all.push_back({std::string("where does the ") + a.name + " live?", std::string("on the ") + a.home});
    all.push_back({std::string("what sound does the ") + a.name + " make?", a.sound});
  }
  for (int a = 0; a < 30; ++a) {
    for (int b = 0; b < 30; ++b) {
      all.push_back({"what is " + std::to_string(a) + " plus " + std::to_string(b) + "?", std::to_string(a + b)});
      if (b <= a) {
        all.push_back({"what is " + std::to_string(a) + " minus " + std::to_string(b) + "?", std::to_string(a - b)});
      }
    }
  }
  for (int n = 0; n < 99; ++n) all.push_back({"what comes after " + std::to_string(n) + "?", std::to_string(n + 1)});
  for (const char* w : kWords) {
    std::string r(w);
    std::reverse(r.begin(), r.end());
    all.push_back({std::string("what is ") + w + " backwards?", r});
  }
  std::vector<PoolItem> out;
  for (auto& item : all) {
    if ((fnv1a(item.question) % 4 == 0) == heldout) out.push_back(std::move(item));
  }
  return out;
}

std::vector<SupervisedPair> gen_instruction_data(const SyntheticTaskSpec& spec) {
  spec.validate();
  if (spec.kind == TaskKind::forget_retain_facts) fail_config("use gen_forget_retain for the facts task");
  const auto pool = instruction_pool(spec.heldout);
  std::mt19937_64 rng(spec.seed);
  std::vector<std::size_t> order;
  std::vector<SupervisedPair> out;
  out.reserve(spec.size);
  while (out.size() < spec.size) {
    order.resize(pool.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    shuffle(order, rng);
    for (std::size_t i = 0; i < order.size() && out.size() < spec.size; ++i) {
      const auto& item = pool[order[i]];
      std::string response = spec.kind == TaskKind::cross_task_control ? cross_task_format(item.answer)
                                                                       : apply_format(spec.format_marker, item.answer);
      out.push_back({prompt_for(item.question), std::move(response)});
    }
  }
  return out;
}

ForgetRetainDataset gen_forget_retain(const SyntheticTaskSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::vector<std::string> names;
  for (const char* a : kSyllables) {
    for (const char* b : kSyllables) {
      if (std::string_view(a) != b) names.push_back(capitalize(std::string(a) + b));
    }
  }
  shuffle(names, rng);
  names.resize(spec.size);
  const auto n_forget = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::ceil(spec.forget_fraction * static_cast<double>(spec.size))), 1, spec.size - 1);
  AnswerGrid places(kPlaceAdj, kPlaceNoun, rng);
  AnswerGrid jobs(kJobVerb, kJobNoun, rng);
  ForgetRetainDataset data;
  for (std::size_t e = 0; e < names.size(); ++e) {
    const std::string& name = names[e];
    auto& dst = e < n_forget ? data.forget : data.retain;
    const std::string place = places.take();
    const std::string job = jobs.take();
    QARecord live;
    live.question = prompt_for("where does " + name + " live?");
    live.answer = place;
    live.paraphrased_answer = "the " + place;
    live.perturbed_answers = places.others(place, 3, rng);
    dst.push_back(std::move(live));
    QARecord work;
    work.question = prompt_for("what does " + name + " do?");
    work.answer = job;
    work.paraphrased_answer = "one who " + job;
    work.perturbed_answers = jobs.others(job, 3, rng);
    dst.push_back(std::move(work));
  }
  return data;
}

std::vector<SupervisedPair> read_pairs(const std::filesystem::path& path) {
  std::vector<SupervisedPair> out;
  for_each_line(path, [&](const nlohmann::json& j) {
    SupervisedPair p{j.at("prompt").get<std::string>(), j.at("response").get<std::string>()};
    if (p.response.empty()) fail_data(path.string() + ": empty response");
    out.push_back(std::move(p));
  });
  if (out.empty()) fail_data(path.string() + ": no records");
  return out;
}

void write_pairs(const std::filesystem::path& path, const std::vector<SupervisedPair>& pairs) {
  std::vector<nlohmann::json> rows;
  rows.reserve(pairs.size());
  for (const auto& p : pairs) rows.push_back({{"prompt", p.prompt}, {"response", p.response}});
  write_lines(path, rows);
}

ForgetRetainDataset read_forget_retain(const std::filesystem::path& path) {
  ForgetRetainDataset data;
  for_each_line(path, [&](const nlohmann::json& j) {
    QARecord r;
    r.question = j.at("question").get<std::string>();
    r.answer = j.at("answer").get<std::string>();
    r.paraphrased_answer = j.at("paraphrased_answer").get<std::string>();
    r.perturbed_answers = j.at("perturbed_answers").get<std::vector<std::string>>();
    if (r.perturbed_answers.empty()) fail_data(path.string() + ": record without perturbed answers");
    const auto split = j.at("split").get<std::string>();
    if (split == "forget") {
      data.forget.push_back(std::move(r));
    } else if (split == "retain") {
      data.retain.push_back(std::move(r));
    } else {
      fail_data(path.string() + ": unknown split '" + split + "'");
    }
  });
  data.validate();
  return data;
}

void write_forget_retain(const std::filesystem::path& path, const ForgetRetainDataset& data) {
  std::vector<nlohmann::json> rows;
  auto add = [&](const std::vector<QARecord>& recs, const char* split) {
    for (const auto& r : recs) {
      rows.push_back({{"question", r.question},
                      {"answer", r.answer},
                      {"paraphrased_answer", r.paraphrased_answer},
                      {"perturbed_answers", r.perturbed_answers},
                      {"split", split}});
    }
  };
  add(data.forget, "forget");
  add(data.retain, "retain");
  write_lines(path, rows);
}

std::string corpus_text(const std::vector<SupervisedPair>& pairs) {
  std::string out;
  for (const auto& p : pairs) {
    out += p.prompt;
    out += '\n';
    out += p.response;
    out += '\n';
  }
  return out;
}

std::string corpus_text(const ForgetRetainDataset& data) {
  std::string out;
  for (const auto* recs : {&data.forget, &data.retain}) {
    for (const auto& r : *recs) {
      out += r.question + '\n' + r.answer + '\n' + r.paraphrased_answer + '\n';
      for (const auto& p : r.perturbed_answers) out += p + '\n';
    }
  }
  return out;
}

}  // namespace cmc
