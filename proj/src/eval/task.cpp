#include "ptlab/eval/task.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "ptlab/core/error.hpp"
#include "ptlab/core/json_fields.hpp"
#include "ptlab/core/rng.hpp"

namespace ptlab {

namespace {

constexpr std::string_view kInput = "{input}";
constexpr std::string_view kCandidate = "{candidate}";

std::string replace_all(std::string text, std::string_view from, const std::string& to) {
  for (std::size_t pos = text.find(from); pos != std::string::npos; pos = text.find(from, pos + to.size())) {
    text.replace(pos, from.size(), to);
  }
  return text;
}

std::size_t count_of(const std::string& text, std::string_view what) {
  std::size_t n = 0;
  for (std::size_t pos = text.find(what); pos != std::string::npos; pos = text.find(what, pos + 1)) ++n;
  return n;
}

}  // namespace

void EvalTask::validate() const {
  if (name.empty()) throw ValidationError("task without a name");
  if (prompts.empty()) throw ValidationError("task " + name + ": no prompts");
  for (const auto& p : prompts) {
    if (count_of(p, kCandidate) != 1) throw ValidationError("task " + name + ": prompt needs exactly one {candidate}");
    if (count_of(p, kInput) == 0) throw ValidationError("task " + name + ": prompt without {input}");
  }
  if (examples.empty()) throw ValidationError("task " + name + ": no examples");
  for (const auto& ex : examples) {
    if (ex.candidates.size() < 2) throw ValidationError("task " + name + ": example with fewer than 2 candidates");
    if (ex.gold < 0 || static_cast<std::size_t>(ex.gold) >= ex.candidates.size()) {
      throw ValidationError("task " + name + ": gold index out of range");
    }
  }
  if (chance_level && !(*chance_level >= 0.0)) throw ValidationError("task " + name + ": negative chance level");
}

RenderedExample render(const EvalTask& task, std::size_t prompt_index, const TaskExample& example) {
  if (prompt_index >= task.prompts.size()) throw Error("task " + task.name + ": prompt index out of range");
  const std::string& tmpl = task.prompts[prompt_index];
  const std::size_t cut = tmpl.find(kCandidate);
  if (cut == std::string::npos) throw ValidationError("task " + task.name + ": prompt without {candidate}");
  RenderedExample r;
  r.input_text = replace_all(tmpl.substr(0, cut), kInput, example.input);
  const std::string tail = replace_all(tmpl.substr(cut + kCandidate.size()), kInput, example.input);
  for (const auto& c : example.candidates) r.candidate_texts.push_back(c + tail);
  r.gold_index = example.gold;
  return r;
}

double chance_level(const EvalTask& task) {
  if (task.chance_level) return *task.chance_level;
  if (task.examples.empty()) throw Error("task " + task.name + ": chance level undefined without examples");
  double sum = 0.0;
  for (const auto& ex : task.examples) {
    if (ex.candidates.empty()) throw Error("task " + task.name + ": chance level undefined for empty candidates");
    sum += 1.0 / static_cast<double>(ex.candidates.size());
  }
  return sum / static_cast<double>(task.examples.size());
}

nlohmann::json task_to_json(const EvalTask& task) {
  nlohmann::ordered_json j;
  j["name"] = task.name;
  j["prompts"] = task.prompts;
  auto& exs = j["examples"] = nlohmann::ordered_json::array();
  for (const auto& ex : task.examples) {
    nlohmann::ordered_json e;
    e["input"] = ex.input;
    e["candidates"] = ex.candidates;
    e["gold"] = ex.gold;
    exs.push_back(e);
  }
  j["chance_level"] = task.chance_level ? nlohmann::ordered_json(*task.chance_level) : nullptr;
  return nlohmann::json::parse(j.dump());
}

EvalTask task_from_json(const nlohmann::json& j) {
  check_keys(j, {"name", "prompts", "examples", "chance_level"}, "task");
  EvalTask t;
  try {
    t.name = j.at("name").get<std::string>();
    t.prompts = j.at("prompts").get<std::vector<std::string>>();
    for (const auto& e : j.at("examples")) {
      check_keys(e, {"input", "candidates", "gold"}, "task " + t.name + " example");
      t.examples.push_back({e.at("input").get<std::string>(), e.at("candidates").get<std::vector<std::string>>(),
                            e.at("gold").get<int>()});
    }
    if (j.contains("chance_level") && !j["chance_level"].is_null()) t.chance_level = j["chance_level"].get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("task " + t.name + ": " + e.what());
  }
  t.validate();
  return t;
}

std::vector<EvalTask> load_tasks(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open task file " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
  std::vector<EvalTask> tasks;
  if (j.is_array()) {
    for (const auto& t : j) tasks.push_back(task_from_json(t));
  } else {
    tasks.push_back(task_from_json(j));
  }
  return tasks;
}

void save_tasks(const std::vector<EvalTask>& tasks, const std::filesystem::path& path) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& t : tasks) arr.push_back(task_to_json(t));
  std::ofstream out(path);
  if (!out) throw Error("cannot write task file " + path.string());
  out << arr.dump(1) << '\n';
}

namespace {

constexpr int kSym = PatternGrammar::kSymbols;

char sym(int i) { return PatternGrammar::symbol(((i % kSym) + kSym) % kSym); }

/// Run of `len` symbols starting at `start`, stepping by one.
std::string run(int start, int len) {
  std::string s;
  for (int i = 0; i < len; ++i) s.push_back(sym(start + i));
  return s;
}

/// Gold answer first in `pool`, then distractors drawn from `pool` minus
/// `forbidden`; candidates are shuffled and the gold index recorded.
TaskExample choice(const std::string& input, const std::string& gold, std::vector<std::string> pool,
                   const std::set<std::string>& forbidden, std::size_t n_choices, Rng& rng) {
  std::vector<std::string> options;
  for (auto& p : pool)
    if (!forbidden.count(p) && p != gold) options.push_back(p);
  rng.shuffle(std::span<std::string>(options));
  std::vector<std::string> cands{gold};
  for (std::size_t i = 0; i + 1 < n_choices && i < options.size(); ++i) cands.push_back(options[i]);
  rng.shuffle(std::span<std::string>(cands));
  const auto it = std::find(cands.begin(), cands.end(), gold);
  return {input, cands, static_cast<int>(it - cands.begin())};
}

std::vector<std::string> single_symbols() {
  std::vector<std::string> out;
  for (int i = 0; i < kSym; ++i) out.emplace_back(1, sym(i));
  return out;
}

}  // namespace

ToySuite make_toy_suite(const PatternGrammar&, std::uint64_t seed, std::size_t examples_per_task) {
  Rng rng(seed);
  const auto letters = single_symbols();
  auto s = [](int i) { return std::string(1, sym(i)); };

  EvalTask next{"successor",
                {"{input} then {candidate}", "after {input} comes {candidate}", "{input} -> {candidate}"},
                {},
                0.25};
  EvalTask prev{"predecessor",
                {"before {input} is {candidate}", "{candidate} precedes {input}?", "{input} <- {candidate}"},
                {},
                0.25};
  EvalTask gap{"missing",
               {"fill {input} with {candidate}", "{input} gap is {candidate}", "in {input} the blank is {candidate}"},
               {},
               0.25};
  EvalTask pair{"continue_two",
                {"{input} continues {candidate}", "extend {input} by {candidate}", "{input} and then {candidate}"},
                {},
                1.0 / 3.0};

  for (std::size_t i = 0; i < examples_per_task; ++i) {
    int x = static_cast<int>(rng.below(kSym));
    // Most likely successor is +1; +1 and +2 are both grammatical.
    next.examples.push_back(choice(run(x, 3), s(x + 3), letters, {s(x + 4)}, 4, rng));
    x = static_cast<int>(rng.below(kSym));
    prev.examples.push_back(choice(run(x, 3), s(x - 1), letters, {s(x - 2)}, 4, rng));
    x = static_cast<int>(rng.below(kSym));
    const std::string blank = std::string(1, sym(x)) + "_" + run(x + 2, 2);
    gap.examples.push_back(choice(blank, s(x + 1), letters, {}, 4, rng));
    x = static_cast<int>(rng.below(kSym));
    // Two-symbol continuations; distractors contain at least one illegal step.
    std::vector<std::string> pool;
    for (int a = 0; a < kSym; ++a)
      for (int b = 0; b < kSym; ++b) pool.push_back(s(a) + s(b));
    std::set<std::string> legal{s(x + 3) + s(x + 4), s(x + 3) + s(x + 5), s(x + 4) + s(x + 5), s(x + 4) + s(x + 6)};
    pair.examples.push_back(choice(run(x, 3), s(x + 3) + s(x + 4), pool, legal, 3, rng));
  }
  ToySuite suite;
  suite.train_tasks = {next, prev, gap};
  suite.heldout_tasks = {pair};
  return suite;
}

}  // namespace ptlab
