#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ptlab/core/error.hpp"
#include "ptlab/data/corpus.hpp"

namespace ptlab {

struct TaskExample {
  std::string input;
  std::vector<std::string> candidates;
  int gold = 0;
};

/// Prompted classification task. Each prompt template contains "{input}"
/// and exactly one "{candidate}"; the text before "{candidate}" is the model
/// input and the rest, starting with the candidate, is what gets scored.
struct EvalTask {
  std::string name;
  std::vector<std::string> prompts;
  std::vector<TaskExample> examples;
  /// Chance accuracy; derived from candidate counts when absent.
  std::optional<double> chance_level;

  /// Throws ValidationError on malformed templates or examples.
  void validate() const;
};

struct RenderedExample {
  std::string input_text;
  std::vector<std::string> candidate_texts;
  int gold_index = 0;
};

RenderedExample render(const EvalTask& task, std::size_t prompt_index, const TaskExample& example);

/// Explicit chance level, else the mean of 1/n_candidates over examples.
double chance_level(const EvalTask& task);

nlohmann::json task_to_json(const EvalTask& task);
/// Unknown fields are errors.
EvalTask task_from_json(const nlohmann::json& j);

/// A task file holds either one task object or an array of them.
std::vector<EvalTask> load_tasks(const std::filesystem::path& path);
void save_tasks(const std::vector<EvalTask>& tasks, const std::filesystem::path& path);

/// Prompted tasks derived from the pattern grammar: three finetuning tasks
/// and one held-out task that never appears in the finetuning mixture.
struct ToySuite {
  std::vector<EvalTask> train_tasks;
  std::vector<EvalTask> heldout_tasks;
};

ToySuite make_toy_suite(const PatternGrammar& grammar, std::uint64_t seed, std::size_t examples_per_task);

}  // namespace ptlab
