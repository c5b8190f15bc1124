#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include <json.hpp>

#include "ptlab/data/objectives.hpp"
#include "ptlab/eval/task.hpp"
#include "ptlab/model/transformer.hpp"
#include "ptlab/train/checkpoint.hpp"

namespace ptlab {

enum class ScoringPolicy { sum_logprob, mean_logprob };
enum class AggregationPolicy { median_then_mean, single_prompt_mean };

std::string to_string(ScoringPolicy p);
ScoringPolicy parse_scoring_policy(const std::string& text);
std::string to_string(AggregationPolicy p);
AggregationPolicy parse_aggregation_policy(const std::string& text);

struct EvalOptions {
  ScoringPolicy scoring = ScoringPolicy::sum_logprob;
  /// Decoder length available to input, separator and candidate.
  std::size_t seq_len = 64;
  ComputeOptions compute;
  /// A task fails when more of its examples than this cannot be rendered.
  double max_unusable_fraction = 0.1;
};

/// Byte tokens of `text`, checked against the model vocabulary.
std::vector<int> encode_text(const std::string& text, const ModelConfig& config);

/// Per-row candidate scores from logits of a prompted batch built with
/// terminate = false: the summed (or averaged) log-probabilities of the
/// trained positions of each row.
std::vector<double> scores_from_logits(const PackedBatch& batch, const Tensor& logits, ScoringPolicy policy);

/// Scores every candidate continuation of one input in a single batch.
/// Throws "render too long" when a candidate does not fit.
std::vector<double> score_candidates(const Checkpoint& checkpoint, const std::vector<int>& input,
                                     const std::vector<std::vector<int>>& candidates, const EvalOptions& options);

double score_candidate(const Checkpoint& checkpoint, const std::string& input_text, const std::string& candidate_text,
                       const EvalOptions& options = {});

/// Index of the best score; ties go to the lowest index.
std::size_t argmax_first(const std::vector<double>& scores);

/// Accuracy of argmax prediction over the task's examples under one prompt.
/// Examples that do not fit are skipped; too many of them is an error.
double rank_classify(const Checkpoint& checkpoint, const EvalTask& task, std::size_t prompt_index,
                     const EvalOptions& options = {});

struct TaskResult {
  std::string name;
  /// Accuracy per prompt.
  std::vector<double> accuracy;
  double chance_level = 0.0;
};

struct EvalReport {
  std::vector<TaskResult> tasks;
  AggregationPolicy policy = AggregationPolicy::median_then_mean;
  ScoringPolicy scoring = ScoringPolicy::sum_logprob;
  double aggregate = 0.0;
  double median_then_mean = 0.0;
  double single_prompt_mean = 0.0;
  /// Per task: min and max accuracy across prompts.
  std::vector<std::pair<double, double>> spread;
  double random_baseline = 0.0;
};

double median(std::vector<double> values);

/// Aggregates a task x prompt accuracy matrix. single_prompt_mean uses each
/// task's first prompt.
EvalReport aggregate(const std::vector<TaskResult>& results, AggregationPolicy policy);

/// Per-task chance levels aggregated under `policy`.
double random_baseline(const std::vector<EvalTask>& tasks, AggregationPolicy policy);

/// Every prompt of every task.
EvalReport evaluate(const Checkpoint& checkpoint, const std::vector<EvalTask>& tasks, const EvalOptions& options = {},
                    AggregationPolicy policy = AggregationPolicy::median_then_mean);

nlohmann::ordered_json report_to_json(const EvalReport& report);
EvalReport report_from_json(const nlohmann::json& j);

}  // namespace ptlab
