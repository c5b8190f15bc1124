#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ptlab/core/error.hpp"
#include "ptlab/data/corpus.hpp"
#include "ptlab/data/vocab.hpp"
#include "ptlab/eval/task.hpp"
#include "ptlab/model/transformer.hpp"
#include "ptlab/train/checkpoint.hpp"

namespace ptlab {

struct MetricRecord {
  enum class Kind { train, validation };
  Kind kind = Kind::train;
  std::string stage;
  /// Steps completed in this stage when the record was taken.
  std::int64_t step = 0;
  double lr = 0.0;
  double cross_entropy = 0.0;
  double z_loss = 0.0;
  /// Mean |log Z| over trained positions (train records only).
  double mean_abs_log_z = 0.0;
  /// Cumulative over the checkpoint's whole history.
  std::int64_t tokens_seen = 0;
  std::int64_t tokens_trained = 0;
  /// Tokens seen within the current stage.
  std::int64_t stage_tokens_seen = 0;
};

nlohmann::ordered_json to_json(const MetricRecord& record);
MetricRecord metric_from_json(const nlohmann::json& j);

using MetricsSink = std::function<void(const MetricRecord&)>;

/// Appends one JSON line per record to `path`.
class JsonlMetricsWriter {
 public:
  explicit JsonlMetricsWriter(const std::filesystem::path& path);
  void operator()(const MetricRecord& record);
  MetricsSink sink();

 private:
  std::ofstream out_;
};

std::vector<MetricRecord> read_metrics(const std::filesystem::path& path);

struct RunOptions {
  ComputeOptions compute;
  /// Batches in each validation pass over the held-out slice.
  std::size_t validation_batches = 4;
  /// Fixed seed for validation batches, so every run scores the same data.
  std::uint64_t validation_seed = 0x7a11da7e;
  /// Validation runs at the start and every `validation_interval` of the
  /// stage budget.
  double validation_interval = 0.05;
  /// Cumulative tokens-seen marks; `on_mark` receives a snapshot when a step
  /// first reaches each one.
  std::vector<std::int64_t> marks;
  std::function<void(const Checkpoint&, std::int64_t mark)> on_mark;
};

/// Raised when the loss stops being finite. Carries the checkpoint as it was
/// before the failing step.
class TrainingAborted : public Error {
 public:
  TrainingAborted(const std::string& what, Checkpoint diagnostic)
      : Error(what), diagnostic_(std::move(diagnostic)) {}
  const Checkpoint& diagnostic() const { return diagnostic_; }

 private:
  Checkpoint diagnostic_;
};

/// Pretrains `start` for one stage. The stage architecture must match the
/// checkpoint's (see convert). The optimizer starts fresh every stage.
Checkpoint run_stage(const Checkpoint& start, const TrainingStage& stage, const Corpus& corpus,
                     const RunOptions& options = {}, const MetricsSink& sink = {});

enum class ConversionMode { mask_switch, empty_encoder_experimental };

/// mask_switch: CD <-> ND, parameters untouched. empty_encoder_experimental:
/// ED -> CD, keeping the encoder and feeding it nothing. Optimizer state is
/// dropped; counters and history carry over.
Checkpoint convert(const Checkpoint& checkpoint, ArchitectureKind new_arch, ConversionMode mode);

/// Stage fields shared by the adaptation helpers.
struct StageSettings {
  LrSchedule schedule;
  std::uint64_t seed = 0;
  std::size_t seq_len = 64;
  std::size_t batch_size = 8;
  double z_loss = 1e-4;
  double mask_rate = 0.15;
  double mean_span = 3.0;
};

TrainingStage make_stage(ArchitectureKind arch, ObjectiveKind objective, std::int64_t budget,
                         const StageSettings& settings);

/// Language-modeling adaptation: ND:MLM -> mask switch -> CD:FLM.
Checkpoint adapt_lm(const Checkpoint& source, std::int64_t flm_budget, const Corpus& corpus,
                    const StageSettings& settings = {}, const RunOptions& options = {},
                    const MetricsSink& sink = {});

/// Non-causal MLM adaptation: CD:FLM -> mask switch -> ND:MLM.
Checkpoint adapt_nc_mlm(const Checkpoint& source, std::int64_t mlm_budget, const Corpus& corpus,
                        const StageSettings& settings = {}, const RunOptions& options = {},
                        const MetricsSink& sink = {});

struct FinetuneSettings {
  LrSchedule schedule = LrSchedule::fixed(0.001);
  double dropout = 0.1;
  std::uint64_t seed = 0;
  std::size_t seq_len = 64;
  std::size_t batch_size = 8;
  double z_loss = 1e-4;
  /// Sampling weight of a task is min(rendered pairs, cap).
  std::size_t per_task_cap = 500000;
  /// Trailing fraction of each task's examples kept for validation.
  double validation_fraction = 0.1;
  /// Finetuning fails when more rendered pairs than this overflow seq_len.
  double max_skipped_fraction = 0.1;
};

/// Multitask prompted finetuning in the checkpoint's own architecture. The
/// rendered input is the prefix or encoder stream; only answer tokens train.
Checkpoint multitask_finetune(const Checkpoint& start, const std::vector<EvalTask>& mixture, std::int64_t budget,
                              const FinetuneSettings& settings = {}, const RunOptions& options = {},
                              const MetricsSink& sink = {});

/// Training batch for `step` of a pretraining stage; exposed for tests and
/// batch dumps. Uses the same corpus cursor as run_stage.
PackedBatch pretraining_batch(const TrainingStage& stage, const Corpus& corpus, const Vocab& vocab,
                              std::int64_t step);

}  // namespace ptlab
