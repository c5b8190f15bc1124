#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "ptlab/eval/scoring.hpp"
#include "ptlab/train/trainer.hpp"

namespace ptlab {

inline constexpr int kSpecFormatVersion = 1;

/// 64-bit FNV-1a.
std::uint64_t fnv1a(std::string_view bytes);
std::string hex64(std::uint64_t value);
std::string file_hash(const std::filesystem::path& path);

struct CorpusSpec {
  enum class Kind { grammar, text };
  Kind kind = Kind::grammar;
  std::uint64_t seed = 0;
  std::size_t documents = 2000;
  double step_one = 0.8;
  /// Text file with blank-line separated documents (kind text).
  std::filesystem::path path;
};

struct TaskSpec {
  enum class Kind { none, toy, files };
  Kind kind = Kind::none;
  std::uint64_t seed = 0;
  std::size_t examples_per_task = 100;
  std::vector<std::filesystem::path> finetune;
  std::vector<std::filesystem::path> eval;
};

struct EvalSpec {
  /// Fractions of the cumulative pretraining budget.
  std::vector<double> marks{0.25, 0.5, 1.0};
  AggregationPolicy policy = AggregationPolicy::median_then_mean;
  ScoringPolicy scoring = ScoringPolicy::sum_logprob;
  std::size_t seq_len = 64;
  /// Also evaluate after the last stage (useful after finetuning).
  bool final = true;
};

enum class StageConversion { automatic, mask_switch, empty_encoder };

struct SpecStage {
  TrainingStage stage;
  StageConversion conversion = StageConversion::automatic;
  /// Finetuning only.
  std::size_t per_task_cap = 500000;
};

struct ExperimentSpec {
  int format_version = kSpecFormatVersion;
  std::string name;
  ModelConfig model;
  Precision precision = Precision::high;
  std::uint64_t init_seed = 0;
  CorpusSpec corpus;
  TaskSpec tasks;
  EvalSpec eval;
  std::vector<SpecStage> stages;

  /// Field-level ValidationError, including stage-boundary convertibility.
  void validate() const;
  /// Total budget of the non-finetuning stages.
  std::int64_t pretraining_budget() const;
};

nlohmann::ordered_json spec_to_json(const ExperimentSpec& spec);
/// Relative paths are resolved against `base_dir`.
ExperimentSpec spec_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
ExperimentSpec load_spec(const std::filesystem::path& path);

/// Replaces the init seed and every stage seed by values derived from `seed`.
void override_seeds(ExperimentSpec& spec, std::uint64_t seed);

struct RunSettings {
  ComputeOptions compute;
  std::optional<Precision> precision;
  std::optional<std::uint64_t> seed_override;
  /// Replace an existing run directory instead of refusing.
  bool overwrite = false;
};

struct StageRecord {
  std::string label;
  std::string checkpoint;
  std::string metrics;
  std::int64_t steps = 0;
  std::int64_t tokens_seen = 0;
  std::optional<double> final_validation_loss;
  double wall_seconds = 0.0;
};

struct EvalRecord {
  /// Cumulative tokens seen when evaluated.
  std::int64_t tokens_seen = 0;
  /// "25%" style mark, or "final".
  std::string mark;
  std::string report;
};

/// Paths are relative to the run directory.
struct RunManifest {
  std::string name;
  std::string spec_hash;
  std::string status = "complete";
  std::string architecture;
  std::string objective;
  std::vector<StageRecord> stages;
  std::vector<EvalRecord> evals;
  /// FNV-1a of every written file, keyed by relative path.
  std::vector<std::pair<std::string, std::string>> file_hashes;
  double wall_seconds = 0.0;
  std::filesystem::path run_dir;
};

nlohmann::ordered_json manifest_to_json(const RunManifest& manifest);
RunManifest manifest_from_json(const nlohmann::json& j, const std::filesystem::path& run_dir);
RunManifest load_manifest(const std::filesystem::path& path);
/// Manifest JSON without wall-clock fields.
std::string manifest_fingerprint(const RunManifest& manifest);

Corpus materialize_corpus(const CorpusSpec& spec, const Vocab& vocab);
ToySuite materialize_tasks(const TaskSpec& spec);

/// Runs every stage of `spec` under out_root/<name>/ and writes manifest.json.
RunManifest cmd_run(const ExperimentSpec& spec, const std::filesystem::path& out_root, const RunSettings& settings);

struct MatrixSpec {
  int format_version = kSpecFormatVersion;
  std::string name;
  ModelConfig model;
  Precision precision = Precision::high;
  std::uint64_t init_seed = 0;
  CorpusSpec corpus;
  TaskSpec tasks;
  EvalSpec eval;
  /// "CD:FLM" style labels.
  std::vector<std::string> pairs;
  /// Template for every run's single stage; arch and objective come from the pair.
  TrainingStage stage;
};

/// Throws ValidationError for pairs outside CD:{FLM,MLM}, ND:{PLM,MLM}, ED:{PLM,MLM}.
void check_matrix_pair(ArchitectureKind arch, Objective objective);
std::vector<std::string> all_matrix_pairs();

MatrixSpec matrix_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
MatrixSpec load_matrix(const std::filesystem::path& path);
/// The single-stage experiment behind one matrix pair.
ExperimentSpec matrix_run_spec(const MatrixSpec& matrix, const std::string& pair);

/// Runs every pair and writes out_root/<name>/comparison.csv with one row per
/// run and eval mark.
std::vector<RunManifest> cmd_matrix(const MatrixSpec& matrix, const std::filesystem::path& out_root,
                                    const RunSettings& settings);

/// Writes loss_curves.csv and eval_summary.csv into out_dir.
void cmd_report(const std::vector<std::filesystem::path>& manifests, const std::filesystem::path& out_dir);

/// Evaluates a checkpoint file against a task file.
EvalReport cmd_eval(const std::filesystem::path& checkpoint, const std::filesystem::path& tasks,
                    const EvalOptions& options, AggregationPolicy policy);

/// Header metadata plus parameter totals.
nlohmann::ordered_json cmd_inspect(const std::filesystem::path& checkpoint);

}  // namespace ptlab
