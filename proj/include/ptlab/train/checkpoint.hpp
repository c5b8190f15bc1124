#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ptlab/data/batch.hpp"
#include "ptlab/model/params.hpp"
#include "ptlab/optim/adafactor.hpp"
#include "ptlab/train/stage.hpp"

namespace ptlab {

inline constexpr int kCheckpointFormatVersion = 1;

struct CheckpointMeta {
  /// Architecture batches are built for. An encoder-decoder tree converted
  /// with an empty encoder reports CD here and sets empty_encoder.
  ArchitectureKind arch = ArchitectureKind::causal_decoder;
  /// Objective of the last stage; absent for a fresh initialization.
  std::optional<ObjectiveKind> objective;
  BudgetLedger cumulative;
  std::vector<StageSummary> stage_history;
  ModelConfig config;
  int format_version = kCheckpointFormatVersion;
  bool empty_encoder = false;
  Precision precision = Precision::high;
  std::uint64_t init_seed = 0;

  bool operator==(const CheckpointMeta&) const = default;
};

struct Checkpoint {
  ParamTree params;
  std::optional<OptimizerState> optimizer_state;
  CheckpointMeta meta;

  /// Bitwise comparison of params, optimizer state and metadata.
  bool identical(const Checkpoint& other) const;
};

/// Freshly initialized model with an empty history.
Checkpoint fresh_checkpoint(const ModelConfig& config, ArchitectureKind arch, std::uint64_t seed,
                            Precision precision = Precision::high);

/// Architecture the model itself runs as (ED for an empty-encoder conversion).
ArchitectureKind model_arch(const CheckpointMeta& meta);

/// Adapts a batch built for meta.arch to what the model expects: an
/// empty-encoder checkpoint gets a zero-length encoder stream.
void route_batch(PackedBatch& batch, const CheckpointMeta& meta);

nlohmann::ordered_json meta_to_json(const CheckpointMeta& meta);
CheckpointMeta meta_from_json(const nlohmann::json& j);

/// Binary layout: the 8-byte magic "PTLCKPT\n", a little-endian u64 header
/// length, a JSON header, then one length-prefixed block of little-endian
/// doubles per tensor: parameters in sorted path order, followed by the
/// optimizer slots listed in the header.
std::string serialize_checkpoint(const Checkpoint& checkpoint);
Checkpoint deserialize_checkpoint(std::string_view bytes);

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// Header only, for inspection without reading tensors into memory.
nlohmann::json read_checkpoint_header(const std::filesystem::path& path);

}  // namespace ptlab
