#pragma once

#include <cstdint>
#include <span>

#include "ptlab/data/batch.hpp"
#include "ptlab/model/config.hpp"
#include "ptlab/model/params.hpp"
#include "ptlab/numeric/tensor.hpp"

namespace ptlab {

enum class Mode { train, infer };

struct ComputeOptions {
  Precision precision = Precision::high;
  /// Worker threads for attention; results are identical for any value.
  int threads = 1;
};

/// Deterministic initialization: N(0, d_model^-1/2) projections, N(0, 1)
/// embeddings, unit gains, zero relative-bias tables.
ParamTree init_params(const ModelConfig& config, ArchitectureKind arch, std::uint64_t seed,
                      Precision precision = Precision::high);

/// Exact element count of the tree init_params would build.
std::int64_t count_params(const ModelConfig& config, ArchitectureKind arch);

/// Logits [positions x vocab] at every decoder position.
Tensor forward(const ParamTree& params, const ModelConfig& config, ArchitectureKind arch,
               const PackedBatch& batch, Mode mode, std::uint64_t dropout_seed,
               const ComputeOptions& options = {});

struct LossReport {
  double cross_entropy = 0.0;
  double z_loss = 0.0;
  std::int64_t tokens_trained = 0;
  /// Diagnostic: mean |log Z| over trained positions.
  double mean_abs_log_z = 0.0;
};

/// Mean cross-entropy and z-loss (coefficient * mean log^2 Z) over loss_mask positions.
LossReport loss_and_zloss(const Tensor& logits, std::span<const int> targets,
                          std::span<const std::uint8_t> loss_mask, double z_coefficient);

/// Gradient of cross_entropy + z_loss with respect to logits.
Tensor loss_gradient(const Tensor& logits, std::span<const int> targets,
                     std::span<const std::uint8_t> loss_mask, double z_coefficient);

struct TrainStep {
  LossReport loss;
  ParamTree grads;
};

/// Forward, loss and hand-derived backward through the whole model.
TrainStep loss_and_gradients(const ParamTree& params, const ModelConfig& config,
                             ArchitectureKind arch, const PackedBatch& batch, Mode mode,
                             std::uint64_t dropout_seed, double z_coefficient,
                             const ComputeOptions& options = {});

}  // namespace ptlab
