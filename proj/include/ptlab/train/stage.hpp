#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include <json.hpp>

#include "ptlab/data/batch.hpp"
#include "ptlab/model/config.hpp"
#include "ptlab/optim/adafactor.hpp"

namespace ptlab {

struct BudgetLedger {
  std::int64_t tokens_seen = 0;
  std::int64_t tokens_trained = 0;
  std::int64_t steps = 0;

  BudgetLedger& operator+=(const BudgetLedger& other);
  bool operator==(const BudgetLedger&) const = default;
};

/// One training stage. Budgets count tokens seen, never steps.
///
/// seq_len is the decoder example length: FLM rows, PLM examples (a packed
/// decoder-only row holds two), the MLM input-plus-target budget, or the
/// prompted row length.
struct TrainingStage {
  ArchitectureKind arch = ArchitectureKind::causal_decoder;
  ObjectiveKind objective;
  std::int64_t token_budget_seen = 0;
  LrSchedule schedule;
  double dropout = 0.0;
  std::uint64_t seed = 0;
  std::size_t seq_len = 64;
  std::size_t batch_size = 8;
  double z_loss = 1e-4;

  /// "CD:FLM" style label.
  std::string label() const;
  /// Throws ValidationError. Dropout is only allowed for finetuning.
  void validate() const;
  bool operator==(const TrainingStage&) const = default;
};

/// What a checkpoint remembers about each stage that produced it.
struct StageSummary {
  TrainingStage stage;
  BudgetLedger ledger;
  /// Last validation cross-entropy, absent when none was computed.
  std::optional<double> final_validation_loss;
  bool operator==(const StageSummary&) const = default;
};

nlohmann::ordered_json to_json(const ModelConfig& config);
/// Fields missing from `j` keep their value in `base`; unknown fields are errors.
ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig base = {});

nlohmann::ordered_json to_json(const ObjectiveKind& objective);
ObjectiveKind objective_from_json(const nlohmann::json& j);

nlohmann::ordered_json to_json(const LrSchedule& schedule);
LrSchedule schedule_from_json(const nlohmann::json& j);

nlohmann::ordered_json to_json(const TrainingStage& stage);
TrainingStage stage_from_json(const nlohmann::json& j, const TrainingStage& base = {});

nlohmann::ordered_json to_json(const BudgetLedger& ledger);
BudgetLedger ledger_from_json(const nlohmann::json& j);

nlohmann::ordered_json to_json(const StageSummary& summary);
StageSummary summary_from_json(const nlohmann::json& j);

}  // namespace ptlab
