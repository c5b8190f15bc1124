#include "ptlab/train/stage.hpp"

#include <cmath>

#include "ptlab/core/json_fields.hpp"

namespace ptlab {

using nlohmann::json;
using nlohmann::ordered_json;

BudgetLedger& BudgetLedger::operator+=(const BudgetLedger& other) {
  tokens_seen += other.tokens_seen;
  tokens_trained += other.tokens_trained;
  steps += other.steps;
  return *this;
}

std::string TrainingStage::label() const { return short_name(arch) + ":" + short_name(objective.kind); }

void TrainingStage::validate() const {
  const std::string where = "stage " + label();
  objective.validate();
  schedule.validate();
  if (token_budget_seen < 0) throw ValidationError(where + ": negative token budget");
  if (seq_len < 2) throw ValidationError(where + ": seq_len must be at least 2");
  if (batch_size == 0) throw ValidationError(where + ": batch_size must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ValidationError(where + ": dropout must lie in [0, 1)");
  if (dropout != 0.0 && objective.kind != Objective::multitask) {
    throw ValidationError(where + ": dropout is only allowed for multitask finetuning");
  }
  if (!(z_loss >= 0.0)) throw ValidationError(where + ": z_loss must be non-negative");
  if (objective.kind == Objective::flm && arch != ArchitectureKind::causal_decoder) {
    throw ValidationError(where + ": FLM needs a causal decoder");
  }
  if (objective.kind == Objective::plm && arch == ArchitectureKind::causal_decoder) {
    throw ValidationError(where + ": PLM needs a prefix (ND or ED)");
  }
  if (objective.kind == Objective::plm && batch_size % 2 != 0) {
    throw ValidationError(where + ": PLM packs two examples per row and needs an even batch_size");
  }
}

ordered_json to_json(const ModelConfig& c) {
  ordered_json j;
  j["vocab_size"] = c.vocab_size;
  j["d_model"] = c.d_model;
  j["n_heads"] = c.n_heads;
  j["d_ff"] = c.d_ff;
  j["decoder_layers"] = c.decoder_layers;
  j["encoder_layers"] = c.encoder_layers;
  j["tied_embeddings"] = c.tied_embeddings;
  j["rel_bias_buckets"] = c.rel_bias.n_buckets;
  j["rel_bias_max_distance"] = c.rel_bias.max_distance;
  j["dropout_rate"] = c.dropout_rate;
  j["norm_epsilon"] = c.norm_epsilon;
  return j;
}

ModelConfig model_config_from_json(const json& j, ModelConfig c) {
  const std::string w = "model config";
  check_keys(j, {"vocab_size", "d_model", "n_heads", "d_ff", "decoder_layers", "encoder_layers", "tied_embeddings",
                 "rel_bias_buckets", "rel_bias_max_distance", "dropout_rate", "norm_epsilon"},
             w);
  optional_field(j, "vocab_size", w, c.vocab_size);
  optional_field(j, "d_model", w, c.d_model);
  optional_field(j, "n_heads", w, c.n_heads);
  optional_field(j, "d_ff", w, c.d_ff);
  optional_field(j, "decoder_layers", w, c.decoder_layers);
  optional_field(j, "encoder_layers", w, c.encoder_layers);
  optional_field(j, "tied_embeddings", w, c.tied_embeddings);
  optional_field(j, "rel_bias_buckets", w, c.rel_bias.n_buckets);
  optional_field(j, "rel_bias_max_distance", w, c.rel_bias.max_distance);
  optional_field(j, "dropout_rate", w, c.dropout_rate);
  optional_field(j, "norm_epsilon", w, c.norm_epsilon);
  return c;
}

ordered_json to_json(const ObjectiveKind& o) {
  ordered_json j;
  j["kind"] = short_name(o.kind);
  if (o.kind == Objective::mlm) {
    j["mask_rate"] = o.mask_rate;
    j["mean_span"] = o.mean_span;
  }
  return j;
}

ObjectiveKind objective_from_json(const json& j) {
  if (j.is_string()) return parse_objective(j.get<std::string>());
  check_keys(j, {"kind", "mask_rate", "mean_span"}, "objective");
  ObjectiveKind o = parse_objective(field<std::string>(j, "kind", "objective"));
  optional_field(j, "mask_rate", "objective", o.mask_rate);
  optional_field(j, "mean_span", "objective", o.mean_span);
  o.validate();
  return o;
}

ordered_json to_json(const LrSchedule& s) {
  ordered_json j;
  if (s.kind == LrSchedule::Kind::inverse_sqrt) {
    j["kind"] = "inverse_sqrt";
    j["warmup_floor"] = s.warmup_floor;
  } else {
    j["kind"] = "fixed";
    j["value"] = s.value;
  }
  return j;
}

LrSchedule schedule_from_json(const json& j) {
  const std::string w = "schedule";
  check_keys(j, {"kind", "warmup_floor", "value"}, w);
  const auto kind = field<std::string>(j, "kind", w);
  LrSchedule s;
  if (kind == "inverse_sqrt") {
    if (j.contains("value")) throw ValidationError(w + ": inverse_sqrt takes no value");
    s = LrSchedule::inverse_sqrt();
    optional_field(j, "warmup_floor", w, s.warmup_floor);
  } else if (kind == "fixed") {
    if (j.contains("warmup_floor")) throw ValidationError(w + ": fixed takes no warmup_floor");
    s = LrSchedule::fixed(field<double>(j, "value", w));
  } else {
    throw ValidationError(w + ": unknown kind '" + kind + "' (expected inverse_sqrt or fixed)");
  }
  s.validate();
  return s;
}

ordered_json to_json(const TrainingStage& s) {
  ordered_json j;
  j["arch"] = short_name(s.arch);
  j["objective"] = to_json(s.objective);
  j["token_budget_seen"] = s.token_budget_seen;
  j["schedule"] = to_json(s.schedule);
  j["dropout"] = s.dropout;
  j["seed"] = s.seed;
  j["seq_len"] = s.seq_len;
  j["batch_size"] = s.batch_size;
  j["z_loss"] = s.z_loss;
  return j;
}

TrainingStage stage_from_json(const json& j, const TrainingStage& base) {
  const std::string w = "stage";
  check_keys(j, {"arch", "objective", "token_budget_seen", "schedule", "dropout", "seed", "seq_len", "batch_size",
                 "z_loss"},
             w);
  TrainingStage s = base;
  s.arch = parse_architecture(field<std::string>(j, "arch", w));
  s.objective = objective_from_json(j.at("objective"));
  s.token_budget_seen = field<std::int64_t>(j, "token_budget_seen", w);
  if (j.contains("schedule")) s.schedule = schedule_from_json(j["schedule"]);
  optional_field(j, "dropout", w, s.dropout);
  optional_field(j, "seed", w, s.seed);
  optional_field(j, "seq_len", w, s.seq_len);
  optional_field(j, "batch_size", w, s.batch_size);
  optional_field(j, "z_loss", w, s.z_loss);
  return s;
}

ordered_json to_json(const BudgetLedger& l) {
  ordered_json j;
  j["tokens_seen"] = l.tokens_seen;
  j["tokens_trained"] = l.tokens_trained;
  j["steps"] = l.steps;
  return j;
}

BudgetLedger ledger_from_json(const json& j) {
  check_keys(j, {"tokens_seen", "tokens_trained", "steps"}, "ledger");
  return {field<std::int64_t>(j, "tokens_seen", "ledger"), field<std::int64_t>(j, "tokens_trained", "ledger"),
          field<std::int64_t>(j, "steps", "ledger")};
}

ordered_json to_json(const StageSummary& s) {
  ordered_json j;
  j["label"] = s.stage.label();
  j["stage"] = to_json(s.stage);
  j["ledger"] = to_json(s.ledger);
  j["final_validation_loss"] = s.final_validation_loss ? ordered_json(*s.final_validation_loss) : ordered_json();
  return j;
}

StageSummary summary_from_json(const json& j) {
  check_keys(j, {"label", "stage", "ledger", "final_validation_loss"}, "stage summary");
  StageSummary s;
  s.stage = stage_from_json(j.at("stage"));
  s.ledger = ledger_from_json(j.at("ledger"));
  if (j.contains("final_validation_loss") && !j["final_validation_loss"].is_null()) {
    s.final_validation_loss = field<double>(j, "final_validation_loss", "stage summary");
  }
  return s;
}

}  // namespace ptlab
