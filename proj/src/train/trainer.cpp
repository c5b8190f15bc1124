#include "ptlab/train/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "ptlab/core/json_fields.hpp"
#include "ptlab/data/objectives.hpp"

namespace ptlab {

using nlohmann::json;
using nlohmann::ordered_json;

ordered_json to_json(const MetricRecord& r) {
  ordered_json j;
  j["kind"] = r.kind == MetricRecord::Kind::train ? "train" : "validation";
  j["stage"] = r.stage;
  j["step"] = r.step;
  j["lr"] = r.lr;
  j["cross_entropy"] = r.cross_entropy;
  j["z_loss"] = r.z_loss;
  j["mean_abs_log_z"] = r.mean_abs_log_z;
  j["tokens_seen"] = r.tokens_seen;
  j["tokens_trained"] = r.tokens_trained;
  j["stage_tokens_seen"] = r.stage_tokens_seen;
  return j;
}

MetricRecord metric_from_json(const json& j) {
  const std::string w = "metric record";
  check_keys(j, {"kind", "stage", "step", "lr", "cross_entropy", "z_loss", "mean_abs_log_z", "tokens_seen",
                 "tokens_trained", "stage_tokens_seen"},
             w);
  MetricRecord r;
  const auto kind = field<std::string>(j, "kind", w);
  if (kind != "train" && kind != "validation") throw ValidationError(w + ": unknown kind '" + kind + "'");
  r.kind = kind == "train" ? MetricRecord::Kind::train : MetricRecord::Kind::validation;
  r.stage = field<std::string>(j, "stage", w);
  r.step = field<std::int64_t>(j, "step", w);
  r.lr = field<double>(j, "lr", w);
  r.cross_entropy = field<double>(j, "cross_entropy", w);
  r.z_loss = field<double>(j, "z_loss", w);
  r.mean_abs_log_z = field<double>(j, "mean_abs_log_z", w);
  r.tokens_seen = field<std::int64_t>(j, "tokens_seen", w);
  r.tokens_trained = field<std::int64_t>(j, "tokens_trained", w);
  r.stage_tokens_seen = field<std::int64_t>(j, "stage_tokens_seen", w);
  return r;
}

JsonlMetricsWriter::JsonlMetricsWriter(const std::filesystem::path& path) : out_(path, std::ios::app) {
  if (!out_) throw Error("cannot open metrics file " + path.string());
}

void JsonlMetricsWriter::operator()(const MetricRecord& record) { out_ << to_json(record).dump() << '\n' << std::flush; }

MetricsSink JsonlMetricsWriter::sink() {
  return [this](const MetricRecord& r) { (*this)(r); };
}

std::vector<MetricRecord> read_metrics(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open metrics file " + path.string());
  std::vector<MetricRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(metric_from_json(json::parse(line)));
  }
  return out;
}

namespace {

/// Tokens [pos, pos + n) of a stream read cyclically.
std::vector<int> cyclic_take(std::span<const int> stream, std::uint64_t pos, std::size_t n) {
  std::vector<int> out(n);
  const std::size_t size = stream.size();
  for (std::size_t i = 0; i < n; ++i) out[i] = stream[(pos + i) % size];
  return out;
}

/// Batch `step` drawn from `stream`, starting at `offset`. `seed` drives the
/// PLM splits and span placement.
PackedBatch stream_batch(const TrainingStage& stage, std::span<const int> stream, std::uint64_t offset,
                         std::uint64_t seed, const Vocab& vocab, std::int64_t step) {
  if (stream.empty()) throw Error("cannot build batches from an empty token stream");
  const std::size_t L = stage.seq_len;
  const std::size_t B = stage.batch_size;
  const auto s = static_cast<std::uint64_t>(step);
  switch (stage.objective.kind) {
    case Objective::flm: {
      const auto tokens = cyclic_take(stream, offset + s * B * L, B * L + 1);
      return pack_flm(tokens, L, B);
    }
    case Objective::plm: {
      // B examples of L+1 tokens, two per row: the same tokens per batch as FLM.
      const std::size_t per = L + 1;
      std::vector<PlmPair> pairs(B / 2);
      std::uint64_t pos = offset + s * B * per;
      for (auto& p : pairs) {
        p.first = cyclic_take(stream, pos, per);
        p.second = cyclic_take(stream, pos + per, per);
        pos += 2 * per;
      }
      Rng rng(mix_seed(seed, s));
      return pack_plm(pairs, L, stage.arch, rng).batch;
    }
    case Objective::mlm: {
      const auto& o = stage.objective;
      const std::size_t raw = raw_length_for_budget(L, o.mask_rate, o.mean_span);
      std::vector<CorruptedExample> examples;
      examples.reserve(B);
      for (std::size_t row = 0; row < B; ++row) {
        const auto tokens = cyclic_take(stream, offset + (s * B + row) * raw, raw);
        Rng rng(mix_seed(mix_seed(seed, s), row));
        examples.push_back(corrupt_spans(tokens, o.mask_rate, o.mean_span, vocab, rng));
      }
      return make_mlm_batch(examples, stage.arch, L, o);
    }
    case Objective::multitask: break;
  }
  throw Error("stage " + stage.label() + " has no pretraining batches");
}

std::uint64_t train_offset(const TrainingStage& stage, std::size_t size) {
  return mix_seed(stage.seed, 0x0ff5e7) % size;
}

/// Loss over fixed batches, weighted by trained tokens.
double validation_loss(const ParamTree& params, const CheckpointMeta& meta, const std::vector<PackedBatch>& batches,
                       const ComputeOptions& compute) {
  double total = 0.0;
  std::int64_t tokens = 0;
  for (const auto& b : batches) {
    const Tensor logits = forward(params, meta.config, model_arch(meta), b, Mode::infer, 0, compute);
    const LossReport r = loss_and_zloss(logits, b.target_ids, b.loss_mask, 0.0);
    total += r.cross_entropy * static_cast<double>(r.tokens_trained);
    tokens += r.tokens_trained;
  }
  return tokens > 0 ? total / static_cast<double>(tokens) : 0.0;
}

using BatchFn = std::function<PackedBatch(std::int64_t step)>;

/// Shared step loop for pretraining and finetuning stages.
Checkpoint train_loop(const Checkpoint& start, const TrainingStage& stage, const BatchFn& next_batch,
                      std::vector<PackedBatch> validation, const RunOptions& options, const MetricsSink& sink) {
  Checkpoint ckpt = start;
  ckpt.optimizer_state.reset();
  ModelConfig config = ckpt.meta.config;
  config.dropout_rate = stage.dropout;
  const ArchitectureKind arch = model_arch(ckpt.meta);
  for (auto& b : validation) route_batch(b, ckpt.meta);

  OptimizerState state = OptimizerState::fresh(ckpt.params);
  const BudgetLedger base = ckpt.meta.cumulative;
  BudgetLedger ledger;
  StageSummary summary{stage, {}, std::nullopt};

  const auto interval = std::max<std::int64_t>(
      1, static_cast<std::int64_t>(std::ceil(static_cast<double>(stage.token_budget_seen) * options.validation_interval)));
  std::int64_t next_validation = 0;
  std::vector<std::int64_t> marks = options.marks;
  std::sort(marks.begin(), marks.end());
  auto mark_it = std::upper_bound(marks.begin(), marks.end(), base.tokens_seen);

  auto cumulative = [&] {
    BudgetLedger c = base;
    c += ledger;
    return c;
  };
  auto snapshot = [&](bool with_state) {
    Checkpoint c;
    c.params = ckpt.params;
    if (with_state) c.optimizer_state = state;
    c.meta = ckpt.meta;
    c.meta.cumulative = cumulative();
    c.meta.objective = stage.objective;
    c.meta.stage_history.push_back(summary);
    return c;
  };
  auto record = [&](MetricRecord::Kind kind, double lr, double ce, double z, double log_z) {
    if (!sink) return;
    const BudgetLedger c = cumulative();
    sink({kind, stage.label(), ledger.steps, lr, ce, z, log_z, c.tokens_seen, c.tokens_trained, ledger.tokens_seen});
  };
  auto maybe_validate = [&](double lr) {
    const bool finished = ledger.tokens_seen >= stage.token_budget_seen;
    if (validation.empty() || (ledger.tokens_seen < next_validation && !finished)) return;
    const double loss = validation_loss(ckpt.params, ckpt.meta, validation, options.compute);
    summary.final_validation_loss = loss;
    record(MetricRecord::Kind::validation, lr, loss, 0.0, 0.0);
    while (next_validation <= ledger.tokens_seen) next_validation += interval;
  };

  maybe_validate(lr_at(stage.schedule, 0));
  while (ledger.tokens_seen < stage.token_budget_seen) {
    PackedBatch batch = next_batch(ledger.steps);
    route_batch(batch, ckpt.meta);
    const TokenAccounting acc = token_accounting(batch);
    if (acc.tokens_seen == 0) throw Error("stage " + stage.label() + " produced an empty batch");
    const double lr = lr_at(stage.schedule, state.step);
    const std::uint64_t dropout_seed = mix_seed(mix_seed(stage.seed, 0xd209), static_cast<std::uint64_t>(ledger.steps));
    TrainStep step = loss_and_gradients(ckpt.params, config, arch, batch, Mode::train, dropout_seed, stage.z_loss,
                                        options.compute);
    if (!std::isfinite(step.loss.cross_entropy) || !std::isfinite(step.loss.z_loss) || !step.grads.all_finite()) {
      std::ostringstream msg;
      msg << "non-finite loss in stage " << stage.label() << " at step " << ledger.steps;
      throw TrainingAborted(msg.str(), snapshot(true));
    }
    adafactor_step(ckpt.params, step.grads, state, stage.schedule);
    ledger += {static_cast<std::int64_t>(acc.tokens_seen), static_cast<std::int64_t>(acc.tokens_trained), 1};
    summary.ledger = ledger;
    record(MetricRecord::Kind::train, lr, step.loss.cross_entropy, step.loss.z_loss, step.loss.mean_abs_log_z);
    maybe_validate(lr);
    const std::int64_t seen = cumulative().tokens_seen;
    for (; mark_it != marks.end() && *mark_it <= seen; ++mark_it) {
      if (options.on_mark) options.on_mark(snapshot(true), *mark_it);
    }
  }

  summary.ledger = ledger;
  Checkpoint out = snapshot(true);
  return out;
}

void check_start(const Checkpoint& start, const TrainingStage& stage) {
  stage.validate();
  if (start.meta.arch != stage.arch) {
    throw Error("stage " + stage.label() + " cannot start from a " + short_name(start.meta.arch) +
                " checkpoint; convert it first");
  }
  start.meta.config.validate(model_arch(start.meta));
}

}  // namespace

PackedBatch pretraining_batch(const TrainingStage& stage, const Corpus& corpus, const Vocab& vocab,
                              std::int64_t step) {
  if (corpus.train.empty()) throw Error("corpus has no training tokens");
  return stream_batch(stage, corpus.train, train_offset(stage, corpus.train.size()), stage.seed, vocab, step);
}

Checkpoint run_stage(const Checkpoint& start, const TrainingStage& stage, const Corpus& corpus,
                     const RunOptions& options, const MetricsSink& sink) {
  check_start(start, stage);
  if (stage.objective.kind == Objective::multitask) {
    throw Error("multitask stages run through multitask_finetune");
  }
  if (corpus.train.empty()) throw Error("corpus has no training tokens");
  const Vocab vocab(start.meta.config.vocab_size);
  std::vector<PackedBatch> validation;
  if (!corpus.heldout.empty()) {
    for (std::size_t i = 0; i < options.validation_batches; ++i) {
      validation.push_back(stream_batch(stage, corpus.heldout, 0, options.validation_seed, vocab,
                                        static_cast<std::int64_t>(i)));
    }
  }
  auto next = [&](std::int64_t step) { return pretraining_batch(stage, corpus, vocab, step); };
  return train_loop(start, stage, next, std::move(validation), options, sink);
}

Checkpoint convert(const Checkpoint& checkpoint, ArchitectureKind new_arch, ConversionMode mode) {
  const auto& m = checkpoint.meta;
  const std::string pair = short_name(m.arch) + "->" + short_name(new_arch);
  Checkpoint out = checkpoint;
  out.optimizer_state.reset();
  if (mode == ConversionMode::mask_switch) {
    const bool ok = !m.empty_encoder && is_decoder_only(m.arch) && is_decoder_only(new_arch) && m.arch != new_arch;
    if (!ok) throw Error("no parameter mapping for mask switch " + pair);
    out.meta.arch = new_arch;
    return out;
  }
  if (m.empty_encoder || m.arch != ArchitectureKind::encoder_decoder ||
      new_arch != ArchitectureKind::causal_decoder) {
    throw Error("no parameter mapping for empty-encoder conversion " + pair);
  }
  out.meta.arch = ArchitectureKind::causal_decoder;
  out.meta.empty_encoder = true;
  return out;
}

TrainingStage make_stage(ArchitectureKind arch, ObjectiveKind objective, std::int64_t budget,
                         const StageSettings& s) {
  if (objective.kind == Objective::mlm) objective = ObjectiveKind::mlm(s.mask_rate, s.mean_span);
  TrainingStage stage;
  stage.arch = arch;
  stage.objective = objective;
  stage.token_budget_seen = budget;
  stage.schedule = s.schedule;
  stage.seed = s.seed;
  stage.seq_len = s.seq_len;
  stage.batch_size = s.batch_size;
  stage.z_loss = s.z_loss;
  return stage;
}

namespace {

void require_last_stage(const Checkpoint& c, const std::string& label, const std::string& op) {
  const auto& h = c.meta.stage_history;
  if (h.empty() || h.back().stage.label() != label || c.meta.arch != h.back().stage.arch || c.meta.empty_encoder) {
    throw Error(op + " needs a checkpoint whose last stage is " + label +
                (h.empty() ? std::string(" (history is empty)") : " (last stage is " + h.back().stage.label() + ")"));
  }
}

}  // namespace

Checkpoint adapt_lm(const Checkpoint& source, std::int64_t flm_budget, const Corpus& corpus,
                    const StageSettings& settings, const RunOptions& options, const MetricsSink& sink) {
  require_last_stage(source, "ND:MLM", "language-modeling adaptation");
  const Checkpoint switched = convert(source, ArchitectureKind::causal_decoder, ConversionMode::mask_switch);
  return run_stage(switched, make_stage(ArchitectureKind::causal_decoder, ObjectiveKind::flm(), flm_budget, settings),
                   corpus, options, sink);
}

Checkpoint adapt_nc_mlm(const Checkpoint& source, std::int64_t mlm_budget, const Corpus& corpus,
                        const StageSettings& settings, const RunOptions& options, const MetricsSink& sink) {
  require_last_stage(source, "CD:FLM", "non-causal MLM adaptation");
  const Checkpoint switched = convert(source, ArchitectureKind::non_causal_decoder, ConversionMode::mask_switch);
  return run_stage(switched,
                   make_stage(ArchitectureKind::non_causal_decoder, ObjectiveKind::mlm(), mlm_budget, settings), corpus,
                   options, sink);
}

Checkpoint multitask_finetune(const Checkpoint& start, const std::vector<EvalTask>& mixture, std::int64_t budget,
                              const FinetuneSettings& s, const RunOptions& options, const MetricsSink& sink) {
  if (mixture.empty()) throw ValidationError("multitask finetuning needs a nonempty task mixture");
  if (s.per_task_cap == 0) throw ValidationError("per_task_cap must be positive");
  TrainingStage stage;
  stage.arch = start.meta.arch;
  stage.objective = ObjectiveKind::multitask();
  stage.token_budget_seen = budget;
  stage.schedule = s.schedule;
  stage.dropout = s.dropout;
  stage.seed = s.seed;
  stage.seq_len = s.seq_len;
  stage.batch_size = s.batch_size;
  stage.z_loss = s.z_loss;
  check_start(start, stage);

  const Vocab vocab(start.meta.config.vocab_size);
  std::vector<std::vector<PromptedPair>> train(mixture.size());
  std::vector<PromptedPair> heldout;
  std::size_t rendered = 0;
  std::size_t skipped = 0;
  for (std::size_t t = 0; t < mixture.size(); ++t) {
    const EvalTask& task = mixture[t];
    task.validate();
    const auto n = task.examples.size();
    const auto n_val = static_cast<std::size_t>(std::floor(static_cast<double>(n) * s.validation_fraction));
    for (std::size_t e = 0; e < n; ++e) {
      for (std::size_t p = 0; p < task.prompts.size(); ++p) {
        const RenderedExample r = render(task, p, task.examples[e]);
        PromptedPair pair{tokenize(r.input_text, vocab), tokenize(r.candidate_texts[r.gold_index], vocab)};
        ++rendered;
        if (prompted_length(pair) > s.seq_len) {
          ++skipped;
          continue;
        }
        (e + n_val < n ? train[t] : heldout).push_back(std::move(pair));
      }
    }
  }
  if (static_cast<double>(skipped) > s.max_skipped_fraction * static_cast<double>(rendered)) {
    throw ValidationError("multitask finetuning: " + std::to_string(skipped) + " of " + std::to_string(rendered) +
                          " rendered examples exceed seq_len " + std::to_string(s.seq_len));
  }
  for (std::size_t t = 0; t < mixture.size(); ++t) {
    if (train[t].empty()) throw ValidationError("task " + mixture[t].name + " has no usable training examples");
  }

  std::vector<double> cumulative_weight;
  double total = 0.0;
  for (const auto& pairs : train) {
    total += static_cast<double>(std::min(pairs.size(), s.per_task_cap));
    cumulative_weight.push_back(total);
  }

  const ArchitectureKind arch = start.meta.arch;
  auto next = [&](std::int64_t step) {
    Rng rng(mix_seed(s.seed, static_cast<std::uint64_t>(step)));
    std::vector<PromptedPair> rows;
    for (std::size_t r = 0; r < s.batch_size; ++r) {
      const double u = rng.uniform() * total;
      const auto t = static_cast<std::size_t>(
          std::upper_bound(cumulative_weight.begin(), cumulative_weight.end(), u) - cumulative_weight.begin());
      const auto& pool = train[std::min(t, train.size() - 1)];
      rows.push_back(pool[rng.below(pool.size())]);
    }
    return make_prompted_batch(rows, arch, s.seq_len);
  };

  std::vector<PackedBatch> validation;
  for (std::size_t i = 0; i < heldout.size() && validation.size() < options.validation_batches; i += s.batch_size) {
    const auto end = std::min(heldout.size(), i + s.batch_size);
    validation.push_back(
        make_prompted_batch(std::span<const PromptedPair>(heldout).subspan(i, end - i), arch, s.seq_len));
  }
  return train_loop(start, stage, next, std::move(validation), options, sink);
}

}  // namespace ptlab
