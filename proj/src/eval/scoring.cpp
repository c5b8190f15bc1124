#include "ptlab/eval/scoring.hpp"

#include <algorithm>
#include <cmath>

#include "ptlab/core/json_fields.hpp"
#include "ptlab/data/vocab.hpp"

namespace ptlab {

using nlohmann::json;
using nlohmann::ordered_json;

std::string to_string(ScoringPolicy p) { return p == ScoringPolicy::sum_logprob ? "sum_logprob" : "mean_logprob"; }

ScoringPolicy parse_scoring_policy(const std::string& text) {
  if (text == "sum_logprob") return ScoringPolicy::sum_logprob;
  if (text == "mean_logprob") return ScoringPolicy::mean_logprob;
  throw ValidationError("unknown scoring policy '" + text + "' (expected sum_logprob or mean_logprob)");
}

std::string to_string(AggregationPolicy p) {
  return p == AggregationPolicy::median_then_mean ? "median_then_mean" : "single_prompt_mean";
}

AggregationPolicy parse_aggregation_policy(const std::string& text) {
  if (text == "median_then_mean") return AggregationPolicy::median_then_mean;
  if (text == "single_prompt_mean") return AggregationPolicy::single_prompt_mean;
  throw ValidationError("unknown aggregation policy '" + text + "' (expected median_then_mean or single_prompt_mean)");
}

std::vector<int> encode_text(const std::string& text, const ModelConfig& config) {
  // Byte ids do not depend on the vocabulary size, only sentinels do.
  static const Vocab bytes;
  auto ids = tokenize(text, bytes);
  for (int id : ids) {
    if (id >= config.vocab_size) {
      throw Error("token " + std::to_string(id) + " is outside the model vocabulary of " +
                  std::to_string(config.vocab_size));
    }
  }
  return ids;
}

std::vector<double> scores_from_logits(const PackedBatch& batch, const Tensor& logits, ScoringPolicy policy) {
  std::vector<double> scores(batch.batch_size, 0.0);
  const std::size_t vocab = logits.last_dim();
  for (std::size_t r = 0; r < batch.batch_size; ++r) {
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t t = 0; t < batch.seq_len; ++t) {
      const std::size_t i = r * batch.seq_len + t;
      if (!batch.loss_mask[i]) continue;
      const auto row = logits.row(i);
      const double mx = *std::max_element(row.begin(), row.end());
      double z = 0.0;
      for (std::size_t v = 0; v < vocab; ++v) z += std::exp(row[v] - mx);
      sum += row[static_cast<std::size_t>(batch.target_ids[i])] - mx - std::log(z);
      ++n;
    }
    if (n == 0) throw Error("candidate has no tokens to score");
    scores[r] = policy == ScoringPolicy::sum_logprob ? sum : sum / static_cast<double>(n);
  }
  return scores;
}

std::vector<double> score_candidates(const Checkpoint& checkpoint, const std::vector<int>& input,
                                     const std::vector<std::vector<int>>& candidates, const EvalOptions& options) {
  if (candidates.empty()) throw Error("no candidates to score");
  std::vector<PromptedPair> pairs;
  for (const auto& c : candidates) pairs.push_back({input, c});
  PackedBatch batch = make_prompted_batch(pairs, checkpoint.meta.arch, options.seq_len, false);
  route_batch(batch, checkpoint.meta);
  const Tensor logits = forward(checkpoint.params, checkpoint.meta.config, model_arch(checkpoint.meta), batch,
                                Mode::infer, 0, options.compute);
  return scores_from_logits(batch, logits, options.scoring);
}

double score_candidate(const Checkpoint& checkpoint, const std::string& input_text, const std::string& candidate_text,
                       const EvalOptions& options) {
  const auto& cfg = checkpoint.meta.config;
  return score_candidates(checkpoint, encode_text(input_text, cfg), {encode_text(candidate_text, cfg)}, options)[0];
}

std::size_t argmax_first(const std::vector<double>& scores) {
  if (scores.empty()) throw Error("argmax of no scores");
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i)
    if (scores[i] > scores[best]) best = i;
  return best;
}

double rank_classify(const Checkpoint& checkpoint, const EvalTask& task, std::size_t prompt_index,
                     const EvalOptions& options) {
  task.validate();
  const auto& cfg = checkpoint.meta.config;
  std::size_t correct = 0;
  std::size_t usable = 0;
  for (const auto& ex : task.examples) {
    const RenderedExample r = render(task, prompt_index, ex);
    const auto input = encode_text(r.input_text, cfg);
    std::vector<std::vector<int>> cands;
    bool fits = true;
    for (const auto& c : r.candidate_texts) {
      cands.push_back(encode_text(c, cfg));
      fits = fits && prompted_length({input, cands.back()}) <= options.seq_len;
    }
    if (!fits) continue;
    ++usable;
    if (argmax_first(score_candidates(checkpoint, input, cands, options)) == static_cast<std::size_t>(r.gold_index)) {
      ++correct;
    }
  }
  const std::size_t unusable = task.examples.size() - usable;
  if (usable == 0 ||
      static_cast<double>(unusable) > options.max_unusable_fraction * static_cast<double>(task.examples.size())) {
    throw Error("task " + task.name + ": " + std::to_string(unusable) + " of " +
                std::to_string(task.examples.size()) + " examples render too long for seq_len " +
                std::to_string(options.seq_len));
  }
  return static_cast<double>(correct) / static_cast<double>(usable);
}

double median(std::vector<double> v) {
  if (v.empty()) throw Error("median of no values");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

EvalReport aggregate(const std::vector<TaskResult>& results, AggregationPolicy policy) {
  if (results.empty()) throw Error("aggregate: no task results");
  EvalReport rep;
  rep.tasks = results;
  rep.policy = policy;
  double med = 0.0, first = 0.0, chance = 0.0;
  for (const auto& t : results) {
    if (t.accuracy.empty()) throw Error("aggregate: task " + t.name + " has no prompt accuracies");
    for (double a : t.accuracy)
      if (!(a >= 0.0 && a <= 1.0)) throw Error("aggregate: accuracy outside [0, 1] for task " + t.name);
    med += median(t.accuracy);
    first += t.accuracy.front();
    chance += t.chance_level;
    const auto [lo, hi] = std::minmax_element(t.accuracy.begin(), t.accuracy.end());
    rep.spread.emplace_back(*lo, *hi);
  }
  const auto n = static_cast<double>(results.size());
  rep.median_then_mean = med / n;
  rep.single_prompt_mean = first / n;
  rep.aggregate = policy == AggregationPolicy::median_then_mean ? rep.median_then_mean : rep.single_prompt_mean;
  rep.random_baseline = chance / n;
  return rep;
}

double random_baseline(const std::vector<EvalTask>& tasks, AggregationPolicy) {
  if (tasks.empty()) throw Error("random_baseline: no tasks");
  // A chance level does not depend on the prompt, so both policies reduce to
  // the mean over tasks.
  double sum = 0.0;
  for (const auto& t : tasks) sum += chance_level(t);
  return sum / static_cast<double>(tasks.size());
}

EvalReport evaluate(const Checkpoint& checkpoint, const std::vector<EvalTask>& tasks, const EvalOptions& options,
                    AggregationPolicy policy) {
  std::vector<TaskResult> results;
  for (const auto& task : tasks) {
    TaskResult r{task.name, {}, chance_level(task)};
    for (std::size_t p = 0; p < task.prompts.size(); ++p) r.accuracy.push_back(rank_classify(checkpoint, task, p, options));
    results.push_back(std::move(r));
  }
  EvalReport rep = aggregate(results, policy);
  rep.scoring = options.scoring;
  return rep;
}

ordered_json report_to_json(const EvalReport& rep) {
  ordered_json j;
  j["policy"] = to_string(rep.policy);
  j["scoring"] = to_string(rep.scoring);
  j["aggregate"] = rep.aggregate;
  j["median_then_mean"] = rep.median_then_mean;
  j["single_prompt_mean"] = rep.single_prompt_mean;
  j["random_baseline"] = rep.random_baseline;
  auto& tasks = j["tasks"] = ordered_json::array();
  for (std::size_t i = 0; i < rep.tasks.size(); ++i) {
    const auto& t = rep.tasks[i];
    tasks.push_back({{"name", t.name},
                     {"accuracy", t.accuracy},
                     {"chance_level", t.chance_level},
                     {"min", rep.spread[i].first},
                     {"max", rep.spread[i].second}});
  }
  return j;
}

EvalReport report_from_json(const json& j) {
  const std::string w = "eval report";
  check_keys(j, {"policy", "scoring", "aggregate", "median_then_mean", "single_prompt_mean", "random_baseline", "tasks"},
             w);
  std::vector<TaskResult> results;
  for (const auto& t : j.at("tasks")) {
    check_keys(t, {"name", "accuracy", "chance_level", "min", "max"}, w + " task");
    results.push_back({field<std::string>(t, "name", w), field<std::vector<double>>(t, "accuracy", w),
                       field<double>(t, "chance_level", w)});
  }
  EvalReport rep = aggregate(results, parse_aggregation_policy(field<std::string>(j, "policy", w)));
  rep.scoring = parse_scoring_policy(field<std::string>(j, "scoring", w));
  return rep;
}

}  // namespace ptlab
