#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "../support/models.hpp"
#include "ptlab/eval/scoring.hpp"

using namespace ptlab;
using ptlab::testing::ed_batch;
using ptlab::testing::lm_batch;
using ptlab::testing::two_symbol_config;
using ptlab::testing::checkpoint_for;
using ptlab::testing::log_softmax_row;
using ptlab::testing::oracle_logprob;

namespace {

constexpr auto CD = ArchitectureKind::causal_decoder;
constexpr auto ND = ArchitectureKind::non_causal_decoder;
constexpr auto ED = ArchitectureKind::encoder_decoder;

EvalTask fixture_task() {
  EvalTask t;
  t.name = "fixture";
  t.prompts = {"Q: {input} A: {candidate}.", "{input}? {candidate}"};
  t.examples = {{"x", {"yes", "no"}, 0}, {"y", {"no", "yes", "maybe"}, 2}};
  return t;
}

}  // namespace

TEST_CASE("render splits at the candidate") {
  auto t = fixture_task();
  auto r = render(t, 0, t.examples[1]);
  CHECK(r.input_text == "Q: y A: ");
  CHECK(r.candidate_texts == std::vector<std::string>{"no.", "yes.", "maybe."});
  CHECK(r.gold_index == 2);
  CHECK(render(t, 1, t.examples[0]).input_text == "x? ");
  CHECK_THROWS_AS(render(t, 2, t.examples[0]), Error);
  // Purity: same example, same render.
  CHECK(render(t, 0, t.examples[1]).candidate_texts == r.candidate_texts);
}

TEST_CASE("task validation and JSON") {
  auto t = fixture_task();
  t.validate();
  auto bad = t;
  bad.prompts = {"{input} {candidate} {candidate}"};
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  bad = t;
  bad.examples[0].gold = 2;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  bad = t;
  bad.examples[0].candidates = {"only"};
  CHECK_THROWS_AS(bad.validate(), ValidationError);

  auto back = task_from_json(task_to_json(t));
  CHECK(back.name == t.name);
  CHECK(back.prompts == t.prompts);
  CHECK(back.examples.size() == 2);
  CHECK(back.examples[1].candidates == t.examples[1].candidates);
  auto j = task_to_json(t);
  j["extra"] = 1;
  CHECK_THROWS_WITH_AS(task_from_json(j), doctest::Contains("unknown field 'extra'"), ValidationError);

  const auto path = std::filesystem::temp_directory_path() / "ptlab_tasks.json";
  save_tasks({t, t}, path);
  CHECK(load_tasks(path).size() == 2);
  std::filesystem::remove(path);
}

TEST_CASE("chance level and random baseline") {
  auto t = fixture_task();
  CHECK(chance_level(t) == doctest::Approx((0.5 + 1.0 / 3.0) / 2.0));
  t.chance_level = 0.0;
  CHECK(chance_level(t) == 0.0);

  auto with_chance = [](double c) {
    EvalTask x = fixture_task();
    x.chance_level = c;
    return x;
  };
  const double b = random_baseline({with_chance(0.25), with_chance(0.5), with_chance(0.25)},
                                   AggregationPolicy::median_then_mean);
  CHECK(std::abs(100.0 * b - 33.3) < 0.1);
  EvalTask two{"pair", {"{input} {candidate}"}, {{"q", {"a", "b"}, 1}}, std::nullopt};
  CHECK(random_baseline({two}, AggregationPolicy::single_prompt_mean) == 0.5);
  CHECK_THROWS_AS(random_baseline({}, AggregationPolicy::single_prompt_mean), Error);
}

TEST_CASE("toy suite is well formed and its chance level matches a random guesser") {
  auto suite = make_toy_suite(PatternGrammar{}, 11, 200);
  REQUIRE(suite.train_tasks.size() == 3);
  REQUIRE(suite.heldout_tasks.size() == 1);
  std::set<std::string> names;
  for (const auto& t : suite.train_tasks) names.insert(t.name);
  CHECK_FALSE(names.count(suite.heldout_tasks[0].name));
  std::vector<EvalTask> all = suite.train_tasks;
  all.push_back(suite.heldout_tasks[0]);
  Rng rng(5);
  for (const auto& t : all) {
    t.validate();
    CHECK(t.prompts.size() == 3);
    for (const auto& ex : t.examples) {
      CHECK(std::set<std::string>(ex.candidates.begin(), ex.candidates.end()).size() == ex.candidates.size());
    }
    // Monte Carlo guesser over the first prompt.
    std::size_t hits = 0, trials = 0;
    for (int round = 0; round < 100; ++round) {
      for (const auto& ex : t.examples) {
        hits += rng.below(ex.candidates.size()) == static_cast<std::uint64_t>(ex.gold) ? 1 : 0;
        ++trials;
      }
    }
    const double guessed = static_cast<double>(hits) / static_cast<double>(trials);
    CHECK(std::abs(guessed - chance_level(t)) < 0.01);
  }
  // Seeded and pure.
  auto again = make_toy_suite(PatternGrammar{}, 11, 200);
  CHECK(task_to_json(again.heldout_tasks[0]) == task_to_json(suite.heldout_tasks[0]));
}

TEST_CASE("scores from constructed logits favor the boosted token") {
  std::vector<PromptedPair> pairs{{{}, {5}}, {{}, {6}}};
  auto batch = make_prompted_batch(pairs, CD, 4, false);
  Tensor logits = Tensor::zeros({batch.positions(), 8});
  for (std::size_t r = 0; r < 2; ++r) logits.at(r * 4, 5) = 3.0;
  auto s = scores_from_logits(batch, logits, ScoringPolicy::sum_logprob);
  CHECK(s[0] > s[1]);
  CHECK(s[0] == doctest::Approx(3.0 - std::log(std::exp(3.0) + 7.0)));

  // Adding a constant everywhere keeps the scores' order.
  Tensor shifted = logits;
  for (auto& v : shifted.storage()) v += 40.0;
  auto t = scores_from_logits(batch, shifted, ScoringPolicy::sum_logprob);
  CHECK(argmax_first(t) == argmax_first(s));
  CHECK(t[1] == doctest::Approx(s[1]).epsilon(1e-12));
}

TEST_CASE("sum and mean scoring disagree only with unequal lengths") {
  // Row 0: one token at log p = -1. Row 1: two tokens at -0.8 each.
  auto logits_for = [](const PackedBatch& b, const std::vector<double>& lp) {
    Tensor l = Tensor::zeros({b.positions(), 2});
    std::size_t k = 0;
    for (std::size_t i = 0; i < b.positions(); ++i) {
      if (!b.loss_mask[i]) continue;
      // Two-way softmax with the target at probability exp(lp).
      const double p = std::exp(lp[k++]);
      l.at(i, static_cast<std::size_t>(b.target_ids[i])) = std::log(p);
      l.at(i, 1 - static_cast<std::size_t>(b.target_ids[i])) = std::log(1.0 - p);
    }
    return l;
  };
  std::vector<PromptedPair> unequal{{{}, {1}}, {{}, {1, 1}}};
  auto b = make_prompted_batch(unequal, CD, 4, false);
  auto l = logits_for(b, {-1.0, -0.8, -0.8});
  CHECK(argmax_first(scores_from_logits(b, l, ScoringPolicy::sum_logprob)) == 0);
  CHECK(argmax_first(scores_from_logits(b, l, ScoringPolicy::mean_logprob)) == 1);

  Rng rng(3);
  std::vector<PromptedPair> equal{{{}, {1, 1}}, {{}, {1, 1}}, {{}, {1, 1}}};
  auto e = make_prompted_batch(equal, CD, 4, false);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> lp(6);
    for (auto& v : lp) v = -3.0 * rng.uniform() - 1e-3;
    auto le = logits_for(e, lp);
    CHECK(argmax_first(scores_from_logits(e, le, ScoringPolicy::sum_logprob)) ==
          argmax_first(scores_from_logits(e, le, ScoringPolicy::mean_logprob)));
  }
}

TEST_CASE("empty input scores equal the first-position log-softmax") {
  for (auto arch : {CD, ND, ED}) {
    auto ck = checkpoint_for(two_symbol_config(arch), arch, 4);
    PackedBatch b = arch == ED ? ed_batch({{}}, {{1}}) : lm_batch({{1}}, arch == ND ? std::optional<int>(0) : std::nullopt);
    const auto lp = log_softmax_row(forward(ck.params, ck.meta.config, arch, b, Mode::infer, 0).row(0));
    for (int tok : {2, 3}) {
      const std::string text(1, static_cast<char>(tok - 2));
      CHECK(score_candidate(ck, "", text) == doctest::Approx(lp[static_cast<std::size_t>(tok)]).epsilon(1e-12));
    }
  }
}

TEST_CASE("CD and ND scores agree when the prefix has at most one token") {
  auto cfg = two_symbol_config(CD);
  // With one layer the separator only reads embeddings, so the prefix mask
  // could not matter at all.
  cfg.decoder_layers = 2;
  auto cd = checkpoint_for(cfg, CD, 8);
  auto nd = cd;
  nd.meta.arch = ND;
  for (const std::string input : {"", "\x01"}) {
    CHECK(score_candidate(cd, input, std::string("\x00\x01", 2)) ==
          score_candidate(nd, input, std::string("\x00\x01", 2)));
  }
  CHECK(score_candidate(cd, std::string("\x01\x00\x01", 3), "\x01") !=
        score_candidate(nd, std::string("\x01\x00\x01", 3), "\x01"));
}

TEST_CASE("ranking matches exhaustive enumeration on a two-symbol model") {
  for (auto arch : {CD, ND, ED}) {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
      auto ck = checkpoint_for(two_symbol_config(arch), arch, seed);
      const std::vector<int> input{3, 2};
      // All 8 continuations of three positions.
      std::vector<std::vector<int>> cands;
      for (int m = 0; m < 8; ++m) cands.push_back({2 + (m & 1), 2 + ((m >> 1) & 1), 2 + ((m >> 2) & 1)});
      EvalOptions opts;
      opts.seq_len = 8;
      auto scores = score_candidates(ck, input, cands, opts);
      std::vector<double> oracle;
      double total = 0.0;
      for (std::size_t i = 0; i < cands.size(); ++i) {
        oracle.push_back(oracle_logprob(ck, input, cands[i]));
        CHECK(scores[i] == doctest::Approx(oracle[i]).epsilon(1e-10));
        total += std::exp(oracle[i]);
      }
      CHECK(argmax_first(scores) == argmax_first(oracle));
      // Two content tokens never hold all the mass; the sum stays below 1.
      CHECK(total < 1.0);

      // rank_classify with the enumeration's winner as gold is always right.
      EvalTask task{"enum", {"{input}{candidate}"}, {}, std::nullopt};
      std::string in_text{'\x01', '\x00'};
      TaskExample ex{in_text, {}, static_cast<int>(argmax_first(oracle))};
      for (const auto& c : cands) {
        std::string s;
        for (int tok : c) s.push_back(static_cast<char>(tok - 2));
        ex.candidates.push_back(s);
      }
      task.examples = {ex, ex};
      CHECK(rank_classify(ck, task, 0, opts) == 1.0);
    }
  }
}

TEST_CASE("uniform model ties break to the first candidate") {
  auto cfg = two_symbol_config(CD);
  cfg.vocab_size = 512;
  auto ck = fresh_checkpoint(cfg, CD, 1);
  for (auto& [path, t] : ck.params) t.storage().assign(t.size(), 0.0);
  EvalTask t{"same", {"{input} {candidate}"}, {}, std::nullopt};
  for (int i = 0; i < 10; ++i) t.examples.push_back({"q", {"a", "a"}, i % 4 == 0 ? 0 : 1});
  CHECK(rank_classify(ck, t, 0) == 0.3);
  auto distinct = t;
  for (auto& ex : distinct.examples) ex.candidates = {"a", "b"};
  CHECK(rank_classify(ck, distinct, 0) == 0.3);
}

TEST_CASE("rendering overflow is tolerated up to a limit") {
  auto cfg = two_symbol_config(CD);
  cfg.vocab_size = 512;
  auto ck = fresh_checkpoint(cfg, CD, 1);
  EvalTask t{"long", {"{input} {candidate}"}, {}, std::nullopt};
  for (int i = 0; i < 20; ++i) t.examples.push_back({"q", {"a", "b"}, 0});
  EvalOptions opts;
  opts.seq_len = 8;
  t.examples[0].input = std::string(20, 'q');
  CHECK_NOTHROW(rank_classify(ck, t, 0, opts));
  t.examples[1].input = std::string(20, 'q');
  t.examples[2].input = std::string(20, 'q');
  CHECK_THROWS_WITH_AS(rank_classify(ck, t, 0, opts), doctest::Contains("render too long"), Error);
  CHECK_THROWS_WITH_AS(score_candidate(ck, std::string(20, 'q'), "a", opts), doctest::Contains("render too long"),
                       Error);
}

TEST_CASE("aggregation fixtures") {
  CHECK(aggregate({{"t", {0.2, 0.5, 0.9}, 0.25}}, AggregationPolicy::median_then_mean).aggregate == 0.5);
  CHECK(aggregate({{"a", {0.4}, 0.5}, {"b", {0.6}, 0.5}}, AggregationPolicy::single_prompt_mean).aggregate == 0.5);

  // 3 tasks x 4 prompts, recomputed by hand:
  // medians 0.375, 0.5, 0.75 -> 1.625 / 3; first prompts 0.125, 0.5, 1.0 -> 1.625 / 3 as well,
  // so the second fixture row shifts task 3's first prompt to 0.5.
  std::vector<TaskResult> m{{"t1", {0.125, 0.5, 0.25, 0.875}, 0.25},
                            {"t2", {0.5, 0.5, 0.625, 0.25}, 0.5},
                            {"t3", {0.5, 0.75, 0.75, 1.0}, 0.25}};
  auto r = aggregate(m, AggregationPolicy::median_then_mean);
  CHECK(r.median_then_mean == (0.375 + 0.5 + 0.75) / 3.0);
  CHECK(r.single_prompt_mean == (0.125 + 0.5 + 0.5) / 3.0);
  CHECK(r.aggregate == r.median_then_mean);
  CHECK(r.random_baseline == 1.0 / 3.0);
  REQUIRE(r.spread.size() == 3);
  CHECK(r.spread[0] == std::pair<double, double>{0.125, 0.875});
  CHECK(r.spread[1] == std::pair<double, double>{0.25, 0.625});
  CHECK(r.spread[2] == std::pair<double, double>{0.5, 1.0});
  CHECK(aggregate(m, AggregationPolicy::single_prompt_mean).aggregate == r.single_prompt_mean);

  auto back = report_from_json(nlohmann::json::parse(report_to_json(r).dump()));
  CHECK(report_to_json(back) == report_to_json(r));

  CHECK_THROWS_AS(aggregate({}, AggregationPolicy::median_then_mean), Error);
  CHECK_THROWS_AS(aggregate({{"bad", {1.5}, 0.5}}, AggregationPolicy::median_then_mean), Error);
}

TEST_CASE("with one prompt per task both policies agree") {
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<TaskResult> m;
    for (int t = 0; t < 5; ++t) m.push_back({"t" + std::to_string(t), {rng.uniform()}, 0.5});
    CHECK(aggregate(m, AggregationPolicy::median_then_mean).aggregate ==
          aggregate(m, AggregationPolicy::single_prompt_mean).aggregate);
  }
}

TEST_CASE("evaluation is pure") {
  auto cfg = two_symbol_config(ND);
  cfg.vocab_size = 512;
  auto ck = checkpoint_for(cfg, ND, 3);
  auto suite = make_toy_suite(PatternGrammar{}, 2, 10);
  auto a = evaluate(ck, suite.heldout_tasks);
  auto b = evaluate(ck, suite.heldout_tasks);
  CHECK(report_to_json(a).dump() == report_to_json(b).dump());
  CHECK(a.tasks[0].accuracy.size() == 3);
  CHECK(a.random_baseline == doctest::Approx(1.0 / 3.0));
}
