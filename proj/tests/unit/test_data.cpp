#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include <json.hpp>

#include "../support/batches.hpp"
#include "ptlab/core/error.hpp"
#include "ptlab/data/corpus.hpp"
#include "ptlab/data/objectives.hpp"
#include "ptlab/model/mask.hpp"

using namespace ptlab;
using ptlab::testing::random_tokens;

namespace {

const Vocab kVocab(512, 100);

/// Independent de-corruption: every sentinel in the input is replaced by the
/// tokens that follow the same sentinel in the targets.
std::vector<int> decorrupt(const CorruptedExample& ex, const Vocab& v) {
  std::map<int, std::vector<int>> fill;
  int current = -1;
  for (int id : ex.targets) {
    if (v.is_sentinel(id)) {
      current = id;
      fill[id];
    } else {
      fill.at(current).push_back(id);
    }
  }
  std::vector<int> out;
  for (int id : ex.corrupted_input) {
    if (v.is_sentinel(id)) {
      const auto& f = fill.at(id);
      out.insert(out.end(), f.begin(), f.end());
    } else {
      out.push_back(id);
    }
  }
  return out;
}

std::vector<int> sentinels_in(const std::vector<int>& ids) {
  std::vector<int> s;
  for (int id : ids)
    if (kVocab.is_sentinel(id)) s.push_back(id);
  return s;
}

std::vector<PlmPair> random_pairs(Rng& rng, std::size_t n, std::size_t L) {
  std::vector<PlmPair> pairs;
  for (std::size_t i = 0; i < n; ++i) pairs.push_back({random_tokens(rng, L + 1, 258), random_tokens(rng, L + 1, 258)});
  return pairs;
}

}  // namespace

TEST_CASE("tokenize round trips bytes") {
  CHECK(tokenize("", kVocab).empty());
  CHECK(tokenize("ab", kVocab) == std::vector<int>{97 + Vocab::kByteOffset, 98 + Vocab::kByteOffset});
  Rng rng(3);
  for (int trial = 0; trial < 1000; ++trial) {
    std::string s(rng.below(40), '\0');
    for (auto& c : s) c = static_cast<char>(rng.below(256));
    auto ids = tokenize(s, kVocab);
    CHECK(detokenize(ids, kVocab) == s);
    for (int id : ids) CHECK_FALSE(kVocab.is_sentinel(id));
  }
  std::vector<int> bad{kVocab.eos()};
  CHECK_THROWS_AS(detokenize(bad, kVocab), Error);
  CHECK_THROWS_AS(Vocab(300, 100), ValidationError);
  CHECK(kVocab.sentinel(0) == 412);
  CHECK(kVocab.sentinel(99) == 511);
}

TEST_CASE("corpus documents and held-out tail") {
  auto docs = split_documents("first doc\nline two\n\n\n  \nsecond\n\nthird");
  REQUIRE(docs.size() == 3);
  CHECK(docs[0] == "first doc\nline two");
  CHECK(docs[2] == "third");

  std::vector<std::string> many(100, "abcdefghi");  // 10 tokens each with eos
  auto c = build_corpus(many, kVocab);
  CHECK(c.train.size() + c.heldout.size() == 1000);
  CHECK(c.heldout.size() == 20);
  CHECK(c.train[9] == kVocab.eos());

  PatternGrammar g;
  auto a = generate_documents(g, 11, 50);
  CHECK(a == generate_documents(g, 11, 50));
  for (const auto& d : a)
    for (char ch : d) CHECK(((ch >= 'a' && ch <= 'h') || ch == ' '));
}

TEST_CASE("pack_flm") {
  Rng rng(5);
  const std::size_t L = 16, B = 2;
  auto stream = random_tokens(rng, 2 * L + 1, 258);
  auto b = pack_flm(stream, L, B);
  b.validate();
  auto acct = token_accounting(b);
  CHECK(acct.fraction == 1.0);
  CHECK(acct.tokens_seen == 2 * L);
  CHECK(std::count(b.input_ids.begin(), b.input_ids.end(), Vocab::kPad) == 0);
  // Stream replay: every target is the next raw stream token.
  for (std::size_t r = 0; r < B; ++r)
    for (std::size_t t = 0; t < L; ++t) {
      CHECK(b.input_ids[r * L + t] == stream[r * L + t]);
      CHECK(b.target_ids[r * L + t] == stream[r * L + t + 1]);
    }
  CHECK(b.target_ids[L - 1] == b.input_ids[L]);
  CHECK_THROWS_AS(pack_flm(std::span<const int>(stream).first(2 * L), L, B), Error);
}

TEST_CASE("pack_plm trains exactly half of every row") {
  Rng data(9);
  for (auto arch : {ArchitectureKind::causal_decoder, ArchitectureKind::non_causal_decoder,
                    ArchitectureKind::encoder_decoder}) {
    const std::size_t L = 4;  // small L hits the extreme splits often
    auto pairs = random_pairs(data, 200, L);
    Rng rng(1);
    auto plm = pack_plm(pairs, L, arch, rng);
    const auto& b = plm.batch;
    b.validate();
    std::set<int> seen_splits(plm.splits.begin(), plm.splits.end());
    CHECK(seen_splits == std::set<int>{1, 2, 3, 4});
    for (std::size_t r = 0; r < b.batch_size; ++r) {
      std::size_t trained = 0, seen = 0;
      for (std::size_t t = 0; t < b.seq_len; ++t) {
        trained += b.loss_mask[r * b.seq_len + t];
        seen += b.segment_ids[r * b.seq_len + t] != kPadSegment;
      }
      for (std::size_t t = 0; t < b.encoder_len; ++t) seen += b.encoder_segments[r * b.encoder_len + t] != kPadSegment;
      CHECK(trained == L);
      CHECK(seen == 2 * L);
    }
    CHECK(token_accounting(b).fraction == 0.5);
    if (arch == ArchitectureKind::non_causal_decoder) {
      for (std::size_t r = 0; r < b.batch_size; ++r) {
        const auto& p = (*b.prefix_lens)[r];
        CHECK(p[0] + p[1] == static_cast<int>(L));
        // No loss on prefix positions.
        for (std::size_t t = 0; t < L; ++t) {
          if (static_cast<int>(t) < p[0]) CHECK(b.loss_mask[r * 2 * L + t] == 0);
          if (static_cast<int>(t) < p[1]) CHECK(b.loss_mask[r * 2 * L + L + t] == 0);
        }
      }
    }
  }
}

TEST_CASE("pack_plm: targets, determinism and the i = 1 mask") {
  Rng data(2);
  const std::size_t L = 6;
  auto pairs = random_pairs(data, 30, L);
  Rng r1(4), r2(4);
  auto a = pack_plm(pairs, L, ArchitectureKind::non_causal_decoder, r1);
  auto b = pack_plm(pairs, L, ArchitectureKind::non_causal_decoder, r2);
  CHECK(a.batch == b.batch);
  for (std::size_t r = 0; r < a.batch.batch_size; ++r) {
    for (std::size_t t = 0; t < L; ++t) {
      CHECK(a.batch.target_ids[r * 2 * L + t] == pairs[r].first[t + 1]);
      CHECK(a.batch.target_ids[r * 2 * L + L + t] == pairs[r].second[t + 1]);
    }
    if (a.splits[r] == 1) {
      std::span<const int> segs(a.batch.segment_ids.data() + r * 2 * L, 2 * L);
      auto mask = build_packed_mask(MaskKind::prefix, segs, (*a.batch.prefix_lens)[r]);
      auto causal = build_mask(MaskKind::causal, L);
      for (std::size_t i = 0; i < L; ++i)
        for (std::size_t j = 0; j < L; ++j) CHECK(mask.visible(i, j) == causal.visible(i, j));
    }
  }
  std::vector<PlmPair> short_pair{{std::vector<int>(L, 5), std::vector<int>(L + 1, 5)}};
  CHECK_THROWS_AS(pack_plm(short_pair, L, ArchitectureKind::non_causal_decoder, r1), Error);
}

TEST_CASE("pack_plm: split points are uniform on [1, seq_len]") {
  const std::size_t L = 100;
  std::vector<PlmPair> pairs(10000, {std::vector<int>(L + 1, 7), std::vector<int>(L + 1, 8)});
  Rng rng(77);
  auto plm = pack_plm(pairs, L, ArchitectureKind::non_causal_decoder, rng);
  double mean = 0;
  for (int i : plm.splits) mean += i;
  mean /= static_cast<double>(plm.splits.size());
  CHECK(mean / L >= 0.48);
  CHECK(mean / L <= 0.52);
  CHECK(*std::min_element(plm.splits.begin(), plm.splits.end()) == 1);
  CHECK(*std::max_element(plm.splits.begin(), plm.splits.end()) == static_cast<int>(L));
}

TEST_CASE("apply_spans single span") {
  const int a = 10, b = 11, c = 12, d = 13, e = 14, f = 15;
  std::vector<int> tokens{a, b, c, d, e, f};
  std::vector<Span> spans{{2, 2}};
  auto ex = apply_spans(tokens, spans, kVocab);
  const int s0 = kVocab.sentinel(0), s1 = kVocab.sentinel(1);
  CHECK(ex.corrupted_input == std::vector<int>{a, b, s0, e, f});
  CHECK(ex.targets == std::vector<int>{s0, c, d, s1});
  CHECK(ex.n_masked == 2);
  std::vector<Span> adjacent{{0, 1}, {1, 1}};
  CHECK_THROWS_AS(apply_spans(tokens, adjacent, kVocab), Error);
}

TEST_CASE("corrupt_spans statistics at length 626") {
  Rng data(1);
  double masked_fraction = 0, span_len = 0;
  const int seeds = 1000;
  for (int s = 0; s < seeds; ++s) {
    auto tokens = random_tokens(data, 626, 258);
    Rng rng(static_cast<std::uint64_t>(s));
    auto ex = corrupt_spans(tokens, 0.15, 3.0, kVocab, rng);
    masked_fraction += ex.n_masked / 626.0;
    span_len += static_cast<double>(ex.n_masked) / static_cast<double>(ex.spans.size());
  }
  CHECK(masked_fraction / seeds >= 0.14);
  CHECK(masked_fraction / seeds <= 0.16);
  CHECK(span_len / seeds >= 2.5);
  CHECK(span_len / seeds <= 3.5);
}

TEST_CASE("corrupt_spans: the 626-token budget gives 512 inputs and 114 targets") {
  const auto raw = raw_length_for_budget(626, 0.15, 3.0);
  Rng data(8);
  double in = 0, out = 0;
  std::vector<CorruptedExample> examples;
  for (int s = 0; s < 1000; ++s) {
    auto tokens = random_tokens(data, raw, 258);
    Rng rng(static_cast<std::uint64_t>(s) + 100);
    examples.push_back(corrupt_spans(tokens, 0.15, 3.0, kVocab, rng));
    in += static_cast<double>(examples.back().corrupted_input.size());
    out += static_cast<double>(examples.back().targets.size());
  }
  CHECK(std::abs(in / 1000 - 512) <= 8);
  CHECK(std::abs(out / 1000 - 114) <= 8);
  auto batch = make_mlm_batch(std::span(examples).first(16), ArchitectureKind::non_causal_decoder, 626);
  CHECK(std::abs(token_accounting(batch).fraction - 0.18) <= 0.02);
}

TEST_CASE("corrupt_spans properties") {
  Rng data(21);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto n = static_cast<std::size_t>(data.between(6, 300));
    auto tokens = random_tokens(data, n, 258);
    Rng rng(data.next_u64());
    auto ex = corrupt_spans(tokens, 0.15, 3.0, kVocab, rng);
    CHECK(decorrupt(ex, kVocab) == tokens);
    auto si = sentinels_in(ex.corrupted_input), st = sentinels_in(ex.targets);
    CHECK(std::is_sorted(si.begin(), si.end()));
    CHECK(std::adjacent_find(si.begin(), si.end()) == si.end());
    CHECK(std::adjacent_find(st.begin(), st.end()) == st.end());
    CHECK(std::is_sorted(st.begin(), st.end()));
    auto counts = span_counts(n, 0.15, 3.0);
    CHECK(ex.corrupted_input.size() == counts.input_len);
    CHECK(ex.targets.size() == counts.target_len);
    for (std::size_t k = 1; k < ex.spans.size(); ++k) {
      CHECK(ex.spans[k].start > ex.spans[k - 1].start + ex.spans[k - 1].length);
    }
  }
  auto tokens = random_tokens(data, 50, 258);
  Rng a(5), b(5);
  CHECK(corrupt_spans(tokens, 0.15, 3.0, kVocab, a).targets == corrupt_spans(tokens, 0.15, 3.0, kVocab, b).targets);
  Rng r(1);
  CHECK_THROWS_WITH_AS(corrupt_spans(std::span<const int>(tokens).first(10), 0.8, 1.0, kVocab, r),
                       "sequence too dense to corrupt", Error);
  CHECK_THROWS_AS(corrupt_spans(std::span<const int>(tokens).first(5), 0.15, 3.0, kVocab, r), Error);
}

TEST_CASE("make_mlm_batch across architectures") {
  Rng data(6);
  std::vector<CorruptedExample> examples;
  for (int i = 0; i < 3; ++i) {
    auto tokens = random_tokens(data, 40, 258);
    Rng rng(static_cast<std::uint64_t>(i));
    examples.push_back(corrupt_spans(tokens, 0.15, 3.0, kVocab, rng));
  }
  auto cd = make_mlm_batch(examples, ArchitectureKind::causal_decoder, 64);
  auto nd = make_mlm_batch(examples, ArchitectureKind::non_causal_decoder, 64);
  auto ed = make_mlm_batch(examples, ArchitectureKind::encoder_decoder, 64);
  cd.validate();
  nd.validate();
  ed.validate();
  CHECK(cd.input_ids == nd.input_ids);
  CHECK(cd.target_ids == nd.target_ids);
  CHECK(cd.loss_mask == nd.loss_mask);
  CHECK(!cd.prefix_lens);
  REQUIRE(nd.prefix_lens);
  for (std::size_t r = 0; r < 3; ++r) {
    const auto n_in = static_cast<std::size_t>((*nd.prefix_lens)[r][0]);
    CHECK(n_in == examples[r].corrupted_input.size());
    for (std::size_t t = 0; t < n_in; ++t) CHECK(nd.loss_mask[r * 64 + t] == 0);
    std::size_t trained = 0;
    for (std::size_t t = 0; t < 64; ++t) trained += nd.loss_mask[r * 64 + t];
    CHECK(trained == examples[r].targets.size());
  }
  std::size_t dec_real = 0, dec_trained = 0;
  for (std::size_t i = 0; i < ed.positions(); ++i) {
    dec_real += ed.segment_ids[i] != kPadSegment;
    dec_trained += ed.loss_mask[i];
  }
  CHECK(dec_trained == dec_real);
  CHECK(token_accounting(ed).tokens_trained == token_accounting(nd).tokens_trained);
  CHECK(token_accounting(ed).tokens_seen == token_accounting(nd).tokens_seen);
  CHECK_THROWS_AS(make_mlm_batch(examples, ArchitectureKind::causal_decoder, 20), Error);
}

TEST_CASE("make_prompted_batch") {
  std::vector<PromptedPair> pairs{{{10, 11, 12}, {20, 21}}, {{}, {30}}};
  auto cd = make_prompted_batch(pairs, ArchitectureKind::causal_decoder, 8);
  cd.validate();
  // Row 0: [10 11 12 eos 20 21 pad pad]; loss from the separator onward.
  CHECK(std::vector<int>(cd.input_ids.begin(), cd.input_ids.begin() + 8) ==
        std::vector<int>{10, 11, 12, Vocab::kEos, 20, 21, 0, 0});
  CHECK(std::vector<int>(cd.target_ids.begin(), cd.target_ids.begin() + 6) ==
        std::vector<int>{11, 12, Vocab::kEos, 20, 21, Vocab::kEos});
  CHECK(std::vector<std::uint8_t>(cd.loss_mask.begin(), cd.loss_mask.begin() + 8) ==
        std::vector<std::uint8_t>{0, 0, 0, 1, 1, 1, 0, 0});
  auto open = make_prompted_batch(pairs, ArchitectureKind::non_causal_decoder, 8, false);
  CHECK(std::vector<std::uint8_t>(open.loss_mask.begin(), open.loss_mask.begin() + 8) ==
        std::vector<std::uint8_t>{0, 0, 0, 1, 1, 0, 0, 0});
  CHECK((*open.prefix_lens)[0] == std::vector<int>{3});
  auto ed = make_prompted_batch(pairs, ArchitectureKind::encoder_decoder, 8);
  ed.validate();
  CHECK(ed.encoder_len == 3);
  CHECK(ed.seq_len == 3);
  CHECK(std::vector<int>(ed.input_ids.begin(), ed.input_ids.begin() + 3) == std::vector<int>{Vocab::kEos, 20, 21});
  CHECK_THROWS_AS(make_prompted_batch(pairs, ArchitectureKind::causal_decoder, 5), Error);
}

TEST_CASE("batch dump is line-delimited and deterministic") {
  Rng rng(4);
  auto stream = random_tokens(rng, 3 * 8 + 1, 258);
  auto b = pack_flm(stream, 8, 3);
  auto text = dump_batch_jsonl(b);
  CHECK(text == dump_batch_jsonl(b));
  CHECK(std::count(text.begin(), text.end(), '\n') == 3);
  auto first = nlohmann::json::parse(text.substr(0, text.find('\n')));
  CHECK(first["objective"] == "FLM");
  CHECK(first["input_ids"].get<std::vector<int>>() == std::vector<int>(stream.begin(), stream.begin() + 8));
  CHECK(first["prefix_lens"].is_null());
  CHECK(first["loss_mask"].size() == 8);
}
