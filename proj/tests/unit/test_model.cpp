#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "../support/models.hpp"
#include "ptlab/core/error.hpp"
#include "ptlab/data/objectives.hpp"
#include "ptlab/model/mask.hpp"
#include "ptlab/model/transformer.hpp"
#include "ptlab/numeric/gradcheck.hpp"

using namespace ptlab;
using ptlab::testing::ed_batch;
using ptlab::testing::lm_batch;
using ptlab::testing::random_tokens;
using ptlab::testing::toy_config;
using ptlab::testing::toy_params;
using ptlab::testing::model_loss_op;
using ptlab::testing::as_map;

namespace {

std::vector<int> mat_rows(const BoolMatrix& m) {
  std::vector<int> out;
  for (auto b : m.bits) out.push_back(b);
  return out;
}

// Independent scalar reimplementation of a one-layer decoder-only model.
int oracle_bucket(long rel, int n_buckets, int max_distance) {
  long n = rel > 0 ? 0 : -rel;
  const int max_exact = n_buckets / 2;
  if (n < max_exact) return static_cast<int>(n);
  int v = max_exact + static_cast<int>(std::log(static_cast<double>(n) / max_exact) /
                                       std::log(static_cast<double>(max_distance) / max_exact) *
                                       (n_buckets - max_exact));
  return std::min(v, n_buckets - 1);
}

using Rows = std::vector<std::vector<double>>;

Rows oracle_norm(const Rows& x, const Tensor& g, double eps) {
  Rows out = x;
  for (std::size_t t = 0; t < x.size(); ++t) {
    double ms = 0;
    for (double v : x[t]) ms += v * v;
    ms /= static_cast<double>(x[t].size());
    for (std::size_t i = 0; i < x[t].size(); ++i) out[t][i] = x[t][i] / std::sqrt(ms + eps) * g[i];
  }
  return out;
}

Rows oracle_matmul(const Rows& x, const Tensor& w) {
  Rows out(x.size(), std::vector<double>(w.dim(1), 0.0));
  for (std::size_t t = 0; t < x.size(); ++t)
    for (std::size_t j = 0; j < w.dim(1); ++j)
      for (std::size_t i = 0; i < w.dim(0); ++i) out[t][j] += x[t][i] * w.at(i, j);
  return out;
}

Rows oracle_logits(const ParamTree& p, const ModelConfig& c, const std::vector<int>& tokens, int prefix) {
  const std::size_t n = tokens.size();
  const int d = c.d_model, heads = c.n_heads, dh = d / heads;
  const Tensor& emb = p.at("embedding");
  Rows x(n, std::vector<double>(static_cast<std::size_t>(d)));
  for (std::size_t t = 0; t < n; ++t)
    for (int i = 0; i < d; ++i) x[t][static_cast<std::size_t>(i)] = emb.at(static_cast<std::size_t>(tokens[t]), static_cast<std::size_t>(i));

  const std::string L = "decoder/layer_00/";
  Rows xn = oracle_norm(x, p.at(L + "self_attn_norm"), c.norm_epsilon);
  Rows q = oracle_matmul(xn, p.at(L + "self_attn/q"));
  Rows k = oracle_matmul(xn, p.at(L + "self_attn/k"));
  Rows v = oracle_matmul(xn, p.at(L + "self_attn/v"));
  const Tensor& table = p.at("decoder/rel_bias");
  Rows ctx(n, std::vector<double>(static_cast<std::size_t>(d), 0.0));
  for (int h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> s(n, 0.0);
      std::vector<bool> vis(n);
      double mx = -1e300;
      for (std::size_t j = 0; j < n; ++j) {
        vis[j] = j <= i || static_cast<int>(j) < prefix;
        for (int e = 0; e < dh; ++e) s[j] += q[i][static_cast<std::size_t>(h * dh + e)] * k[j][static_cast<std::size_t>(h * dh + e)];
        s[j] /= std::sqrt(static_cast<double>(dh));
        const bool both_prefix = static_cast<int>(i) < prefix && static_cast<int>(j) < prefix;
        const long rel = static_cast<long>(j) - static_cast<long>(i);
        int bucket;
        if (both_prefix) {
          // Bidirectional bucketing: half the buckets per direction.
          const int half = c.rel_bias.n_buckets / 2;
          bucket = (rel > 0 ? half : 0) + oracle_bucket(-std::labs(rel), half, c.rel_bias.max_distance);
        } else {
          bucket = oracle_bucket(rel, c.rel_bias.n_buckets, c.rel_bias.max_distance);
        }
        s[j] += table.at(static_cast<std::size_t>(bucket), static_cast<std::size_t>(h));
        if (vis[j]) mx = std::max(mx, s[j]);
      }
      double z = 0;
      for (std::size_t j = 0; j < n; ++j) z += vis[j] ? std::exp(s[j] - mx) : 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (!vis[j]) continue;
        const double pr = std::exp(s[j] - mx) / z;
        for (int e = 0; e < dh; ++e) ctx[i][static_cast<std::size_t>(h * dh + e)] += pr * v[j][static_cast<std::size_t>(h * dh + e)];
      }
    }
  }
  Rows att = oracle_matmul(ctx, p.at(L + "self_attn/o"));
  for (std::size_t t = 0; t < n; ++t)
    for (int i = 0; i < d; ++i) x[t][static_cast<std::size_t>(i)] += att[t][static_cast<std::size_t>(i)];

  Rows fn = oracle_norm(x, p.at(L + "ff_norm"), c.norm_epsilon);
  Rows a = oracle_matmul(fn, p.at(L + "ff/gate"));
  Rows b = oracle_matmul(fn, p.at(L + "ff/lin"));
  const double pi = 3.14159265358979323846;
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t j = 0; j < a[t].size(); ++j) {
      const double u = a[t][j];
      a[t][j] = 0.5 * u * (1.0 + std::tanh(std::sqrt(2.0 / pi) * (u + 0.044715 * u * u * u))) * b[t][j];
    }
  Rows ff = oracle_matmul(a, p.at(L + "ff/out"));
  for (std::size_t t = 0; t < n; ++t)
    for (int i = 0; i < d; ++i) x[t][static_cast<std::size_t>(i)] += ff[t][static_cast<std::size_t>(i)];

  Rows y = oracle_norm(x, p.at("decoder/final_norm"), c.norm_epsilon);
  Rows logits(n, std::vector<double>(static_cast<std::size_t>(c.vocab_size), 0.0));
  for (std::size_t t = 0; t < n; ++t)
    for (int w = 0; w < c.vocab_size; ++w)
      for (int i = 0; i < d; ++i)
        logits[t][static_cast<std::size_t>(w)] += y[t][static_cast<std::size_t>(i)] / std::sqrt(static_cast<double>(d)) *
                                                 emb.at(static_cast<std::size_t>(w), static_cast<std::size_t>(i));
  return logits;
}

}  // namespace

TEST_CASE("build_mask patterns") {
  CHECK(mat_rows(build_mask(MaskKind::causal, 3).visibility) == std::vector<int>{1, 0, 0, 1, 1, 0, 1, 1, 1});
  CHECK(mat_rows(build_mask(MaskKind::prefix, 3, 2).visibility) == std::vector<int>{1, 1, 0, 1, 1, 0, 1, 1, 1});
  std::vector<int> segs{0, 0, 1, 1};
  CHECK(mat_rows(build_mask(MaskKind::causal, 4, std::nullopt, std::span<const int>(segs)).visibility) ==
        std::vector<int>{1, 0, 0, 0, 1, 1, 0, 0, 0, 0, 1, 0, 0, 0, 1, 1});
  CHECK(mat_rows(build_mask(MaskKind::full, 2).visibility) == std::vector<int>{1, 1, 1, 1});
  for (std::size_t n = 1; n < 7; ++n) {
    CHECK(build_mask(MaskKind::prefix, n, 0).visibility == build_mask(MaskKind::causal, n).visibility);
    CHECK(build_mask(MaskKind::prefix, n, 1).visibility == build_mask(MaskKind::causal, n).visibility);
  }
  CHECK_THROWS_AS(build_mask(MaskKind::prefix, 3, 4), Error);
  CHECK_THROWS_AS(build_mask(MaskKind::prefix, 3), Error);
}

TEST_CASE("packed prefix masks isolate segments") {
  std::vector<int> segs{0, 0, 0, 1, 1, kPadSegment};
  std::vector<int> prefixes{2, 1};
  auto m = build_packed_mask(MaskKind::prefix, segs, prefixes);
  CHECK(m.visible(0, 1));   // bidirectional inside segment 0's prefix
  CHECK(!m.visible(0, 2));  // suffix stays causal
  CHECK(!m.visible(3, 2));  // no cross-segment visibility
  CHECK(!m.visible(3, 4));  // prefix(1) is causal
  CHECK(m.visible(5, 5));
  CHECK(!m.visible(5, 4));
  CHECK_THROWS_AS(build_packed_mask(MaskKind::prefix, segs, std::vector<int>{2}), Error);
  std::vector<int> broken{0, 1, 0};
  CHECK_THROWS_AS(segment_spans(broken), Error);
}

TEST_CASE("init_params: determinism and shared decoder layout") {
  auto cfg = desk_config(ArchitectureKind::causal_decoder);
  auto a = init_params(cfg, ArchitectureKind::causal_decoder, 4);
  auto b = init_params(cfg, ArchitectureKind::causal_decoder, 4);
  auto nd = init_params(cfg, ArchitectureKind::non_causal_decoder, 4);
  CHECK(a.identical(b));
  CHECK(a.identical(nd));
  CHECK(!a.identical(init_params(cfg, ArchitectureKind::causal_decoder, 5)));
  CHECK(a.at("decoder/layer_00/ff_norm")[0] == 1.0);
  CHECK(a.at("decoder/rel_bias")[0] == 0.0);

  auto ed = init_params(desk_config(ArchitectureKind::encoder_decoder), ArchitectureKind::encoder_decoder, 4);
  CHECK(ed.contains("decoder/layer_00/cross_attn/q"));
  CHECK(!a.contains("decoder/layer_00/cross_attn/q"));
  CHECK(ed.contains("encoder/layer_01/ff/gate"));
  CHECK(ed.total_count() == count_params(desk_config(ArchitectureKind::encoder_decoder), ArchitectureKind::encoder_decoder));
}

TEST_CASE("count_params") {
  const double cd = static_cast<double>(count_params(reference_config(ArchitectureKind::causal_decoder),
                                                     ArchitectureKind::causal_decoder));
  const double ed = static_cast<double>(count_params(reference_config(ArchitectureKind::encoder_decoder),
                                                     ArchitectureKind::encoder_decoder));
  CHECK(std::abs(cd - 4.8e9) / 4.8e9 < 0.02);
  CHECK(std::abs(ed - 11.0e9) / 11.0e9 < 0.02);

  // Hand sum for d=8, ff=16, heads=2, 1 layer, vocab 11, tied, 8 buckets:
  //   embedding 11*8 = 88; attention 4*8*8 = 256; GEGLU 3*8*16 = 384;
  //   two layer gains 16; final gain 8; bias table 8*2 = 16.
  CHECK(count_params(toy_config(ArchitectureKind::causal_decoder), ArchitectureKind::causal_decoder) ==
        88 + 256 + 384 + 16 + 8 + 16);
  // Untied adds an 8x11 output projection.
  auto untied = toy_config(ArchitectureKind::causal_decoder);
  untied.tied_embeddings = false;
  CHECK(count_params(untied, ArchitectureKind::causal_decoder) == 768 + 88);

  for (int layers = 1; layers < 4; ++layers) {
    auto c = desk_config(ArchitectureKind::causal_decoder);
    c.decoder_layers = layers;
    CHECK(count_params(c, ArchitectureKind::causal_decoder) == count_params(c, ArchitectureKind::non_causal_decoder));
  }
}

TEST_CASE("config validation") {
  auto c = desk_config(ArchitectureKind::causal_decoder);
  c.n_heads = 3;
  CHECK_THROWS_AS(c.validate(ArchitectureKind::causal_decoder), ValidationError);
  CHECK_THROWS_AS(desk_config(ArchitectureKind::causal_decoder).validate(ArchitectureKind::encoder_decoder),
                  ValidationError);
}

TEST_CASE("forward matches the scalar oracle") {
  for (auto [arch, prefix] : {std::pair{ArchitectureKind::causal_decoder, 0},
                              std::pair{ArchitectureKind::non_causal_decoder, 4}}) {
    auto cfg = toy_config(arch);
    auto params = toy_params(cfg, arch, 21);
    Rng rng(8);
    auto tokens = random_tokens(rng, 7, cfg.vocab_size);
    auto batch = arch == ArchitectureKind::non_causal_decoder ? lm_batch({tokens}, prefix) : lm_batch({tokens});
    auto logits = forward(params, cfg, arch, batch, Mode::infer, 0);
    auto oracle = oracle_logits(params, cfg, tokens, prefix);
    double worst = 0;
    for (std::size_t t = 0; t < tokens.size(); ++t)
      for (int w = 0; w < cfg.vocab_size; ++w)
        worst = std::max(worst, std::abs(logits.at(t, static_cast<std::size_t>(w)) - oracle[t][static_cast<std::size_t>(w)]));
    CHECK(worst < 1e-10);
  }
}

TEST_CASE("ND with prefix 0 or 1 equals CD bitwise") {
  auto cfg = toy_config(ArchitectureKind::causal_decoder);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto params = toy_params(cfg, ArchitectureKind::causal_decoder, seed);
    Rng rng(seed);
    auto tokens = random_tokens(rng, 9, cfg.vocab_size);
    auto cd = forward(params, cfg, ArchitectureKind::causal_decoder, lm_batch({tokens}), Mode::infer, 0);
    for (int p : {0, 1}) {
      auto nd = forward(params, cfg, ArchitectureKind::non_causal_decoder, lm_batch({tokens}, p), Mode::infer, 0);
      CHECK(nd.identical(cd));
    }
  }
}

TEST_CASE("dropout only acts in train mode") {
  auto cfg = toy_config(ArchitectureKind::causal_decoder);
  cfg.dropout_rate = 0.1;
  auto params = toy_params(cfg, ArchitectureKind::causal_decoder, 3);
  Rng rng(1);
  auto batch = lm_batch({random_tokens(rng, 6, cfg.vocab_size)});
  auto a = forward(params, cfg, ArchitectureKind::causal_decoder, batch, Mode::infer, 1);
  auto b = forward(params, cfg, ArchitectureKind::causal_decoder, batch, Mode::infer, 2);
  CHECK(a.identical(b));
  auto t1 = forward(params, cfg, ArchitectureKind::causal_decoder, batch, Mode::train, 1);
  auto t1b = forward(params, cfg, ArchitectureKind::causal_decoder, batch, Mode::train, 1);
  auto t2 = forward(params, cfg, ArchitectureKind::causal_decoder, batch, Mode::train, 2);
  CHECK(t1.identical(t1b));
  CHECK(!t1.identical(t2));
  CHECK(!t1.identical(a));
}

TEST_CASE("forward rejects inconsistent batch and architecture") {
  auto cfg = toy_config(ArchitectureKind::causal_decoder);
  auto params = init_params(cfg, ArchitectureKind::causal_decoder, 1);
  auto plain = lm_batch({{2, 3, 4}});
  CHECK_THROWS_AS(forward(params, cfg, ArchitectureKind::non_causal_decoder, plain, Mode::infer, 0), Error);
  CHECK_THROWS_AS(forward(params, cfg, ArchitectureKind::causal_decoder, lm_batch({{2, 3, 4}}, 1), Mode::infer, 0),
                  Error);
  auto edcfg = toy_config(ArchitectureKind::encoder_decoder);
  auto edp = init_params(edcfg, ArchitectureKind::encoder_decoder, 1);
  CHECK_THROWS_AS(forward(edp, edcfg, ArchitectureKind::encoder_decoder, plain, Mode::infer, 0), Error);
  CHECK_THROWS_AS(forward(params, cfg, ArchitectureKind::causal_decoder, ed_batch({{2, 3}}, {{4, 5}}), Mode::infer, 0),
                  Error);
  CHECK_THROWS_AS(forward(params, cfg, ArchitectureKind::causal_decoder, lm_batch({{2, 30}}), Mode::infer, 0), Error);
}

TEST_CASE("loss_and_zloss") {
  const std::size_t V = 7;
  Tensor zeros({2, V});
  std::vector<int> targets{3, 5};
  std::vector<std::uint8_t> mask{1, 1};
  auto r = loss_and_zloss(zeros, targets, mask, 1e-4);
  CHECK(r.cross_entropy == doctest::Approx(std::log(7.0)).epsilon(1e-14));
  CHECK(r.z_loss == doctest::Approx(1e-4 * std::log(7.0) * std::log(7.0)).epsilon(1e-14));
  CHECK(r.tokens_trained == 2);

  std::vector<std::uint8_t> none{0, 0};
  auto e = loss_and_zloss(zeros, targets, none, 1e-4);
  CHECK(e.cross_entropy == 0.0);
  CHECK(e.z_loss == 0.0);
  CHECK(e.tokens_trained == 0);

  Rng rng(4);
  Tensor logits({2, V});
  for (auto& v : logits.data()) v = rng.normal() * 2;
  auto got = loss_and_zloss(logits, targets, mask, 1e-4);
  long double ce = 0, zz = 0;
  for (std::size_t t = 0; t < 2; ++t) {
    long double z = 0;
    for (std::size_t w = 0; w < V; ++w) z += std::exp(static_cast<long double>(logits.at(t, w)));
    ce += std::log(z) - logits.at(t, static_cast<std::size_t>(targets[t]));
    zz += std::log(z) * std::log(z);
  }
  CHECK(std::abs(got.cross_entropy - static_cast<double>(ce / 2)) < 1e-12);
  CHECK(std::abs(got.z_loss - static_cast<double>(1e-4L * zz / 2)) < 1e-12);

  std::vector<int> bad{3, 9};
  CHECK_THROWS_AS(loss_and_zloss(zeros, bad, mask, 1e-4), Error);
}

TEST_CASE("causality: future tokens never change causal logits") {
  auto cfg = toy_config(ArchitectureKind::causal_decoder);
  auto params = toy_params(cfg, ArchitectureKind::causal_decoder, 6);
  Rng rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    auto tokens = random_tokens(rng, 8, cfg.vocab_size);
    auto base = forward(params, cfg, ArchitectureKind::causal_decoder, lm_batch({tokens}), Mode::infer, 0);
    const auto t = static_cast<std::size_t>(rng.between(0, 6));
    auto perturbed = tokens;
    const auto k = static_cast<std::size_t>(rng.between(static_cast<std::int64_t>(t) + 1, 7));
    perturbed[k] = 2 + (perturbed[k] - 1) % (cfg.vocab_size - 2);
    auto out = forward(params, cfg, ArchitectureKind::causal_decoder, lm_batch({perturbed}), Mode::infer, 0);
    for (std::size_t pos = 0; pos < k; ++pos)
      for (std::size_t w = 0; w < 11; ++w) CHECK(out.at(pos, w) == base.at(pos, w));
  }
}

TEST_CASE("prefix visibility: prefix edits reach back, suffix edits do not") {
  auto cfg = toy_config(ArchitectureKind::non_causal_decoder);
  auto params = toy_params(cfg, ArchitectureKind::non_causal_decoder, 8);
  Rng rng(17);
  const auto arch = ArchitectureKind::non_causal_decoder;
  for (int trial = 0; trial < 20; ++trial) {
    auto tokens = random_tokens(rng, 8, cfg.vocab_size);
    const int prefix = 4;
    auto base = forward(params, cfg, arch, lm_batch({tokens}, prefix), Mode::infer, 0);
    auto edited = tokens;
    edited[3] = 2 + (edited[3] - 1) % (cfg.vocab_size - 2);
    auto moved = forward(params, cfg, arch, lm_batch({edited}, prefix), Mode::infer, 0);
    double change = 0;
    for (std::size_t w = 0; w < 11; ++w) change += std::abs(moved.at(0, w) - base.at(0, w));
    CHECK(change > 0);  // position 0 sees position 3 inside the prefix
    edited = tokens;
    edited[6] = 2 + (edited[6] - 1) % (cfg.vocab_size - 2);
    auto suffix = forward(params, cfg, arch, lm_batch({edited}, prefix), Mode::infer, 0);
    for (std::size_t pos = 0; pos < 6; ++pos)
      for (std::size_t w = 0; w < 11; ++w) CHECK(suffix.at(pos, w) == base.at(pos, w));
  }
}

TEST_CASE("segment isolation in packed rows") {
  Rng rng(23);
  for (auto arch : {ArchitectureKind::causal_decoder, ArchitectureKind::non_causal_decoder,
                    ArchitectureKind::encoder_decoder}) {
    auto cfg = toy_config(arch);
    auto params = toy_params(cfg, arch, 12);
    for (int trial = 0; trial < 10; ++trial) {
      std::vector<PlmPair> pairs{{random_tokens(rng, 7, 11), random_tokens(rng, 7, 11)}};
      Rng split(static_cast<std::uint64_t>(trial));
      auto packed = pack_plm(pairs, 6, arch, split).batch;
      auto base = forward(params, cfg, arch, packed, Mode::infer, 0);
      // Change every token of the second example, in both streams.
      auto edited = packed;
      for (std::size_t i = 0; i < edited.input_ids.size(); ++i)
        if (edited.segment_ids[i] == 1) edited.input_ids[i] = 2 + (edited.input_ids[i] - 1) % 9;
      for (std::size_t i = 0; i < edited.encoder_ids.size(); ++i)
        if (edited.encoder_segments[i] == 1) edited.encoder_ids[i] = 2 + (edited.encoder_ids[i] - 1) % 9;
      auto out = forward(params, cfg, arch, edited, Mode::infer, 0);
      for (std::size_t pos = 0; pos < packed.seq_len; ++pos) {
        if (packed.segment_ids[pos] != 0) continue;
        for (std::size_t w = 0; w < 11; ++w) CHECK(out.at(pos, w) == base.at(pos, w));
      }
    }
  }
}

TEST_CASE("ED accepts an empty encoder stream") {
  auto cfg = toy_config(ArchitectureKind::encoder_decoder);
  auto params = toy_params(cfg, ArchitectureKind::encoder_decoder, 2);
  auto batch = lm_batch({{2, 3, 4, 5}});
  batch.has_encoder = true;
  auto logits = forward(params, cfg, ArchitectureKind::encoder_decoder, batch, Mode::infer, 0);
  CHECK(logits.all_finite());
  auto step = loss_and_gradients(params, cfg, ArchitectureKind::encoder_decoder, batch, Mode::train, 0, 1e-4);
  CHECK(step.grads.all_finite());
}

TEST_CASE("end-to-end gradients match finite differences") {
  for (auto arch : {ArchitectureKind::causal_decoder, ArchitectureKind::non_causal_decoder,
                    ArchitectureKind::encoder_decoder}) {
    auto cfg = toy_config(arch);
    cfg.dropout_rate = 0.1;
    auto params = toy_params(cfg, arch, 31);
    Rng rng(2);
    PackedBatch batch;
    if (arch == ArchitectureKind::encoder_decoder) {
      batch = ed_batch({random_tokens(rng, 5, 11), random_tokens(rng, 5, 11)},
                       {random_tokens(rng, 4, 11), random_tokens(rng, 4, 11)});
    } else if (arch == ArchitectureKind::non_causal_decoder) {
      batch = lm_batch({random_tokens(rng, 6, 11), random_tokens(rng, 6, 11)}, 3);
      batch.loss_mask[0] = 0;
    } else {
      batch = lm_batch({random_tokens(rng, 6, 11), random_tokens(rng, 6, 11)});
    }
    auto op = model_loss_op(cfg, arch, batch, params.paths());
    CHECK(numeric::grad_check(op, as_map(params), 5) < 1e-3);
  }
}
