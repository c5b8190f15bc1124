#include "ptlab/model/transformer.hpp"

#include <cmath>
#include <cstdio>
#include <string>
#include <thread>
#include <vector>

#include "ptlab/core/error.hpp"
#include "ptlab/core/rng.hpp"
#include "ptlab/model/mask.hpp"
#include "ptlab/numeric/eigen.hpp"
#include "ptlab/numeric/ops.hpp"

namespace ptlab {

namespace {

// ---------------------------------------------------------------------------
// Parameter layout

enum class StackKind { decoder, encoder };

std::string stack_name(StackKind s) { return s == StackKind::decoder ? "decoder" : "encoder"; }

std::string layer_prefix(StackKind s, int layer) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "/layer_%02d/", layer);
  return stack_name(s) + buf;
}

std::uint64_t path_hash(const std::string& path) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : path) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

struct LayoutEntry {
  std::string path;
  Shape shape;
  enum { projection, embedding, gain, bias_table } init;
};

std::vector<LayoutEntry> layout(const ModelConfig& c, ArchitectureKind arch) {
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto f = static_cast<std::size_t>(c.d_ff);
  const auto v = static_cast<std::size_t>(c.vocab_size);
  const auto nb = static_cast<std::size_t>(c.rel_bias.n_buckets);
  const auto h = static_cast<std::size_t>(c.n_heads);
  std::vector<LayoutEntry> out;
  out.push_back({"embedding", {v, d}, LayoutEntry::embedding});
  if (!c.tied_embeddings) out.push_back({"lm_head", {d, v}, LayoutEntry::projection});

  auto add_stack = [&](StackKind s, int layers, bool cross) {
    out.push_back({stack_name(s) + "/rel_bias", {nb, h}, LayoutEntry::bias_table});
    out.push_back({stack_name(s) + "/final_norm", {d}, LayoutEntry::gain});
    for (int l = 0; l < layers; ++l) {
      const std::string p = layer_prefix(s, l);
      for (const char* w : {"q", "k", "v", "o"}) out.push_back({p + "self_attn/" + w, {d, d}, LayoutEntry::projection});
      out.push_back({p + "self_attn_norm", {d}, LayoutEntry::gain});
      if (cross) {
        for (const char* w : {"q", "k", "v", "o"}) out.push_back({p + "cross_attn/" + w, {d, d}, LayoutEntry::projection});
        out.push_back({p + "cross_attn_norm", {d}, LayoutEntry::gain});
      }
      out.push_back({p + "ff/gate", {d, f}, LayoutEntry::projection});
      out.push_back({p + "ff/lin", {d, f}, LayoutEntry::projection});
      out.push_back({p + "ff/out", {f, d}, LayoutEntry::projection});
      out.push_back({p + "ff_norm", {d}, LayoutEntry::gain});
    }
  };
  const bool ed = arch == ArchitectureKind::encoder_decoder;
  if (ed) add_stack(StackKind::encoder, c.encoder_layers, false);
  add_stack(StackKind::decoder, c.decoder_layers, ed);
  return out;
}

// ---------------------------------------------------------------------------
// Small helpers

ConstMatView view(const ParamTree& p, const std::string& path) { return as_matrix(p.at(path)); }

void for_each_index(int count, int threads, const auto& fn) {
  if (threads <= 1 || count <= 1) {
    for (int i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  const int workers = std::min(threads, count);
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (int i = w; i < count; i += workers) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

struct Dropout {
  std::vector<double> scale;  // empty means identity
};

Dropout make_dropout(bool active, double rate, std::uint64_t seed, std::uint64_t site, std::size_t count) {
  Dropout d;
  if (!active || rate <= 0.0) return d;
  d.scale.resize(count);
  const double keep = 1.0 / (1.0 - rate);
  for (std::size_t i = 0; i < count; ++i) d.scale[i] = hashed_uniform(seed, site, i) < rate ? 0.0 : keep;
  return d;
}

void apply_dropout(const Dropout& d, RowMat& m) {
  if (d.scale.empty()) return;
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] *= d.scale[static_cast<std::size_t>(i)];
}

std::uint64_t dropout_site(StackKind s, int layer, int sublayer) {
  return (s == StackKind::decoder ? 1u : 2u) * 100000u + static_cast<std::uint64_t>(layer) * 10u +
         static_cast<std::uint64_t>(sublayer);
}

// ---------------------------------------------------------------------------
// Attention plans: which keys each query sees and which bias bucket it reads.

struct RowPlan {
  BoolMatrix visibility;
  std::vector<int> buckets;  // empty when the attention has no position bias
  std::vector<std::uint8_t> any_visible;
};

struct BucketTable {
  std::size_t span = 0;
  std::vector<int> uni;
  std::vector<int> bi;

  BucketTable(const RelativeBiasConfig& cfg, std::size_t max_len) : span(max_len) {
    const std::size_t n = 2 * max_len + 1;
    uni.resize(n);
    bi.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto rel = static_cast<std::int64_t>(i) - static_cast<std::int64_t>(max_len);
      uni[i] = numeric::relative_position_bucket(rel, false, cfg.n_buckets, cfg.max_distance);
      bi[i] = numeric::relative_position_bucket(rel, true, cfg.n_buckets, cfg.max_distance);
    }
  }
  int get(std::size_t q, std::size_t k, bool bidirectional) const {
    const std::size_t idx = k + span - q;
    return bidirectional ? bi[idx] : uni[idx];
  }
};

void finish_plan(RowPlan& plan) {
  plan.any_visible.assign(plan.visibility.rows, 0);
  for (std::size_t i = 0; i < plan.visibility.rows; ++i) {
    for (std::size_t j = 0; j < plan.visibility.cols; ++j) {
      if (plan.visibility(i, j)) {
        plan.any_visible[i] = 1;
        break;
      }
    }
  }
}

RowPlan self_plan(std::span<const int> segments, const std::vector<int>* prefix_lens, bool encoder,
                  const BucketTable& buckets) {
  const std::size_t n = segments.size();
  RowPlan plan;
  BoolMatrix bidir(n, n, encoder);
  if (encoder) {
    plan.visibility = build_mask(MaskKind::full, n, std::nullopt, segments).visibility;
  } else if (prefix_lens) {
    plan.visibility = build_packed_mask(MaskKind::prefix, segments, *prefix_lens).visibility;
    bidir = bidirectional_region(segments, *prefix_lens);
  } else {
    plan.visibility = build_mask(MaskKind::causal, n, std::nullopt, segments).visibility;
  }
  plan.buckets.resize(n * n);
  for (std::size_t q = 0; q < n; ++q) {
    for (std::size_t k = 0; k < n; ++k) plan.buckets[q * n + k] = buckets.get(q, k, bidir(q, k));
  }
  finish_plan(plan);
  return plan;
}

// ---------------------------------------------------------------------------
// Caches

struct NormCache {
  RowMat input;
  std::vector<double> inv_rms;
  RowMat output;
};

struct AttnCache {
  RowMat q, k, v;
  std::vector<RowMat> probs;  // per (head, row), [Lq x Lk]
  RowMat context;
};

struct FfCache {
  RowMat gate, lin, hidden;
};

struct LayerCache {
  NormCache sa_norm;
  AttnCache sa;
  Dropout sa_drop;
  NormCache ca_norm;
  AttnCache ca;
  Dropout ca_drop;
  NormCache ff_norm;
  FfCache ff;
  Dropout ff_drop;
};

struct StackCache {
  Dropout embed_drop;
  std::vector<LayerCache> layers;
  NormCache final_norm;
};

struct Geometry {
  int batch = 0;
  int heads = 0;
  int head_dim = 0;
  std::size_t q_len = 0;
  std::size_t k_len = 0;
};

// ---------------------------------------------------------------------------
// Forward kernels

void norm_forward(const RowMat& x, const Tensor& gain, double eps, NormCache& cache, Precision prec) {
  cache.input = x;
  cache.output.resize(x.rows(), x.cols());
  cache.inv_rms.resize(static_cast<std::size_t>(x.rows()));
  const auto d = static_cast<std::size_t>(x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    std::span<const double> in(x.data() + r * x.cols(), d);
    std::span<double> out(cache.output.data() + r * x.cols(), d);
    cache.inv_rms[static_cast<std::size_t>(r)] = numeric::rms_norm_row(in, gain.data(), eps, out);
  }
  quantize(cache.output, prec);
}

void norm_backward(const NormCache& cache, const Tensor& gain, const RowMat& grad_out, RowMat& grad_in,
                   Tensor& grad_gain) {
  grad_in.resize(cache.input.rows(), cache.input.cols());
  const auto d = static_cast<std::size_t>(cache.input.cols());
  for (Eigen::Index r = 0; r < cache.input.rows(); ++r) {
    const auto off = r * cache.input.cols();
    numeric::rms_norm_row_backward(std::span<const double>(cache.input.data() + off, d), gain.data(),
                                   cache.inv_rms[static_cast<std::size_t>(r)],
                                   std::span<const double>(grad_out.data() + off, d),
                                   std::span<double>(grad_in.data() + off, d), grad_gain.data());
  }
}

void attention_forward(const RowMat& xq, const RowMat& xkv, const ParamTree& params, const std::string& prefix,
                       const Tensor* bias_table, const std::vector<RowPlan>& plans, const Geometry& g,
                       AttnCache& cache, RowMat& out, const ComputeOptions& opt) {
  cache.q = xq * view(params, prefix + "q");
  cache.k = xkv * view(params, prefix + "k");
  cache.v = xkv * view(params, prefix + "v");
  quantize(cache.q, opt.precision);
  quantize(cache.k, opt.precision);
  quantize(cache.v, opt.precision);
  cache.context = RowMat::Zero(xq.rows(), xq.cols());
  cache.probs.assign(static_cast<std::size_t>(g.heads * g.batch), RowMat());
  const double scale = 1.0 / std::sqrt(static_cast<double>(g.head_dim));
  const auto lq = static_cast<Eigen::Index>(g.q_len);
  const auto lk = static_cast<Eigen::Index>(g.k_len);
  const Eigen::Index dh = g.head_dim;

  for_each_index(g.heads, opt.threads, [&](int h) {
    for (int b = 0; b < g.batch; ++b) {
      RowMat& p = cache.probs[static_cast<std::size_t>(h * g.batch + b)];
      p = RowMat::Zero(lq, lk);
      if (lk == 0) continue;
      const RowPlan& plan = plans[static_cast<std::size_t>(b)];
      RowMat scores = cache.q.block(b * lq, h * dh, lq, dh) * cache.k.block(b * lk, h * dh, lk, dh).transpose();
      scores *= scale;
      if (bias_table) {
        for (Eigen::Index i = 0; i < lq; ++i) {
          for (Eigen::Index j = 0; j < lk; ++j) {
            scores(i, j) += bias_table->at(static_cast<std::size_t>(plan.buckets[static_cast<std::size_t>(i * lk + j)]),
                                           static_cast<std::size_t>(h));
          }
        }
      }
      quantize(scores, opt.precision);
      for (Eigen::Index i = 0; i < lq; ++i) {
        if (!plan.any_visible[static_cast<std::size_t>(i)]) continue;
        numeric::softmax_row(std::span<const double>(scores.data() + i * lk, static_cast<std::size_t>(lk)),
                             plan.visibility.row(static_cast<std::size_t>(i)),
                             std::span<double>(p.data() + i * lk, static_cast<std::size_t>(lk)));
      }
      quantize(p, opt.precision);
      cache.context.block(b * lq, h * dh, lq, dh).noalias() = p * cache.v.block(b * lk, h * dh, lk, dh);
    }
  });
  quantize(cache.context, opt.precision);
  out = cache.context * view(params, prefix + "o");
  quantize(out, opt.precision);
}

struct AttnGrads {
  Tensor* q;
  Tensor* k;
  Tensor* v;
  Tensor* o;
  Tensor* bias_table;  // may be null
};

/// Accumulates parameter gradients; overwrites grad_xq and adds into grad_xkv.
void attention_backward(const RowMat& xq, const RowMat& xkv, const ParamTree& params, const std::string& prefix,
                        const std::vector<RowPlan>& plans, const Geometry& g, const AttnCache& cache,
                        const RowMat& grad_out, AttnGrads grads, RowMat& grad_xq, RowMat& grad_xkv,
                        const ComputeOptions& opt) {
  as_matrix(*grads.o).noalias() += cache.context.transpose() * grad_out;
  const RowMat grad_ctx = grad_out * view(params, prefix + "o").transpose();
  RowMat dq = RowMat::Zero(cache.q.rows(), cache.q.cols());
  RowMat dk = RowMat::Zero(cache.k.rows(), cache.k.cols());
  RowMat dv = RowMat::Zero(cache.v.rows(), cache.v.cols());
  const double scale = 1.0 / std::sqrt(static_cast<double>(g.head_dim));
  const auto lq = static_cast<Eigen::Index>(g.q_len);
  const auto lk = static_cast<Eigen::Index>(g.k_len);
  const Eigen::Index dh = g.head_dim;

  if (lk > 0) {
    for_each_index(g.heads, opt.threads, [&](int h) {
      for (int b = 0; b < g.batch; ++b) {
        const RowMat& p = cache.probs[static_cast<std::size_t>(h * g.batch + b)];
        const RowPlan& plan = plans[static_cast<std::size_t>(b)];
        const auto dctx = grad_ctx.block(b * lq, h * dh, lq, dh);
        const RowMat dp = dctx * cache.v.block(b * lk, h * dh, lk, dh).transpose();
        dv.block(b * lk, h * dh, lk, dh).noalias() = p.transpose() * dctx;
        RowMat ds(lq, lk);
        for (Eigen::Index i = 0; i < lq; ++i) {
          numeric::softmax_row_backward(std::span<const double>(p.data() + i * lk, static_cast<std::size_t>(lk)),
                                        std::span<const double>(dp.data() + i * lk, static_cast<std::size_t>(lk)),
                                        0.0, std::span<double>(ds.data() + i * lk, static_cast<std::size_t>(lk)));
        }
        if (grads.bias_table) {
          for (Eigen::Index i = 0; i < lq; ++i) {
            for (Eigen::Index j = 0; j < lk; ++j) {
              grads.bias_table->at(static_cast<std::size_t>(plan.buckets[static_cast<std::size_t>(i * lk + j)]),
                                   static_cast<std::size_t>(h)) += ds(i, j);
            }
          }
        }
        ds *= scale;
        dq.block(b * lq, h * dh, lq, dh).noalias() = ds * cache.k.block(b * lk, h * dh, lk, dh);
        dk.block(b * lk, h * dh, lk, dh).noalias() = ds.transpose() * cache.q.block(b * lq, h * dh, lq, dh);
      }
    });
  }
  as_matrix(*grads.q).noalias() += xq.transpose() * dq;
  as_matrix(*grads.k).noalias() += xkv.transpose() * dk;
  as_matrix(*grads.v).noalias() += xkv.transpose() * dv;
  grad_xq.noalias() = dq * view(params, prefix + "q").transpose();
  grad_xkv.noalias() += dk * view(params, prefix + "k").transpose();
  grad_xkv.noalias() += dv * view(params, prefix + "v").transpose();
}

void ff_forward(const RowMat& x, const ParamTree& params, const std::string& prefix, FfCache& cache,
                RowMat& out, Precision prec) {
  cache.gate = x * view(params, prefix + "gate");
  cache.lin = x * view(params, prefix + "lin");
  quantize(cache.gate, prec);
  quantize(cache.lin, prec);
  cache.hidden.resize(cache.gate.rows(), cache.gate.cols());
  for (Eigen::Index i = 0; i < cache.gate.size(); ++i) {
    cache.hidden.data()[i] = numeric::gelu(cache.gate.data()[i]) * cache.lin.data()[i];
  }
  quantize(cache.hidden, prec);
  out = cache.hidden * view(params, prefix + "out");
  quantize(out, prec);
}

void ff_backward(const RowMat& x, const ParamTree& params, const std::string& prefix, const FfCache& cache,
                 const RowMat& grad_out, ParamTree& grads, RowMat& grad_x) {
  as_matrix(grads.at(prefix + "out")).noalias() += cache.hidden.transpose() * grad_out;
  const RowMat d_hidden = grad_out * view(params, prefix + "out").transpose();
  RowMat d_gate(cache.gate.rows(), cache.gate.cols());
  RowMat d_lin(cache.gate.rows(), cache.gate.cols());
  for (Eigen::Index i = 0; i < cache.gate.size(); ++i) {
    const double a = cache.gate.data()[i];
    d_gate.data()[i] = d_hidden.data()[i] * cache.lin.data()[i] * numeric::gelu_derivative(a);
    d_lin.data()[i] = d_hidden.data()[i] * numeric::gelu(a);
  }
  as_matrix(grads.at(prefix + "gate")).noalias() += x.transpose() * d_gate;
  as_matrix(grads.at(prefix + "lin")).noalias() += x.transpose() * d_lin;
  grad_x.noalias() = d_gate * view(params, prefix + "gate").transpose();
  grad_x.noalias() += d_lin * view(params, prefix + "lin").transpose();
}

// ---------------------------------------------------------------------------
// The model

class Transformer {
 public:
  Transformer(const ParamTree& params, const ModelConfig& config, ArchitectureKind arch, const PackedBatch& batch,
              Mode mode, std::uint64_t dropout_seed, const ComputeOptions& options)
      : params_(params), config_(config), arch_(arch), batch_(batch), train_(mode == Mode::train),
        seed_(dropout_seed), opt_(options) {
    check_pairing();
    const std::size_t longest = std::max(batch.seq_len, batch.encoder_len);
    BucketTable buckets(config.rel_bias, longest);
    for (std::size_t b = 0; b < batch.batch_size; ++b) {
      std::span<const int> segs(batch.segment_ids.data() + b * batch.seq_len, batch.seq_len);
      const std::vector<int>* prefix = batch.prefix_lens ? &(*batch.prefix_lens)[b] : nullptr;
      decoder_plans_.push_back(self_plan(segs, prefix, false, buckets));
      if (ed()) {
        std::span<const int> enc(batch.encoder_segments.data() + b * batch.encoder_len, batch.encoder_len);
        encoder_plans_.push_back(self_plan(enc, nullptr, true, buckets));
        RowPlan cross;
        cross.visibility = cross_visibility(segs, enc);
        finish_plan(cross);
        cross_plans_.push_back(std::move(cross));
      }
    }
  }

  Tensor run_forward() {
    if (ed()) encoder_out_ = run_stack(StackKind::encoder, batch_.encoder_ids, encoder_cache_, nullptr);
    const RowMat y = run_stack(StackKind::decoder, batch_.input_ids, decoder_cache_, ed() ? &encoder_out_ : nullptr);
    Tensor logits({batch_.positions(), static_cast<std::size_t>(config_.vocab_size)}, opt_.precision);
    auto out = as_matrix(logits);
    if (config_.tied_embeddings) {
      out.noalias() = (y * output_scale()) * view(params_, "embedding").transpose();
    } else {
      out.noalias() = y * view(params_, "lm_head");
    }
    decoder_out_ = y;
    logits.quantize();
    return logits;
  }

  ParamTree run_backward(const Tensor& grad_logits) {
    ParamTree grads = params_.zeros_like();
    const auto dl = as_matrix(grad_logits);
    RowMat dy;
    if (config_.tied_embeddings) {
      const double s = output_scale();
      as_matrix(grads.at("embedding")).noalias() += dl.transpose() * (decoder_out_ * s);
      dy = (dl * view(params_, "embedding")) * s;
    } else {
      as_matrix(grads.at("lm_head")).noalias() += decoder_out_.transpose() * dl;
      dy = dl * view(params_, "lm_head").transpose();
    }
    RowMat d_enc;
    if (ed()) d_enc = RowMat::Zero(encoder_out_.rows(), encoder_out_.cols());
    backprop_stack(StackKind::decoder, batch_.input_ids, decoder_cache_, dy, ed() ? &encoder_out_ : nullptr,
                   ed() ? &d_enc : nullptr, grads);
    if (ed()) backprop_stack(StackKind::encoder, batch_.encoder_ids, encoder_cache_, d_enc, nullptr, nullptr, grads);
    if (opt_.precision == Precision::low) {
      for (auto& [_, t] : grads) t.set_precision(Precision::low);
    }
    return grads;
  }

 private:
  bool ed() const { return arch_ == ArchitectureKind::encoder_decoder; }
  double output_scale() const { return 1.0 / std::sqrt(static_cast<double>(config_.d_model)); }

  void check_pairing() const {
    config_.validate(arch_);
    batch_.validate();
    const std::string name = short_name(arch_);
    if (ed() && !batch_.has_encoder) throw Error("ED forward needs a batch with an encoder stream");
    if (!ed() && batch_.has_encoder) throw Error(name + " forward got a batch with an encoder stream");
    if (arch_ == ArchitectureKind::non_causal_decoder && !batch_.prefix_lens) {
      throw Error("ND forward needs prefix lengths in the batch");
    }
    if (arch_ != ArchitectureKind::non_causal_decoder && batch_.prefix_lens) {
      throw Error(name + " forward got a batch with prefix lengths");
    }
    auto check_ids = [&](const std::vector<int>& ids) {
      for (int id : ids) {
        if (id < 0 || id >= config_.vocab_size) throw Error("token id " + std::to_string(id) + " outside vocabulary");
      }
    };
    check_ids(batch_.input_ids);
    check_ids(batch_.encoder_ids);
  }

  Geometry self_geometry(StackKind s) const {
    const std::size_t len = s == StackKind::decoder ? batch_.seq_len : batch_.encoder_len;
    return {static_cast<int>(batch_.batch_size), config_.n_heads, config_.head_dim(), len, len};
  }

  Geometry cross_geometry() const {
    return {static_cast<int>(batch_.batch_size), config_.n_heads, config_.head_dim(), batch_.seq_len,
            batch_.encoder_len};
  }

  RowMat embed(const std::vector<int>& ids) const {
    const auto emb = view(params_, "embedding");
    RowMat x(static_cast<Eigen::Index>(ids.size()), config_.d_model);
    for (std::size_t i = 0; i < ids.size(); ++i) x.row(static_cast<Eigen::Index>(i)) = emb.row(ids[i]);
    return x;
  }

  Dropout dropout(StackKind s, int layer, int sub, std::size_t count) const {
    return make_dropout(train_, config_.dropout_rate, seed_, dropout_site(s, layer, sub), count);
  }

  RowMat run_stack(StackKind s, const std::vector<int>& ids, StackCache& cache, const RowMat* memory) {
    const auto& plans = s == StackKind::decoder ? decoder_plans_ : encoder_plans_;
    const std::string sname = stack_name(s);
    const Tensor& bias = params_.at(sname + "/rel_bias");
    const Precision prec = opt_.precision;
    const int layers = s == StackKind::decoder ? config_.decoder_layers : config_.encoder_layers;

    RowMat x = embed(ids);
    cache.embed_drop = dropout(s, 0, 0, static_cast<std::size_t>(x.size()));
    apply_dropout(cache.embed_drop, x);
    cache.layers.assign(static_cast<std::size_t>(layers), LayerCache());
    RowMat sub;
    for (int l = 0; l < layers; ++l) {
      LayerCache& lc = cache.layers[static_cast<std::size_t>(l)];
      const std::string p = layer_prefix(s, l);

      norm_forward(x, params_.at(p + "self_attn_norm"), config_.norm_epsilon, lc.sa_norm, prec);
      attention_forward(lc.sa_norm.output, lc.sa_norm.output, params_, p + "self_attn/", &bias, plans,
                        self_geometry(s), lc.sa, sub, opt_);
      lc.sa_drop = dropout(s, l, 1, static_cast<std::size_t>(sub.size()));
      apply_dropout(lc.sa_drop, sub);
      x += sub;
      quantize(x, prec);

      if (memory) {
        norm_forward(x, params_.at(p + "cross_attn_norm"), config_.norm_epsilon, lc.ca_norm, prec);
        attention_forward(lc.ca_norm.output, *memory, params_, p + "cross_attn/", nullptr, cross_plans_,
                          cross_geometry(), lc.ca, sub, opt_);
        lc.ca_drop = dropout(s, l, 2, static_cast<std::size_t>(sub.size()));
        apply_dropout(lc.ca_drop, sub);
        x += sub;
        quantize(x, prec);
      }

      norm_forward(x, params_.at(p + "ff_norm"), config_.norm_epsilon, lc.ff_norm, prec);
      ff_forward(lc.ff_norm.output, params_, p + "ff/", lc.ff, sub, prec);
      lc.ff_drop = dropout(s, l, 3, static_cast<std::size_t>(sub.size()));
      apply_dropout(lc.ff_drop, sub);
      x += sub;
      quantize(x, prec);
    }
    norm_forward(x, params_.at(sname + "/final_norm"), config_.norm_epsilon, cache.final_norm, prec);
    return cache.final_norm.output;
  }

  void backprop_stack(StackKind s, const std::vector<int>& ids, const StackCache& cache, const RowMat& grad_out,
                      const RowMat* memory, RowMat* grad_memory, ParamTree& grads) {
    const auto& plans = s == StackKind::decoder ? decoder_plans_ : encoder_plans_;
    const std::string sname = stack_name(s);
    Tensor& bias_grad = grads.at(sname + "/rel_bias");
    const int layers = s == StackKind::decoder ? config_.decoder_layers : config_.encoder_layers;

    RowMat dx;
    norm_backward(cache.final_norm, params_.at(sname + "/final_norm"), grad_out, dx, grads.at(sname + "/final_norm"));
    RowMat dsub, dnorm, dinput;
    for (int l = layers - 1; l >= 0; --l) {
      const LayerCache& lc = cache.layers[static_cast<std::size_t>(l)];
      const std::string p = layer_prefix(s, l);

      dsub = dx;
      apply_dropout(lc.ff_drop, dsub);
      ff_backward(lc.ff_norm.output, params_, p + "ff/", lc.ff, dsub, grads, dnorm);
      norm_backward(lc.ff_norm, params_.at(p + "ff_norm"), dnorm, dinput, grads.at(p + "ff_norm"));
      dx += dinput;

      if (memory) {
        dsub = dx;
        apply_dropout(lc.ca_drop, dsub);
        AttnGrads ag{&grads.at(p + "cross_attn/q"), &grads.at(p + "cross_attn/k"), &grads.at(p + "cross_attn/v"),
                     &grads.at(p + "cross_attn/o"), nullptr};
        attention_backward(lc.ca_norm.output, *memory, params_, p + "cross_attn/", cross_plans_, cross_geometry(),
                           lc.ca, dsub, ag, dnorm, *grad_memory, opt_);
        norm_backward(lc.ca_norm, params_.at(p + "cross_attn_norm"), dnorm, dinput, grads.at(p + "cross_attn_norm"));
        dx += dinput;
      }

      dsub = dx;
      apply_dropout(lc.sa_drop, dsub);
      AttnGrads ag{&grads.at(p + "self_attn/q"), &grads.at(p + "self_attn/k"), &grads.at(p + "self_attn/v"),
                   &grads.at(p + "self_attn/o"), &bias_grad};
      RowMat dkv = RowMat::Zero(lc.sa_norm.output.rows(), lc.sa_norm.output.cols());
      attention_backward(lc.sa_norm.output, lc.sa_norm.output, params_, p + "self_attn/", plans, self_geometry(s),
                         lc.sa, dsub, ag, dnorm, dkv, opt_);
      dnorm += dkv;
      norm_backward(lc.sa_norm, params_.at(p + "self_attn_norm"), dnorm, dinput, grads.at(p + "self_attn_norm"));
      dx += dinput;
    }
    apply_dropout(cache.embed_drop, dx);
    auto demb = as_matrix(grads.at("embedding"));
    for (std::size_t i = 0; i < ids.size(); ++i) demb.row(ids[i]) += dx.row(static_cast<Eigen::Index>(i));
  }

  const ParamTree& params_;
  const ModelConfig& config_;
  ArchitectureKind arch_;
  const PackedBatch& batch_;
  bool train_;
  std::uint64_t seed_;
  ComputeOptions opt_;

  std::vector<RowPlan> decoder_plans_;
  std::vector<RowPlan> encoder_plans_;
  std::vector<RowPlan> cross_plans_;
  StackCache decoder_cache_;
  StackCache encoder_cache_;
  RowMat encoder_out_;
  RowMat decoder_out_;
};

}  // namespace

ParamTree init_params(const ModelConfig& config, ArchitectureKind arch, std::uint64_t seed, Precision precision) {
  config.validate(arch);
  ParamTree tree;
  const double proj_std = 1.0 / std::sqrt(static_cast<double>(config.d_model));
  for (const auto& entry : layout(config, arch)) {
    Tensor t(entry.shape, precision);
    switch (entry.init) {
      case LayoutEntry::gain:
        for (auto& v : t.data()) v = 1.0;
        break;
      case LayoutEntry::bias_table:
        break;
      case LayoutEntry::embedding:
      case LayoutEntry::projection: {
        const double std_dev = entry.init == LayoutEntry::embedding ? 1.0 : proj_std;
        Rng rng(mix_seed(seed, path_hash(entry.path)));
        for (auto& v : t.data()) v = rng.normal() * std_dev;
        break;
      }
    }
    t.quantize();
    tree.add(entry.path, std::move(t));
  }
  return tree;
}

std::int64_t count_params(const ModelConfig& config, ArchitectureKind arch) {
  config.validate(arch);
  std::int64_t total = 0;
  for (const auto& entry : layout(config, arch)) total += static_cast<std::int64_t>(element_count(entry.shape));
  return total;
}

Tensor forward(const ParamTree& params, const ModelConfig& config, ArchitectureKind arch, const PackedBatch& batch,
               Mode mode, std::uint64_t dropout_seed, const ComputeOptions& options) {
  Transformer model(params, config, arch, batch, mode, dropout_seed, options);
  return model.run_forward();
}

LossReport loss_and_zloss(const Tensor& logits, std::span<const int> targets, std::span<const std::uint8_t> loss_mask,
                          double z_coefficient) {
  const std::size_t vocab = logits.last_dim();
  if (targets.size() != logits.rows() || loss_mask.size() != logits.rows()) {
    throw Error("loss_and_zloss: targets/loss_mask do not match logits rows");
  }
  LossReport report;
  const std::vector<std::uint8_t> all(vocab, 1);
  std::vector<double> probs(vocab);
  for (std::size_t t = 0; t < targets.size(); ++t) {
    if (targets[t] < 0 || static_cast<std::size_t>(targets[t]) >= vocab) {
      throw Error("target id " + std::to_string(targets[t]) + " outside vocabulary");
    }
    if (!loss_mask[t]) continue;
    const auto row = logits.row(t);
    const double log_z = numeric::softmax_row(row, all, probs);
    // Running means stay exact when every row has the same value.
    const double k = static_cast<double>(++report.tokens_trained);
    report.cross_entropy += (log_z - row[static_cast<std::size_t>(targets[t])] - report.cross_entropy) / k;
    report.z_loss += (log_z * log_z - report.z_loss) / k;
    report.mean_abs_log_z += (std::abs(log_z) - report.mean_abs_log_z) / k;
  }
  report.z_loss *= z_coefficient;
  return report;
}

Tensor loss_gradient(const Tensor& logits, std::span<const int> targets, std::span<const std::uint8_t> loss_mask,
                     double z_coefficient) {
  const std::size_t vocab = logits.last_dim();
  Tensor grad(logits.shape());
  std::int64_t count = 0;
  for (auto m : loss_mask) count += m ? 1 : 0;
  if (count == 0) return grad;
  const double inv_n = 1.0 / static_cast<double>(count);
  const std::vector<std::uint8_t> all(vocab, 1);
  for (std::size_t t = 0; t < targets.size(); ++t) {
    if (!loss_mask[t]) continue;
    auto g = grad.row(t);
    const double log_z = numeric::softmax_row(logits.row(t), all, g);
    const double scale = inv_n * (1.0 + 2.0 * z_coefficient * log_z);
    for (auto& v : g) v *= scale;
    g[static_cast<std::size_t>(targets[t])] -= inv_n;
  }
  return grad;
}

TrainStep loss_and_gradients(const ParamTree& params, const ModelConfig& config, ArchitectureKind arch,
                             const PackedBatch& batch, Mode mode, std::uint64_t dropout_seed, double z_coefficient,
                             const ComputeOptions& options) {
  Transformer model(params, config, arch, batch, mode, dropout_seed, options);
  const Tensor logits = model.run_forward();
  TrainStep step;
  step.loss = loss_and_zloss(logits, batch.target_ids, batch.loss_mask, z_coefficient);
  step.grads = model.run_backward(loss_gradient(logits, batch.target_ids, batch.loss_mask, z_coefficient));
  return step;
}

}  // namespace ptlab
