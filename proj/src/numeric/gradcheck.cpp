#include "ptlab/numeric/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "ptlab/core/error.hpp"
#include "ptlab/core/rng.hpp"
#include "ptlab/numeric/eigen.hpp"
#include "ptlab/numeric/ops.hpp"

namespace ptlab::numeric {

namespace {

const Tensor& input(const TensorMap& inputs, const std::string& name) {
  auto it = inputs.find(name);
  if (it == inputs.end()) throw Error("missing input '" + name + "'");
  return it->second;
}

double scalar_or(const TensorMap& inputs, const std::string& name, double fallback) {
  auto it = inputs.find(name);
  return it == inputs.end() ? fallback : it->second[0];
}

BoolMatrix visibility_of(const TensorMap& inputs, const Tensor& logits) {
  BoolMatrix vis(logits.rows(), logits.last_dim(), true);
  auto it = inputs.find("visibility");
  if (it == inputs.end()) return vis;
  for (std::size_t i = 0; i < vis.bits.size(); ++i) vis.bits[i] = it->second[i] != 0.0 ? 1 : 0;
  return vis;
}

double dot(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

std::vector<DifferentiableOp> build_registry() {
  std::vector<DifferentiableOp> ops;

  ops.push_back({"masked_softmax", {"logits"},
                 [](const TensorMap& in) {
                   const Tensor& logits = input(in, "logits");
                   return masked_softmax(logits, visibility_of(in, logits)).probs;
                 },
                 [](const TensorMap& in, const Tensor& w) {
                   const Tensor& logits = input(in, "logits");
                   auto sm = masked_softmax(logits, visibility_of(in, logits));
                   GradResult r{sm.probs, {}};
                   r.partials["logits"] = masked_softmax_backward(sm.probs, w, nullptr);
                   return r;
                 }});

  ops.push_back({"log_normalizer", {"logits"},
                 [](const TensorMap& in) {
                   const Tensor& logits = input(in, "logits");
                   return masked_softmax(logits, visibility_of(in, logits)).log_normalizers;
                 },
                 [](const TensorMap& in, const Tensor& w) {
                   const Tensor& logits = input(in, "logits");
                   auto sm = masked_softmax(logits, visibility_of(in, logits));
                   Tensor zero(sm.probs.shape());
                   GradResult r{sm.log_normalizers, {}};
                   r.partials["logits"] = masked_softmax_backward(sm.probs, zero, &w);
                   return r;
                 }});

  ops.push_back({"rms_norm", {"x", "gain"},
                 [](const TensorMap& in) {
                   return rms_norm(input(in, "x"), input(in, "gain"), scalar_or(in, "epsilon", 1e-6));
                 },
                 [](const TensorMap& in, const Tensor& w) {
                   const double eps = scalar_or(in, "epsilon", 1e-6);
                   GradResult r{rms_norm(input(in, "x"), input(in, "gain"), eps), {}};
                   auto g = rms_norm_backward(input(in, "x"), input(in, "gain"), eps, w);
                   r.partials["x"] = std::move(g.x);
                   r.partials["gain"] = std::move(g.gain);
                   return r;
                 }});

  ops.push_back({"gelu", {"x"},
                 [](const TensorMap& in) {
                   Tensor out = input(in, "x");
                   for (auto& v : out.data()) v = gelu(v);
                   return out;
                 },
                 [](const TensorMap& in, const Tensor& w) {
                   const Tensor& x = input(in, "x");
                   GradResult r{x, {}};
                   Tensor g(x.shape());
                   for (std::size_t i = 0; i < x.size(); ++i) {
                     r.value[i] = gelu(x[i]);
                     g[i] = w[i] * gelu_derivative(x[i]);
                   }
                   r.partials["x"] = std::move(g);
                   return r;
                 }});

  ops.push_back({"matmul", {"a", "b"},
                 [](const TensorMap& in) { return matmul(input(in, "a"), input(in, "b")); },
                 [](const TensorMap& in, const Tensor& w) {
                   const Tensor& a = input(in, "a");
                   const Tensor& b = input(in, "b");
                   GradResult r{matmul(a, b), {}};
                   Tensor ga(a.shape());
                   Tensor gb(b.shape());
                   as_matrix(ga).noalias() = as_matrix(w) * as_matrix(b).transpose();
                   as_matrix(gb).noalias() = as_matrix(a).transpose() * as_matrix(w);
                   r.partials["a"] = std::move(ga);
                   r.partials["b"] = std::move(gb);
                   return r;
                 }});

  ops.push_back({"geglu", {"x", "w_gate", "w_lin", "w_out"},
                 [](const TensorMap& in) {
                   return geglu(input(in, "x"), input(in, "w_gate"), input(in, "w_lin"), input(in, "w_out"));
                 },
                 [](const TensorMap& in, const Tensor& w) {
                   const Tensor& x = input(in, "x");
                   GradResult r{geglu(x, input(in, "w_gate"), input(in, "w_lin"), input(in, "w_out")), {}};
                   auto g = geglu_backward(x, input(in, "w_gate"), input(in, "w_lin"), input(in, "w_out"), w);
                   r.partials["x"] = std::move(g.x);
                   r.partials["w_gate"] = std::move(g.w_gate);
                   r.partials["w_lin"] = std::move(g.w_lin);
                   r.partials["w_out"] = std::move(g.w_out);
                   return r;
                 }});

  ops.push_back({"relative_position_bias", {"bias_table"},
                 [](const TensorMap& in) {
                   const Tensor& table = input(in, "bias_table");
                   return relative_position_bias(
                       static_cast<std::size_t>(scalar_or(in, "query_len", 4)),
                       static_cast<std::size_t>(scalar_or(in, "key_len", 4)),
                       static_cast<int>(table.dim(0)), static_cast<int>(scalar_or(in, "max_distance", 128)),
                       scalar_or(in, "bidirectional", 0) != 0.0, table);
                 },
                 [](const TensorMap& in, const Tensor& w) {
                   const Tensor& table = input(in, "bias_table");
                   const auto q = static_cast<std::size_t>(scalar_or(in, "query_len", 4));
                   const auto k = static_cast<std::size_t>(scalar_or(in, "key_len", 4));
                   const int md = static_cast<int>(scalar_or(in, "max_distance", 128));
                   const bool bi = scalar_or(in, "bidirectional", 0) != 0.0;
                   const int nb = static_cast<int>(table.dim(0));
                   GradResult r{relative_position_bias(q, k, nb, md, bi, table), {}};
                   r.partials["bias_table"] = relative_position_bias_backward(q, k, nb, md, bi, w);
                   return r;
                 }});
  return ops;
}

const std::vector<DifferentiableOp>& registry() {
  static const std::vector<DifferentiableOp> ops = build_registry();
  return ops;
}

}  // namespace

std::vector<std::string> registered_ops() {
  std::vector<std::string> names;
  for (const auto& op : registry()) names.push_back(op.name);
  return names;
}

const DifferentiableOp& lookup_op(std::string_view name) {
  for (const auto& op : registry()) {
    if (op.name == name) return op;
  }
  throw Error("no backward rule registered for op '" + std::string(name) + "'");
}

double grad_check(const DifferentiableOp& op, const TensorMap& inputs, std::uint64_t seed) {
  for (const auto& name : op.differentiable) {
    if (input(inputs, name).precision() != Precision::high) {
      throw Error("grad_check requires high precision inputs");
    }
  }
  const Tensor probe = op.forward(inputs);
  Rng rng(seed);
  Tensor cotangent(probe.shape());
  for (auto& v : cotangent.data()) v = rng.normal();

  const GradResult analytic = op.backward(inputs, cotangent);
  TensorMap work = inputs;
  double worst = 0.0;
  for (const auto& name : op.differentiable) {
    const Tensor& partial = analytic.partials.at(name);
    Tensor& x = work.at(name);
    if (partial.shape() != x.shape()) throw Error("grad_check: partial shape mismatch for " + name);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double saved = x[i];
      x[i] = saved + kFiniteDifferenceStep;
      const double plus = dot(cotangent, op.forward(work));
      x[i] = saved - kFiniteDifferenceStep;
      const double minus = dot(cotangent, op.forward(work));
      x[i] = saved;
      const double numeric = (plus - minus) / (2.0 * kFiniteDifferenceStep);
      const double a = partial[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), kRelativeErrorFloor});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

double grad_check(std::string_view op_name, const TensorMap& inputs, std::uint64_t seed) {
  return grad_check(lookup_op(op_name), inputs, seed);
}

}  // namespace ptlab::numeric
