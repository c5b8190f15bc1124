#include "ptlab/numeric/ops.hpp"

#include <cmath>
#include <limits>
#include <numbers>

#include "ptlab/core/error.hpp"
#include "ptlab/numeric/eigen.hpp"

namespace ptlab::numeric {

double softmax_row(std::span<const double> logits, std::span<const std::uint8_t> visible,
                   std::span<double> probs) {
  double max_visible = -std::numeric_limits<double>::infinity();
  bool any = false;
  for (std::size_t c = 0; c < logits.size(); ++c) {
    if (visible[c] && logits[c] > max_visible) max_visible = logits[c];
    any = any || visible[c];
  }
  if (!any) throw Error("fully masked row");
  double sum = 0.0;
  for (std::size_t c = 0; c < logits.size(); ++c) {
    if (visible[c]) {
      probs[c] = std::exp(logits[c] - max_visible);
      sum += probs[c];
    } else {
      probs[c] = 0.0;
    }
  }
  const double inv = 1.0 / sum;
  for (std::size_t c = 0; c < logits.size(); ++c) probs[c] *= inv;
  return max_visible + std::log(sum);
}

void softmax_row_backward(std::span<const double> probs, std::span<const double> grad_probs,
                          double grad_log_normalizer, std::span<double> grad_logits) {
  double dot = 0.0;
  for (std::size_t c = 0; c < probs.size(); ++c) dot += probs[c] * grad_probs[c];
  for (std::size_t c = 0; c < probs.size(); ++c) {
    grad_logits[c] = probs[c] * (grad_probs[c] - dot + grad_log_normalizer);
  }
}

double rms_norm_row(std::span<const double> x, std::span<const double> gain, double epsilon,
                    std::span<double> out) {
  double sq = 0.0;
  for (double v : x) sq += v * v;
  const double inv_rms = 1.0 / std::sqrt(sq / static_cast<double>(x.size()) + epsilon);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * inv_rms * gain[i];
  return inv_rms;
}

void rms_norm_row_backward(std::span<const double> x, std::span<const double> gain,
                           double inv_rms, std::span<const double> grad_out,
                           std::span<double> grad_x, std::span<double> grad_gain) {
  const double d = static_cast<double>(x.size());
  double dot = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    grad_gain[i] += grad_out[i] * x[i] * inv_rms;
    dot += grad_out[i] * gain[i] * x[i];
  }
  const double coeff = dot * inv_rms * inv_rms * inv_rms / d;
  for (std::size_t i = 0; i < x.size(); ++i) {
    grad_x[i] = grad_out[i] * gain[i] * inv_rms - x[i] * coeff;
  }
}

namespace {
constexpr double kGeluScale = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluCubic = 0.044715;
}  // namespace

double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluScale * (x + kGeluCubic * x * x * x)));
}

double gelu_derivative(double x) {
  const double t = std::tanh(kGeluScale * (x + kGeluCubic * x * x * x));
  return 0.5 * (1.0 + t) +
         0.5 * x * (1.0 - t * t) * kGeluScale * (1.0 + 3.0 * kGeluCubic * x * x);
}

SoftmaxResult masked_softmax(const Tensor& logits, const BoolMatrix& visibility) {
  const std::size_t rows = logits.rows();
  const std::size_t cols = logits.last_dim();
  if (visibility.rows != rows || visibility.cols != cols) {
    throw Error("masked_softmax: visibility shape mismatch");
  }
  SoftmaxResult out{Tensor(logits.shape(), logits.precision()),
                    Tensor({rows}, logits.precision())};
  for (std::size_t r = 0; r < rows; ++r) {
    out.log_normalizers[r] = softmax_row(logits.row(r), visibility.row(r), out.probs.row(r));
  }
  out.probs.quantize();
  out.log_normalizers.quantize();
  return out;
}

Tensor softmax(const Tensor& logits) {
  return masked_softmax(logits, BoolMatrix(logits.rows(), logits.last_dim(), true)).probs;
}

Tensor masked_softmax_backward(const Tensor& probs, const Tensor& grad_probs,
                               const Tensor* grad_log_normalizers) {
  if (probs.shape() != grad_probs.shape()) throw Error("masked_softmax_backward: shape mismatch");
  Tensor grad(probs.shape(), probs.precision());
  for (std::size_t r = 0; r < probs.rows(); ++r) {
    const double gz = grad_log_normalizers ? (*grad_log_normalizers)[r] : 0.0;
    softmax_row_backward(probs.row(r), grad_probs.row(r), gz, grad.row(r));
  }
  grad.quantize();
  return grad;
}

Tensor rms_norm(const Tensor& x, const Tensor& gain, double epsilon) {
  if (gain.size() != x.last_dim()) throw Error("rms_norm: gain size mismatch");
  Tensor out(x.shape(), x.precision());
  for (std::size_t r = 0; r < x.rows(); ++r) rms_norm_row(x.row(r), gain.data(), epsilon, out.row(r));
  out.quantize();
  return out;
}

RmsNormGrads rms_norm_backward(const Tensor& x, const Tensor& gain, double epsilon,
                               const Tensor& grad_out) {
  RmsNormGrads g{Tensor(x.shape(), x.precision()), Tensor(gain.shape(), gain.precision())};
  std::vector<double> scratch(x.last_dim());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const double inv = rms_norm_row(x.row(r), gain.data(), epsilon, scratch);
    rms_norm_row_backward(x.row(r), gain.data(), inv, grad_out.row(r), g.x.row(r), g.gain.data());
  }
  g.x.quantize();
  g.gain.quantize();
  return g;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (b.rank() != 2 || a.last_dim() != b.dim(0)) {
    throw Error("matmul: cannot multiply " + shape_string(a.shape()) + " by " +
                shape_string(b.shape()));
  }
  Shape shape = a.shape();
  shape.back() = b.dim(1);
  Tensor out(shape, a.precision());
  as_matrix(out).noalias() = as_matrix(a) * as_matrix(b);
  out.quantize();
  return out;
}

namespace {

void check_geglu_shapes(const Tensor& x, const Tensor& w_gate, const Tensor& w_lin,
                        const Tensor& w_out) {
  const std::size_t d = x.last_dim();
  if (w_gate.rank() != 2 || w_lin.rank() != 2 || w_out.rank() != 2 || w_gate.dim(0) != d ||
      w_lin.shape() != w_gate.shape() || w_out.dim(0) != w_gate.dim(1)) {
    throw Error("geglu: shape mismatch");
  }
}

}  // namespace

Tensor geglu(const Tensor& x, const Tensor& w_gate, const Tensor& w_lin, const Tensor& w_out) {
  check_geglu_shapes(x, w_gate, w_lin, w_out);
  RowMat gate = as_matrix(x) * as_matrix(w_gate);
  RowMat lin = as_matrix(x) * as_matrix(w_lin);
  quantize(gate, x.precision());
  quantize(lin, x.precision());
  RowMat hidden(gate.rows(), gate.cols());
  for (Eigen::Index i = 0; i < gate.size(); ++i) hidden.data()[i] = gelu(gate.data()[i]) * lin.data()[i];
  quantize(hidden, x.precision());
  Shape shape = x.shape();
  shape.back() = w_out.dim(1);
  Tensor out(shape, x.precision());
  as_matrix(out).noalias() = hidden * as_matrix(w_out);
  out.quantize();
  return out;
}

GegluGrads geglu_backward(const Tensor& x, const Tensor& w_gate, const Tensor& w_lin,
                          const Tensor& w_out, const Tensor& grad_out) {
  check_geglu_shapes(x, w_gate, w_lin, w_out);
  const RowMat gate = as_matrix(x) * as_matrix(w_gate);
  const RowMat lin = as_matrix(x) * as_matrix(w_lin);
  RowMat hidden(gate.rows(), gate.cols());
  for (Eigen::Index i = 0; i < gate.size(); ++i) hidden.data()[i] = gelu(gate.data()[i]) * lin.data()[i];

  GegluGrads g{Tensor(x.shape(), x.precision()), Tensor(w_gate.shape(), x.precision()),
               Tensor(w_lin.shape(), x.precision()), Tensor(w_out.shape(), x.precision())};
  const auto dy = as_matrix(grad_out);
  as_matrix(g.w_out).noalias() = hidden.transpose() * dy;
  const RowMat d_hidden = dy * as_matrix(w_out).transpose();
  RowMat d_gate(gate.rows(), gate.cols());
  RowMat d_lin(gate.rows(), gate.cols());
  for (Eigen::Index i = 0; i < gate.size(); ++i) {
    d_gate.data()[i] = d_hidden.data()[i] * lin.data()[i] * gelu_derivative(gate.data()[i]);
    d_lin.data()[i] = d_hidden.data()[i] * gelu(gate.data()[i]);
  }
  as_matrix(g.w_gate).noalias() = as_matrix(x).transpose() * d_gate;
  as_matrix(g.w_lin).noalias() = as_matrix(x).transpose() * d_lin;
  as_matrix(g.x).noalias() =
      d_gate * as_matrix(w_gate).transpose() + d_lin * as_matrix(w_lin).transpose();
  g.x.quantize();
  g.w_gate.quantize();
  g.w_lin.quantize();
  g.w_out.quantize();
  return g;
}

int relative_position_bucket(std::int64_t relative_position, bool bidirectional, int n_buckets,
                             int max_distance) {
  if (n_buckets < 2 || max_distance <= 0) {
    throw Error("relative_position_bucket: need n_buckets >= 2 and max_distance > 0");
  }
  int bucket = 0;
  std::int64_t n = -relative_position;
  int buckets = n_buckets;
  if (bidirectional) {
    buckets /= 2;
    if (n < 0) bucket += buckets;
    n = n < 0 ? -n : n;
  } else {
    n = n < 0 ? 0 : n;
  }
  const int max_exact = std::max(1, buckets / 2);
  if (n < max_exact) return bucket + static_cast<int>(n);
  if (max_distance <= max_exact) return bucket + buckets - 1;
  const double scaled = std::log(static_cast<double>(n) / max_exact) /
                        std::log(static_cast<double>(max_distance) / max_exact) *
                        (buckets - max_exact);
  const std::int64_t large = max_exact + static_cast<std::int64_t>(scaled);
  return bucket + static_cast<int>(std::min<std::int64_t>(large, buckets - 1));
}

Tensor relative_position_bias(std::size_t query_len, std::size_t key_len, int n_buckets,
                              int max_distance, bool bidirectional, const Tensor& bias_table) {
  if (bias_table.rank() != 2 || bias_table.dim(0) != static_cast<std::size_t>(n_buckets)) {
    throw Error("relative_position_bias: table must be [n_buckets x heads]");
  }
  const std::size_t heads = bias_table.dim(1);
  Tensor out({heads, query_len, key_len}, bias_table.precision());
  for (std::size_t q = 0; q < query_len; ++q) {
    for (std::size_t k = 0; k < key_len; ++k) {
      const int b = relative_position_bucket(static_cast<std::int64_t>(k) - static_cast<std::int64_t>(q),
                                             bidirectional, n_buckets, max_distance);
      for (std::size_t h = 0; h < heads; ++h) {
        out[(h * query_len + q) * key_len + k] = bias_table.at(static_cast<std::size_t>(b), h);
      }
    }
  }
  return out;
}

Tensor relative_position_bias_backward(std::size_t query_len, std::size_t key_len, int n_buckets,
                                       int max_distance, bool bidirectional,
                                       const Tensor& grad_out) {
  const std::size_t heads = grad_out.dim(0);
  Tensor grad({static_cast<std::size_t>(n_buckets), heads}, grad_out.precision());
  for (std::size_t q = 0; q < query_len; ++q) {
    for (std::size_t k = 0; k < key_len; ++k) {
      const int b = relative_position_bucket(static_cast<std::int64_t>(k) - static_cast<std::int64_t>(q),
                                             bidirectional, n_buckets, max_distance);
      for (std::size_t h = 0; h < heads; ++h) {
        grad.at(static_cast<std::size_t>(b), h) += grad_out[(h * query_len + q) * key_len + k];
      }
    }
  }
  grad.quantize();
  return grad;
}

}  // namespace ptlab::numeric
