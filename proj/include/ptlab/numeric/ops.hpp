#pragma once

#include <cstdint>
#include <span>

#include "ptlab/numeric/tensor.hpp"

namespace ptlab::numeric {

// Row kernels. These are the single implementation of each primitive; the
// tensor-level functions below and the transformer both call them.

/// Softmax over the visible entries of one row. Writes exact zeros at hidden
/// positions and returns the log of the unshifted normalizer.
/// Throws Error("fully masked row") when nothing is visible.
double softmax_row(std::span<const double> logits, std::span<const std::uint8_t> visible,
                   std::span<double> probs);

/// grad_logits = p * (grad_p - <p, grad_p>) + grad_log_normalizer * p.
void softmax_row_backward(std::span<const double> probs, std::span<const double> grad_probs,
                          double grad_log_normalizer, std::span<double> grad_logits);

/// out = x / sqrt(mean(x^2) + eps) * gain. Returns the inverse RMS.
double rms_norm_row(std::span<const double> x, std::span<const double> gain, double epsilon,
                    std::span<double> out);

/// Accumulates into grad_gain; overwrites grad_x.
void rms_norm_row_backward(std::span<const double> x, std::span<const double> gain,
                           double inv_rms, std::span<const double> grad_out,
                           std::span<double> grad_x, std::span<double> grad_gain);

/// GELU with the tanh approximation.
double gelu(double x);
double gelu_derivative(double x);

// Tensor-level primitives.

struct SoftmaxResult {
  Tensor probs;
  Tensor log_normalizers;
};

SoftmaxResult masked_softmax(const Tensor& logits, const BoolMatrix& visibility);
Tensor softmax(const Tensor& logits);
Tensor masked_softmax_backward(const Tensor& probs, const Tensor& grad_probs,
                               const Tensor* grad_log_normalizers);

Tensor rms_norm(const Tensor& x, const Tensor& gain, double epsilon);

struct RmsNormGrads {
  Tensor x;
  Tensor gain;
};
RmsNormGrads rms_norm_backward(const Tensor& x, const Tensor& gain, double epsilon,
                               const Tensor& grad_out);

/// [... x k] . [k x n] -> [... x n]
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor geglu(const Tensor& x, const Tensor& w_gate, const Tensor& w_lin, const Tensor& w_out);

struct GegluGrads {
  Tensor x;
  Tensor w_gate;
  Tensor w_lin;
  Tensor w_out;
};
GegluGrads geglu_backward(const Tensor& x, const Tensor& w_gate, const Tensor& w_lin,
                          const Tensor& w_out, const Tensor& grad_out);

/// T5-style bucket for relative_position = key_index - query_index.
/// Bidirectional mode spends half the buckets on each direction; otherwise
/// every future offset collapses onto bucket 0. Half of each direction's
/// buckets are exact small distances and the rest are log-spaced up to
/// max_distance.
int relative_position_bucket(std::int64_t relative_position, bool bidirectional, int n_buckets,
                             int max_distance);

/// Gathers bias_table[bucket(q, k)][h] into a [heads x query_len x key_len] tensor.
Tensor relative_position_bias(std::size_t query_len, std::size_t key_len, int n_buckets,
                              int max_distance, bool bidirectional, const Tensor& bias_table);

Tensor relative_position_bias_backward(std::size_t query_len, std::size_t key_len, int n_buckets,
                                       int max_distance, bool bidirectional,
                                       const Tensor& grad_out);

}  // namespace ptlab::numeric
