#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "ptlab/core/error.hpp"
#include "ptlab/core/rng.hpp"
#include "ptlab/numeric/gradcheck.hpp"
#include "ptlab/numeric/ops.hpp"

using namespace ptlab;
using namespace ptlab::numeric;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.normal() * scale;
  return t;
}

// Scalar oracles, written independently of the row kernels.

std::vector<long double> softmax_oracle(const std::vector<long double>& logits) {
  long double sum = 0;
  for (auto l : logits) sum += std::exp(l);
  std::vector<long double> out;
  for (auto l : logits) out.push_back(std::exp(l) / sum);
  return out;
}

double gelu_oracle(double x) {
  const double pi = 3.14159265358979323846;
  return 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / pi) * (x + 0.044715 * std::pow(x, 3))));
}

}  // namespace

TEST_CASE("masked_softmax on equal logits is uniform") {
  auto r = masked_softmax(Tensor::matrix(1, 2, {0, 0}), BoolMatrix(1, 2, true));
  CHECK(r.probs[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(r.probs[1] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(r.log_normalizers[0] == doctest::Approx(std::log(2.0)).epsilon(1e-15));
}

TEST_CASE("masked_softmax gives zero to hidden positions") {
  BoolMatrix vis(1, 2, true);
  vis.set(0, 1, false);
  auto r = masked_softmax(Tensor::matrix(1, 2, {5, 100}), vis);
  CHECK(r.probs[0] == 1.0);
  CHECK(r.probs[1] == 0.0);
  CHECK(r.log_normalizers[0] == doctest::Approx(5.0));
}

TEST_CASE("masked_softmax matches direct summation") {
  auto r = masked_softmax(Tensor::matrix(1, 3, {1, 2, 3}), BoolMatrix(1, 3, true));
  auto oracle = softmax_oracle({1, 2, 3});
  for (int i = 0; i < 3; ++i) CHECK(std::abs(r.probs[i] - static_cast<double>(oracle[i])) < 1e-12);
  const long double z = std::exp(1.0L) + std::exp(2.0L) + std::exp(3.0L);
  CHECK(std::abs(r.log_normalizers[0] - static_cast<double>(std::log(z))) < 1e-12);
}

TEST_CASE("masked_softmax rejects a fully masked row") {
  BoolMatrix vis(2, 2, true);
  vis.set(1, 0, false);
  vis.set(1, 1, false);
  CHECK_THROWS_WITH_AS(masked_softmax(Tensor::matrix(2, 2, {1, 2, 3, 4}), vis), "fully masked row", Error);
}

TEST_CASE("all-visible masked_softmax equals softmax bitwise") {
  Rng rng(3);
  Tensor logits = random_tensor({4, 7}, rng, 3.0);
  CHECK(masked_softmax(logits, BoolMatrix(4, 7, true)).probs.identical(softmax(logits)));
}

TEST_CASE("rms_norm edge cases and scalar oracle") {
  Tensor ones = Tensor::filled({4}, 1.0);
  auto out = rms_norm(Tensor::from({1, 1, 1, 1}), ones, 1e-300);
  for (int i = 0; i < 4; ++i) CHECK(out[i] == doctest::Approx(1.0).epsilon(1e-15));

  auto zero = rms_norm(Tensor::from({0, 0}), Tensor::filled({2}, 1.0), 1e-6);
  CHECK(zero[0] == 0.0);
  CHECK(zero[1] == 0.0);

  Rng rng(11);
  Tensor x = random_tensor({3, 8}, rng);
  Tensor g = random_tensor({8}, rng);
  auto y = rms_norm(x, g, 1e-6);
  for (std::size_t r = 0; r < 3; ++r) {
    double ms = 0;
    for (std::size_t c = 0; c < 8; ++c) ms += x.at(r, c) * x.at(r, c);
    ms /= 8.0;
    for (std::size_t c = 0; c < 8; ++c) {
      CHECK(std::abs(y.at(r, c) - x.at(r, c) / std::sqrt(ms + 1e-6) * g[c]) < 1e-12);
    }
  }
}

TEST_CASE("geglu: zero input, saturated gate, scalar oracle") {
  Rng rng(5);
  const std::size_t d = 4, f = 6;
  Tensor wg = random_tensor({d, f}, rng), wl = random_tensor({d, f}, rng), wo = random_tensor({f, d}, rng);
  auto zero = geglu(Tensor({2, d}), wg, wl, wo);
  for (double v : zero.data()) CHECK(v == 0.0);

  // Saturated gate: every gate pre-activation equals 1000, where GELU(a) == a,
  // so the block reduces to 1000 * x . W_lin . W_out.
  Tensor x = Tensor::from({1.0, 2.0, 3.0, 4.0});
  Tensor big = Tensor::filled({d, f}, 100.0);
  Tensor eye_in({d, f}), eye_out({f, d});
  for (std::size_t i = 0; i < d; ++i) {
    eye_in.at(i, i) = 1.0;
    eye_out.at(i, i) = 1.0;
  }
  auto sat = geglu(x, big, eye_in, eye_out);
  for (std::size_t i = 0; i < d; ++i) CHECK(sat[i] / 1000.0 == doctest::Approx(x[i]).epsilon(1e-12));

  Tensor xr = random_tensor({3, d}, rng);
  auto y = geglu(xr, wg, wl, wo);
  for (std::size_t r = 0; r < 3; ++r) {
    std::vector<double> hidden(f);
    for (std::size_t j = 0; j < f; ++j) {
      double a = 0, b = 0;
      for (std::size_t i = 0; i < d; ++i) {
        a += xr.at(r, i) * wg.at(i, j);
        b += xr.at(r, i) * wl.at(i, j);
      }
      hidden[j] = gelu_oracle(a) * b;
    }
    for (std::size_t c = 0; c < d; ++c) {
      double s = 0;
      for (std::size_t j = 0; j < f; ++j) s += hidden[j] * wo.at(j, c);
      CHECK(std::abs(y.at(r, c) - s) < 1e-10);
    }
  }
}

TEST_CASE("geglu rejects mismatched shapes") {
  CHECK_THROWS_AS(geglu(Tensor({1, 4}), Tensor({3, 6}), Tensor({4, 6}), Tensor({6, 4})), Error);
}

TEST_CASE("relative position buckets") {
  // Zero distance reads bucket 0 in both modes.
  CHECK(relative_position_bucket(0, false, 32, 128) == 0);
  CHECK(relative_position_bucket(0, true, 32, 128) == 0);

  // Enumerate: in unidirectional mode every future key lands in bucket 0.
  for (int q = 0; q < 64; ++q) {
    for (int k = q + 1; k < 200; ++k) CHECK(relative_position_bucket(k - q, false, 32, 128) == 0);
  }
  // Exact region: past distances below 16 map to themselves.
  for (int n = 0; n < 16; ++n) CHECK(relative_position_bucket(-n, false, 32, 128) == n);
  // Buckets are monotone in distance and saturate at the last bucket.
  int prev = 0;
  for (int n = 0; n < 1000; ++n) {
    int b = relative_position_bucket(-n, false, 32, 128);
    CHECK(b >= prev);
    CHECK(b < 32);
    prev = b;
  }
  CHECK(relative_position_bucket(-5000, false, 32, 128) == 31);
  // Bidirectional: future offsets use the upper half.
  CHECK(relative_position_bucket(3, true, 32, 128) == 16 + 3);
  CHECK(relative_position_bucket(-3, true, 32, 128) == 3);

  Rng rng(1);
  Tensor table = random_tensor({32, 3}, rng);
  auto bias = relative_position_bias(4, 4, 32, 128, false, table);
  CHECK(bias.shape() == Shape{3, 4, 4});
  for (std::size_t h = 0; h < 3; ++h) {
    for (std::size_t q = 0; q < 4; ++q) CHECK(bias[(h * 4 + q) * 4 + q] == table.at(0, h));
  }
}

TEST_CASE("grad_check: registered primitives across 20 seeds") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed + 100);
    {
      TensorMap in{{"logits", random_tensor({3, 3}, rng, 2.0)}};
      Tensor vis = Tensor::filled({3, 3}, 1.0);
      vis.at(0, 2) = 0.0;
      vis.at(1, 0) = 0.0;
      in["visibility"] = vis;
      CHECK(grad_check("masked_softmax", in, seed) < 1e-4);
      CHECK(grad_check("log_normalizer", in, seed) < 1e-4);
    }
    {
      TensorMap in{{"x", random_tensor({2, 4}, rng)}, {"w_gate", random_tensor({4, 6}, rng)},
                   {"w_lin", random_tensor({4, 6}, rng)}, {"w_out", random_tensor({6, 4}, rng)}};
      CHECK(grad_check("geglu", in, seed) < 1e-4);
    }
    {
      TensorMap in{{"x", random_tensor({2, 5}, rng)}, {"gain", random_tensor({5}, rng)}};
      CHECK(grad_check("rms_norm", in, seed) < 1e-4);
    }
    {
      TensorMap in{{"x", random_tensor({8}, rng, 2.0)}};
      CHECK(grad_check("gelu", in, seed) < 1e-4);
    }
    {
      TensorMap in{{"a", random_tensor({3, 4}, rng)}, {"b", random_tensor({4, 2}, rng)}};
      CHECK(grad_check("matmul", in, seed) < 1e-4);
    }
    {
      TensorMap in{{"bias_table", random_tensor({8, 2}, rng)}, {"query_len", Tensor::from({5})},
                   {"key_len", Tensor::from({5})}, {"max_distance", Tensor::from({16})},
                   {"bidirectional", Tensor::from({static_cast<double>(seed % 2)})}};
      CHECK(grad_check("relative_position_bias", in, seed) < 1e-4);
    }
  }
}

TEST_CASE("grad_check rejects unregistered ops") {
  CHECK_THROWS_AS(grad_check("conv2d", TensorMap{}, 0), Error);
}

TEST_CASE("primitives are deterministic") {
  Rng a(9), b(9);
  Tensor x1 = random_tensor({3, 5}, a), x2 = random_tensor({3, 5}, b);
  CHECK(x1.identical(x2));
  Tensor g = Tensor::filled({5}, 1.5);
  CHECK(rms_norm(x1, g, 1e-6).identical(rms_norm(x2, g, 1e-6)));
  CHECK(softmax(x1).identical(softmax(x2)));
}

TEST_CASE("low precision outputs are float representable") {
  Rng rng(2);
  Tensor x = random_tensor({2, 6}, rng);
  x.set_precision(Precision::low);
  auto p = softmax(x);
  for (double v : p.data()) CHECK(v == static_cast<double>(static_cast<float>(v)));
}
