#include "ptlab/optim/adafactor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "ptlab/core/error.hpp"

namespace ptlab {

void LrSchedule::validate() const {
  if (kind == Kind::fixed && !(value > 0.0)) throw ValidationError("fixed learning rate must be positive");
  if (kind == Kind::inverse_sqrt && warmup_floor < 1) throw ValidationError("warmup_floor must be >= 1");
}

double lr_at(const LrSchedule& schedule, std::int64_t n) {
  if (schedule.kind == LrSchedule::Kind::fixed) return schedule.value;
  return 1.0 / std::sqrt(static_cast<double>(std::max(n, schedule.warmup_floor)));
}

OptimizerState OptimizerState::fresh(const ParamTree& params, const AdafactorConfig& config) {
  OptimizerState state;
  state.config = config;
  for (const auto& [path, p] : params) {
    SecondMoment m;
    if (p.shape().size() == 2) {
      m.factored = true;
      m.row = Tensor({p.shape()[0]});
      m.col = Tensor({p.shape()[1]});
    } else {
      m.full = Tensor({p.size()});
    }
    state.moments.emplace(path, std::move(m));
  }
  return state;
}

namespace {

bool same_bits(const Tensor& a, const Tensor& b) {
  if (a.shape().empty() && b.shape().empty()) return true;
  return a.identical(b);
}

double rms(std::span<const double> x) {
  double s = 0.0;
  for (double v : x) s += v * v;
  return std::sqrt(s / static_cast<double>(x.size()));
}

}  // namespace

bool OptimizerState::identical(const OptimizerState& other) const {
  if (step != other.step || moments.size() != other.moments.size()) return false;
  for (const auto& [path, m] : moments) {
    auto it = other.moments.find(path);
    if (it == other.moments.end() || it->second.factored != m.factored) return false;
    if (!same_bits(m.row, it->second.row) || !same_bits(m.col, it->second.col) || !same_bits(m.full, it->second.full))
      return false;
  }
  return true;
}

Tensor second_moment_estimate(const SecondMoment& m) {
  if (!m.factored) return m.full;
  const std::size_t rows = m.row.size(), cols = m.col.size();
  double mean_row = 0.0;
  for (double r : m.row.data()) mean_row += r;
  mean_row /= static_cast<double>(rows);
  Tensor v({rows, cols});
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) v.at(i, j) = m.row[i] * m.col[j] / mean_row;
  return v;
}

void adafactor_step(ParamTree& params, const ParamTree& grads, OptimizerState& state, const LrSchedule& schedule) {
  if (!params.same_layout(grads)) throw Error("adafactor_step: gradient tree does not match parameters");
  const AdafactorConfig& cfg = state.config;
  const double lr = lr_at(schedule, state.step);
  const double beta2 = 1.0 - std::pow(static_cast<double>(state.step + 1), -cfg.decay_rate);

  for (auto& [path, p] : params) {
    const Tensor& g = grads.at(path);
    auto mit = state.moments.find(path);
    if (mit == state.moments.end()) throw Error("adafactor_step: no optimizer slot for " + path);
    SecondMoment& m = mit->second;

    std::vector<double> sq(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) sq[i] = g[i] * g[i] + cfg.epsilon1;

    if (m.factored) {
      const std::size_t rows = p.shape()[0], cols = p.shape()[1];
      if (m.row.size() != rows || m.col.size() != cols) throw Error("adafactor_step: slot shape mismatch for " + path);
      for (std::size_t i = 0; i < rows; ++i) {
        double mean = 0.0;
        for (std::size_t j = 0; j < cols; ++j) mean += sq[i * cols + j];
        m.row[i] = beta2 * m.row[i] + (1.0 - beta2) * (mean / static_cast<double>(cols));
      }
      for (std::size_t j = 0; j < cols; ++j) {
        double mean = 0.0;
        for (std::size_t i = 0; i < rows; ++i) mean += sq[i * cols + j];
        m.col[j] = beta2 * m.col[j] + (1.0 - beta2) * (mean / static_cast<double>(rows));
      }
    } else {
      if (m.full.size() != g.size()) throw Error("adafactor_step: slot shape mismatch for " + path);
      for (std::size_t i = 0; i < g.size(); ++i) m.full[i] = beta2 * m.full[i] + (1.0 - beta2) * sq[i];
    }

    const Tensor v = second_moment_estimate(m);
    std::vector<double> u(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) u[i] = g[i] / std::sqrt(v[i]);
    const double clip = std::max(1.0, rms(u) / cfg.clip_threshold);
    const double alpha = lr * std::max(cfg.epsilon2, rms(p.data()));
    for (std::size_t i = 0; i < g.size(); ++i) p[i] -= alpha * (u[i] / clip);
    p.quantize();
  }
  ++state.step;
}

}  // namespace ptlab
