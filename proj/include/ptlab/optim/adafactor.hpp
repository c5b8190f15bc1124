#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "ptlab/model/params.hpp"
#include "ptlab/numeric/tensor.hpp"

namespace ptlab {

/// Learning-rate schedule: 1/sqrt(max(n, warmup_floor)) or a constant.
struct LrSchedule {
  enum class Kind { inverse_sqrt, fixed };
  Kind kind = Kind::inverse_sqrt;
  std::int64_t warmup_floor = 10000;
  double value = 0.0;

  static LrSchedule inverse_sqrt(std::int64_t floor = 10000) { return {Kind::inverse_sqrt, floor, 0.0}; }
  static LrSchedule fixed(double value) { return {Kind::fixed, 0, value}; }

  void validate() const;
  bool operator==(const LrSchedule&) const = default;
};

double lr_at(const LrSchedule& schedule, std::int64_t n);

/// Settings beyond decay_rate follow the original Adafactor defaults.
struct AdafactorConfig {
  double decay_rate = 0.8;
  double clip_threshold = 1.0;
  double epsilon1 = 1e-30;
  double epsilon2 = 1e-3;
};

/// Second-moment accumulators of one parameter: row and column statistics for
/// matrices, a full vector otherwise.
struct SecondMoment {
  bool factored = false;
  Tensor row;
  Tensor col;
  Tensor full;
};

struct OptimizerState {
  std::int64_t step = 0;
  AdafactorConfig config;
  std::map<std::string, SecondMoment> moments;

  /// Zeroed accumulators shaped after `params`.
  static OptimizerState fresh(const ParamTree& params, const AdafactorConfig& config = {});
  /// Bitwise equality.
  bool identical(const OptimizerState& other) const;
};

/// Second-moment estimate v-hat the update divides by.
Tensor second_moment_estimate(const SecondMoment& moment);

/// One Adafactor update in place. The learning rate is lr_at(schedule,
/// state.step) taken before the counter increments.
void adafactor_step(ParamTree& params, const ParamTree& grads, OptimizerState& state, const LrSchedule& schedule);

inline double total_loss(double cross_entropy, double z_loss) { return cross_entropy + z_loss; }

}  // namespace ptlab
