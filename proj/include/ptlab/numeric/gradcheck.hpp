#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "ptlab/numeric/tensor.hpp"

namespace ptlab::numeric {

/// Output of a primitive together with the vector-Jacobian product for one
/// cotangent: partials[name] = d<cotangent, value> / d inputs[name].
struct GradResult {
  Tensor value;
  TensorMap partials;
};

/// A primitive with a hand-derived backward rule.
struct DifferentiableOp {
  std::string name;
  /// Inputs that receive partials; any other input is treated as a constant.
  std::vector<std::string> differentiable;
  std::function<Tensor(const TensorMap&)> forward;
  std::function<GradResult(const TensorMap&, const Tensor& cotangent)> backward;
};

/// Finite-difference step used by every check.
inline constexpr double kFiniteDifferenceStep = 1e-5;

/// Coordinates whose analytic and numeric partials are both smaller than this
/// are compared on an absolute rather than relative scale.
inline constexpr double kRelativeErrorFloor = 1e-6;

/// Names of the built-in primitives with registered backward rules.
std::vector<std::string> registered_ops();

/// Looks up a built-in primitive. Throws Error for unknown names.
const DifferentiableOp& lookup_op(std::string_view name);

/// Compares every analytic partial against central differences of the
/// scalarized output <w, op(inputs)>, with w ~ N(0, 1) drawn from seed.
/// Returns the maximum relative error over all differentiable coordinates.
double grad_check(const DifferentiableOp& op, const TensorMap& inputs, std::uint64_t seed);

/// Same as above for a registered primitive; throws for unregistered ops.
double grad_check(std::string_view op_name, const TensorMap& inputs, std::uint64_t seed);

}  // namespace ptlab::numeric
