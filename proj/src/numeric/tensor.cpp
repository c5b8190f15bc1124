#include "ptlab/numeric/tensor.hpp"

#include <cmath>
#include <cstring>
#include <functional>
#include <numeric>
#include <sstream>

#include "ptlab/core/error.hpp"

namespace ptlab {

std::string to_string(Precision p) { return p == Precision::high ? "high" : "low"; }

Precision parse_precision(const std::string& text) {
  if (text == "high") return Precision::high;
  if (text == "low") return Precision::low;
  throw ValidationError("unknown precision '" + text + "' (expected high or low)");
}

std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "x" : "") << shape[i];
  out << "]";
  return out.str();
}

double round_to_float(double v) { return static_cast<double>(static_cast<float>(v)); }

Tensor::Tensor(Shape shape, Precision precision)
    : shape_(std::move(shape)), data_(element_count(shape_), 0.0), precision_(precision) {
  for (auto d : shape_) {
    if (d == 0) throw Error("Tensor: zero-sized dimension in " + shape_string(shape_));
  }
}

Tensor::Tensor(Shape shape, std::vector<double> data, Precision precision)
    : shape_(std::move(shape)), data_(std::move(data)), precision_(precision) {
  if (element_count(shape_) != data_.size()) {
    throw Error("Tensor: shape " + shape_string(shape_) + " does not match " +
                std::to_string(data_.size()) + " values");
  }
  quantize();
}

Tensor Tensor::filled(Shape shape, double value, Precision precision) {
  Tensor t(std::move(shape), precision);
  std::fill(t.data_.begin(), t.data_.end(), value);
  t.quantize();
  return t;
}

Tensor Tensor::from(std::initializer_list<double> values) {
  return Tensor({values.size()}, std::vector<double>(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values) {
  return Tensor({rows, cols}, std::vector<double>(values));
}

void Tensor::set_precision(Precision p) {
  precision_ = p;
  quantize();
}

void Tensor::quantize() {
  if (precision_ != Precision::low) return;
  for (auto& v : data_) v = round_to_float(v);
}

bool Tensor::identical(const Tensor& other) const {
  return shape_ == other.shape_ && data_.size() == other.data_.size() &&
         std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(double)) == 0;
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

}  // namespace ptlab
