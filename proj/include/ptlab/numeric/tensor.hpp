#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace ptlab {

using Shape = std::vector<std::size_t>;

enum class Precision { high, low };

std::string to_string(Precision p);
Precision parse_precision(const std::string& text);

std::size_t element_count(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major tensor of reals.
///
/// Storage is always 64-bit. In low precision every primitive rounds its
/// outputs to the nearest 32-bit float, so values stay exactly representable
/// in single precision.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, Precision precision = Precision::high);
  Tensor(Shape shape, std::vector<double> data, Precision precision = Precision::high);

  static Tensor zeros(Shape shape, Precision precision = Precision::high) {
    return Tensor(std::move(shape), precision);
  }
  static Tensor filled(Shape shape, double value, Precision precision = Precision::high);
  static Tensor from(std::initializer_list<double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  /// Size of the last axis (1 for scalars).
  std::size_t last_dim() const { return shape_.empty() ? 1 : shape_.back(); }
  std::size_t rows() const { return size() / last_dim(); }

  Precision precision() const { return precision_; }
  void set_precision(Precision p);

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * last_dim() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * last_dim() + c]; }

  std::span<double> row(std::size_t r) { return data().subspan(r * last_dim(), last_dim()); }
  std::span<const double> row(std::size_t r) const { return data().subspan(r * last_dim(), last_dim()); }

  /// Rounds values to float when this tensor is low precision.
  void quantize();

  /// Bitwise equality of shape and data.
  bool identical(const Tensor& other) const;
  bool all_finite() const;

 private:
  Shape shape_;
  std::vector<double> data_;
  Precision precision_ = Precision::high;
};

/// Row-major boolean matrix used for attention visibility.
struct BoolMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> bits;

  BoolMatrix() = default;
  BoolMatrix(std::size_t r, std::size_t c, bool value = false)
      : rows(r), cols(c), bits(r * c, value ? 1 : 0) {}

  bool operator()(std::size_t r, std::size_t c) const { return bits[r * cols + c] != 0; }
  void set(std::size_t r, std::size_t c, bool v) { bits[r * cols + c] = v ? 1 : 0; }
  std::span<const std::uint8_t> row(std::size_t r) const {
    return std::span<const std::uint8_t>(bits).subspan(r * cols, cols);
  }
  bool operator==(const BoolMatrix&) const = default;
};

/// Named tensors, ordered by name.
using TensorMap = std::map<std::string, Tensor>;

double round_to_float(double v);

}  // namespace ptlab
