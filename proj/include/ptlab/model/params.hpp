#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ptlab/numeric/tensor.hpp"

namespace ptlab {

/// Named parameter collection. Iteration is in sorted path order.
class ParamTree {
 public:
  using Map = std::map<std::string, Tensor>;

  void add(const std::string& path, Tensor value);
  bool contains(const std::string& path) const { return params_.count(path) != 0; }
  const Tensor& at(const std::string& path) const;
  Tensor& at(const std::string& path);

  std::vector<std::string> paths() const;
  std::size_t size() const { return params_.size(); }
  std::int64_t total_count() const;

  Map::const_iterator begin() const { return params_.begin(); }
  Map::const_iterator end() const { return params_.end(); }
  Map::iterator begin() { return params_.begin(); }
  Map::iterator end() { return params_.end(); }

  /// Same paths and shapes, all zeros.
  ParamTree zeros_like() const;
  /// Same paths and shapes.
  bool same_layout(const ParamTree& other) const;
  /// Bitwise equality of every tensor.
  bool identical(const ParamTree& other) const;
  bool all_finite() const;

 private:
  Map params_;
};

}  // namespace ptlab
