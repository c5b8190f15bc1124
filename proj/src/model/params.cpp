#include "ptlab/model/params.hpp"

#include "ptlab/core/error.hpp"

namespace ptlab {

void ParamTree::add(const std::string& path, Tensor value) {
  if (!params_.emplace(path, std::move(value)).second) throw Error("duplicate parameter path '" + path + "'");
}

const Tensor& ParamTree::at(const std::string& path) const {
  auto it = params_.find(path);
  if (it == params_.end()) throw Error("missing parameter '" + path + "'");
  return it->second;
}

Tensor& ParamTree::at(const std::string& path) {
  auto it = params_.find(path);
  if (it == params_.end()) throw Error("missing parameter '" + path + "'");
  return it->second;
}

std::vector<std::string> ParamTree::paths() const {
  std::vector<std::string> out;
  out.reserve(params_.size());
  for (const auto& [path, _] : params_) out.push_back(path);
  return out;
}

std::int64_t ParamTree::total_count() const {
  std::int64_t n = 0;
  for (const auto& [_, t] : params_) n += static_cast<std::int64_t>(t.size());
  return n;
}

ParamTree ParamTree::zeros_like() const {
  ParamTree out;
  for (const auto& [path, t] : params_) out.add(path, Tensor(t.shape(), t.precision()));
  return out;
}

bool ParamTree::same_layout(const ParamTree& other) const {
  if (params_.size() != other.params_.size()) return false;
  auto a = params_.begin();
  auto b = other.params_.begin();
  for (; a != params_.end(); ++a, ++b) {
    if (a->first != b->first || a->second.shape() != b->second.shape()) return false;
  }
  return true;
}

bool ParamTree::identical(const ParamTree& other) const {
  if (!same_layout(other)) return false;
  auto b = other.params_.begin();
  for (auto a = params_.begin(); a != params_.end(); ++a, ++b) {
    if (!a->second.identical(b->second)) return false;
  }
  return true;
}

bool ParamTree::all_finite() const {
  for (const auto& [_, t] : params_) {
    if (!t.all_finite()) return false;
  }
  return true;
}

}  // namespace ptlab
