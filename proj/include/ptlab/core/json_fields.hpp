#pragma once

#include <algorithm>
#include <initializer_list>
#include <string>
#include <string_view>

#include <json.hpp>

#include "ptlab/core/error.hpp"

namespace ptlab {

/// Rejects non-objects and fields outside `allowed`.
inline void check_keys(const nlohmann::json& j, std::initializer_list<std::string_view> allowed,
                       const std::string& where) {
  if (!j.is_object()) throw ValidationError(where + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw ValidationError(where + ": unknown field '" + key + "'");
    }
  }
}

/// Reads a required field, turning type errors into ValidationError.
template <typename T>
T field(const nlohmann::json& j, const std::string& key, const std::string& where) {
  if (!j.contains(key)) throw ValidationError(where + ": missing field '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ValidationError(where + ": field '" + key + "' has the wrong type");
  }
}

/// Overwrites `out` when the field is present.
template <typename T>
void optional_field(const nlohmann::json& j, const std::string& key, const std::string& where, T& out) {
  if (j.contains(key)) out = field<T>(j, key, where);
}

}  // namespace ptlab
