#pragma once

// Strict reading of config objects: every key must be consumed, so typos are
// reported instead of silently ignored.

#include <set>
#include <string>
#include <utility>

#include "cks/error.hpp"
#include "json.hpp"

namespace cks::json_util {

class StrictObject {
 public:
  StrictObject(const nlohmann::json& object, std::string where) : object_(object), where_(std::move(where)) {
    if (!object_.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  template <typename T>
  void get(const char* key, T& out) const {
    seen_.insert(key);
    if (!object_.contains(key)) return;
    try {
      out = object_.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  template <typename T>
  void require(const char* key, T& out) const {
    if (!object_.contains(key)) throw ConfigError(where_ + ": missing required key '" + key + "'");
    get(key, out);
  }

  /// Sub-object; returns nullptr-equivalent empty object when absent.
  const nlohmann::json& child(const char* key) const {
    seen_.insert(key);
    static const nlohmann::json empty = nlohmann::json::object();
    return object_.contains(key) ? object_.at(key) : empty;
  }

  bool has(const char* key) const { return object_.contains(key); }

  std::string path(const char* key) const { return where_ + "." + key; }

  /// Throws ConfigError if the object holds keys that were never requested.
  void finish() const {
    for (const auto& [key, _] : object_.items()) {
      if (!seen_.contains(key)) throw ConfigError(where_ + ": unknown key '" + key + "'");
    }
  }

 private:
  const nlohmann::json& object_;
  std::string where_;
  mutable std::set<std::string> seen_;
};

/// FNV-1a, stable across runs and platforms.
inline std::string fnv1a_hex(const std::string& text) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[i] = digits[h & 0xf];
    h >>= 4;
  }
  return out;
}

}  // namespace cks::json_util
