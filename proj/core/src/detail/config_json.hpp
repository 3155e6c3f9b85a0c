#pragma once

// Key-path aware readers over nlohmann::json. Every problem is recorded in
// an Issues list so a whole document can be checked before anything runs.

#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "cbd/error.hpp"
#include "json.hpp"

namespace cbd::detail {

using nlohmann::json;

class Issues {
 public:
  void add(std::string path, std::string message) {
    list_.push_back({std::move(path), std::move(message)});
  }
  bool empty() const { return list_.empty(); }
  void throw_if_any() const {
    if (!list_.empty()) throw ConfigError(list_);
  }

 private:
  std::vector<ConfigIssue> list_;
};

inline std::string key_path(std::string_view parent, std::string_view key) {
  return parent.empty() ? std::string(key) : std::string(parent) + "." + std::string(key);
}

inline std::string index_path(std::string_view parent, std::size_t i) {
  return std::string(parent) + "[" + std::to_string(i) + "]";
}

inline bool expect_object(const json& j, const std::string& path, Issues& issues) {
  if (j.is_object()) return true;
  issues.add(path, "expected an object");
  return false;
}

inline void reject_unknown_keys(const json& obj, const std::string& path,
                                std::initializer_list<std::string_view> allowed,
                                Issues& issues) {
  if (!obj.is_object()) return;
  const std::set<std::string_view> ok(allowed);
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (!ok.contains(it.key())) issues.add(key_path(path, it.key()), "unknown key");
  }
}

inline const json* member(const json& obj, const std::string& path, std::string_view key,
                          bool required, Issues& issues) {
  if (obj.is_object()) {
    auto it = obj.find(std::string(key));
    if (it != obj.end()) return &*it;
  }
  if (required) issues.add(key_path(path, key), "required key is missing");
  return nullptr;
}

inline std::optional<std::string> get_string(const json& obj, const std::string& path,
                                             std::string_view key, bool required, Issues& issues,
                                             bool allow_empty = false) {
  const json* v = member(obj, path, key, required, issues);
  if (!v) return std::nullopt;
  if (!v->is_string()) {
    issues.add(key_path(path, key), "expected a string");
    return std::nullopt;
  }
  auto s = v->get<std::string>();
  if (s.empty() && !allow_empty) {
    issues.add(key_path(path, key), "must not be empty");
    return std::nullopt;
  }
  return s;
}

inline std::optional<double> get_number(const json& obj, const std::string& path,
                                        std::string_view key, bool required, Issues& issues) {
  const json* v = member(obj, path, key, required, issues);
  if (!v) return std::nullopt;
  if (!v->is_number()) {
    issues.add(key_path(path, key), "expected a number");
    return std::nullopt;
  }
  return v->get<double>();
}

inline std::optional<std::uint64_t> get_uint(const json& obj, const std::string& path,
                                             std::string_view key, bool required, Issues& issues,
                                             std::uint64_t min = 0) {
  const json* v = member(obj, path, key, required, issues);
  if (!v) return std::nullopt;
  if (!v->is_number_unsigned() && !(v->is_number_integer() && v->get<std::int64_t>() >= 0)) {
    issues.add(key_path(path, key), "expected a non-negative integer");
    return std::nullopt;
  }
  const auto u = v->get<std::uint64_t>();
  if (u < min) {
    issues.add(key_path(path, key), "must be >= " + std::to_string(min));
    return std::nullopt;
  }
  return u;
}

inline std::optional<bool> get_bool(const json& obj, const std::string& path,
                                    std::string_view key, bool required, Issues& issues) {
  const json* v = member(obj, path, key, required, issues);
  if (!v) return std::nullopt;
  if (!v->is_boolean()) {
    issues.add(key_path(path, key), "expected true or false");
    return std::nullopt;
  }
  return v->get<bool>();
}

/// A string or a list of strings.
inline std::optional<std::vector<std::string>> get_string_list(const json& obj,
                                                               const std::string& path,
                                                               std::string_view key, bool required,
                                                               Issues& issues) {
  const json* v = member(obj, path, key, required, issues);
  if (!v) return std::nullopt;
  if (v->is_string()) return std::vector<std::string>{v->get<std::string>()};
  if (!v->is_array()) {
    issues.add(key_path(path, key), "expected a string or a list of strings");
    return std::nullopt;
  }
  std::vector<std::string> out;
  bool ok = true;
  for (std::size_t i = 0; i < v->size(); ++i) {
    if (!(*v)[i].is_string() || (*v)[i].get<std::string>().empty()) {
      issues.add(index_path(key_path(path, key), i), "expected a non-empty string");
      ok = false;
    } else {
      out.push_back((*v)[i].get<std::string>());
    }
  }
  if (ok && out.empty()) {
    issues.add(key_path(path, key), "must not be empty");
    return std::nullopt;
  }
  return ok ? std::optional(out) : std::nullopt;
}

inline std::filesystem::path resolve_path(const std::filesystem::path& base, const std::string& p) {
  std::filesystem::path path(p);
  if (path.is_relative()) path = base / path;
  return path.lexically_normal();
}

/// Requires an existing regular file; records an issue otherwise.
inline std::optional<std::filesystem::path> existing_file(const std::filesystem::path& base,
                                                          const std::string& value,
                                                          const std::string& path, Issues& issues) {
  const auto p = resolve_path(base, value);
  std::error_code ec;
  if (!std::filesystem::is_regular_file(p, ec)) {
    issues.add(path, "file not found: " + p.string());
    return std::nullopt;
  }
  return p;
}

}  // namespace cbd::detail
