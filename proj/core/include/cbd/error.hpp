#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace cbd {

/// Base class for every error the library throws on contract violations.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid caller input: bad arguments, mismatched tasks, malformed config.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// A file could not be opened, read, or written.
class IoError : public Error {
 public:
  using Error::Error;
};

struct ConfigIssue {
  std::string key_path;  // e.g. "backends[1].kind"
  std::string message;
};

/// A configuration document failed validation; carries every issue found.
class ConfigError : public InvalidArgument {
 public:
  explicit ConfigError(std::vector<ConfigIssue> issues)
      : InvalidArgument(summarize(issues)), issues_(std::move(issues)) {}
  const std::vector<ConfigIssue>& issues() const { return issues_; }

 private:
  static std::string summarize(const std::vector<ConfigIssue>& issues) {
    std::string out = "invalid configuration";
    for (const auto& i : issues) {
      out += "\n  " + (i.key_path.empty() ? std::string("<root>") : i.key_path) + ": " + i.message;
    }
    return out;
  }
  std::vector<ConfigIssue> issues_;
};

}  // namespace cbd
