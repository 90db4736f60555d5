#pragma once

#include <stdexcept>
#include <string>

namespace widthlab {

// Bad configuration values, unknown keys, malformed grammars. The CLI maps
// this family to exit code 2.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad runtime inputs: out-of-range tokens, mismatched vocabularies, empty
// trajectories.
class InputError : public std::runtime_error {
 public:
  explicit InputError(const std::string& msg) : std::runtime_error(msg) {}
};

// Unreadable or corrupt serialized state.
class LoadError : public std::runtime_error {
 public:
  explicit LoadError(const std::string& msg) : std::runtime_error(msg) {}
};

// A run hit a non-recoverable numeric condition (non-finite gradient or loss).
class RunAbortError : public std::runtime_error {
 public:
  explicit RunAbortError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace widthlab
