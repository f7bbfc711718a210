#pragma once

#include <stdexcept>
#include <string>

namespace defeat {

/// Invalid configuration (dataset spec, detector config, train config).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Filesystem failure while reading or writing artifacts.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A persisted artifact exists but fails validation. The message names the
/// offending record.
class LoadError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input data references something that does not exist (e.g. an unknown class).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Caller broke a precondition (shape mismatch, invalid argument).
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Training produced a non-finite loss.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ContractViolation(what);
}

}  // namespace defeat
