#pragma once

#include <stdexcept>
#include <string>

namespace apb {

// Invalid configuration, shape or arch mismatch.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid or degenerate input data (empty audio, degenerate hull, ...).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed or unreadable file.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr const char* kPipelineVersion = "apbface-1.0";

}  // namespace apb
