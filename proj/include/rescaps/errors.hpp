#pragma once

#include <stdexcept>
#include <string>

namespace rescaps {

// Bad user configuration (config files, CLI arguments). CLI exit code 1.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Unreadable or malformed data (images, manifests, checkpoints). CLI exit code 2.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shape or dimension mismatch; the message names the offending dimension.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Failed self-verification (gradient checks etc.). CLI exit code 3.
class VerifyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace rescaps
