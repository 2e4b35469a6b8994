#pragma once

#include <stdexcept>
#include <string>

namespace flexkd {

// Incompatible or invalid tensor/layer dimensions.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid argument values (negative stddev, non-one-hot labels, bad fractions, ...).
class ValueError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad run configuration: schema violations, unknown keys, inconsistent settings.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed input files (IDX, CSV, checkpoints).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite values where finite math was required (NaN loss, overflow, bad gradients).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace flexkd
