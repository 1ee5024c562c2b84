#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace tpn {

/// Shape or rank disagreement between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// LU factorization met a pivot below the singularity threshold.
class SingularMatrixError : public std::runtime_error {
 public:
  SingularMatrixError(std::size_t pivot_index, double pivot_value);
  std::size_t pivot_index() const noexcept { return pivot_index_; }
  double pivot_value() const noexcept { return pivot_value_; }

 private:
  std::size_t pivot_index_;
  double pivot_value_;
};

/// Malformed binary file (dataset or checkpoint).
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::size_t offset);
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// Invalid argument or configuration value.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Non-finite loss or a numerically degenerate system during training.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Misuse of the differentiation tape (e.g. second backward on one forward).
class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace tpn
