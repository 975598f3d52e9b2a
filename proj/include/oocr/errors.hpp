#pragma once

#include <stdexcept>
#include <string>

namespace oocr {

/// Operand shapes are incompatible. The message names the op.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A caller broke an operation's precondition.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Input that is valid in shape but carries no usable signal
/// (all-zero vectors, rank-0 matrices, empty prompt sets).
class DegenerateInputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Training produced a NaN/Inf loss or gradient.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or unreadable persisted artifact.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace oocr
