#pragma once

#include <stdexcept>
#include <string>

namespace ssmkt {

// Shape mismatch in a tensor primitive. Message names the op and both shapes.
struct ShapeError : std::invalid_argument {
  explicit ShapeError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Malformed input files, bad CSV headers, out-of-range ids. CLI maps this
// to exit code 2.
struct FormatError : std::runtime_error {
  explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values, NaN gradients, broken invariants at run time. CLI maps
// this to exit code 1.
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace ssmkt
