#pragma once

#include <stdexcept>
#include <string>

namespace depthseq {

// Bad input: malformed files, violated preconditions, inconsistent shapes.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite loss or parameters during optimisation.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace depthseq
