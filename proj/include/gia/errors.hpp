#pragma once

#include <stdexcept>
#include <string>

namespace gia {

// Raised when a caller violates an operation's documented precondition
// (bad shapes, missing metadata, invalid configuration). Maps to exit code 2.
class PreconditionError : public std::invalid_argument {
 public:
  explicit PreconditionError(const std::string& what) : std::invalid_argument(what) {}
};

// Raised when a well-formed computation fails at run time (non-finite values,
// I/O failures, diverged optimization). Maps to exit code 1.
class RuntimeFailure : public std::runtime_error {
 public:
  explicit RuntimeFailure(const std::string& what) : std::runtime_error(what) {}
};

class ShapeError : public PreconditionError {
 public:
  explicit ShapeError(const std::string& what) : PreconditionError(what) {}
};

class NonFiniteError : public RuntimeFailure {
 public:
  explicit NonFiniteError(const std::string& what) : RuntimeFailure(what) {}
};

}  // namespace gia
