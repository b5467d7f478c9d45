#pragma once

#include <stdexcept>
#include <string>

namespace icot {

// Precondition or contract violation: bad shapes, out-of-range indices,
// mismatched configurations. The CLI maps these to a nonzero exit code.
class ContractError : public std::runtime_error {
 public:
  explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape mismatch between operands; message names both shapes.
class DimensionError : public ContractError {
 public:
  explicit DimensionError(const std::string& msg) : ContractError(msg) {}
};

// Requested dataset split sizes exceed the number of distinct instances.
class CapacityError : public ContractError {
 public:
  explicit CapacityError(const std::string& msg) : ContractError(msg) {}
};

// Malformed dataset file; carries the 1-based line number.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& msg, long line)
      : std::runtime_error(msg + " (line " + std::to_string(line) + ")"),
        line_(line) {}
  long line() const { return line_; }

 private:
  long line_;
};

// Checkpoint container failures, one kind per failure mode.
class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { io, bad_magic, bad_version, truncated, bad_format, dim_mismatch };

  CheckpointError(Kind kind, const std::string& msg)
      : std::runtime_error(msg), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

}  // namespace icot
