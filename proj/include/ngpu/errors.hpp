#pragma once

#include <stdexcept>
#include <string>

namespace ngpu {

// Violated precondition or shape contract.
class ContractViolation : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// An operation produced a NaN/Inf, or training hit a non-finite loss.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed expression, dataset record, or config document.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t position)
      : std::runtime_error(what + " (position " + std::to_string(position) + ")"),
        position_(position) {}
  explicit ParseError(const std::string& what) : std::runtime_error(what) {}

  std::size_t position() const { return position_; }

 private:
  std::size_t position_ = 0;
};

inline void require(bool condition, const std::string& message) {
  if (!condition) throw ContractViolation(message);
}

}  // namespace ngpu
