#pragma once

#include <stdexcept>
#include <string>

namespace applyctl {

// Raised when a fit-only operation runs in the test stage, or stages run out of order.
class ProtocolViolation : public std::logic_error {
 public:
  explicit ProtocolViolation(const std::string& what) : std::logic_error(what) {}
};

// Test-stage inputs do not hash to what the freeze manifest recorded.
class HashMismatch : public std::runtime_error {
 public:
  explicit HashMismatch(const std::string& what) : std::runtime_error(what) {}
};

// A statistic is undefined for the given input (single-class AUC, etc).
class UndefinedSignal : public std::domain_error {
 public:
  explicit UndefinedSignal(const std::string& what) : std::domain_error(what) {}
};

class LookupError : public std::out_of_range {
 public:
  explicit LookupError(const std::string& what) : std::out_of_range(what) {}
};

class ConvergenceError : public std::runtime_error {
 public:
  explicit ConvergenceError(const std::string& what) : std::runtime_error(what) {}
};

class FormatError : public std::runtime_error {
 public:
  explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace applyctl
