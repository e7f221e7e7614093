// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace baseroute {

/// Violation of a module precondition or invariant (bad shapes, non-finite
/// values, unbalanced assignments, ...). Maps to exit code 3 in the CLI.
class ContractError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed external input (CSV, JSON container). Maps to exit code 2.
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Training produced a non-finite loss. Maps to exit code 4.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& msg, long step)
      : std::runtime_error(msg), step_(step) {}
  long step() const { return step_; }

 private:
  long step_;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ContractError(msg);
}

}  // namespace baseroute
