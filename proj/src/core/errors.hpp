#pragma once

#include <stdexcept>
#include <string>

namespace ima {

/// A pivot vanished relative to the matrix magnitude during factorization;
/// carries max|A| over the offending pivot as a cheap conditioning estimate.
class SingularJacobian : public std::runtime_error {
 public:
  SingularJacobian(const std::string& what, double condition_estimate)
      : std::runtime_error(what), condition_estimate_(condition_estimate) {}
  double condition_estimate() const { return condition_estimate_; }

 private:
  double condition_estimate_;
};

/// Precondition violation: bad dimensions, non-finite inputs, values outside domain.
class DomainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An iterative scheme exhausted its budget without meeting tolerance.
class NoConvergence : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent configuration or serialized state.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace ima
