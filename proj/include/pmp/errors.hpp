#pragma once

#include <stdexcept>
#include <string>

namespace pmp {

// Shapes or structures disagree (tensor sizes, mask keys, layer wiring).
class StructuralError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// A caller-supplied value is outside an operation's domain.
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Unknown class, layer or key.
class LookupError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// Non-finite loss, gradient or Hessian-vector product.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration file or option combination.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A pruning request cannot be met without emptying a layer.
class InfeasibleTarget : public std::runtime_error {
 public:
  InfeasibleTarget(const std::string& what, double minimal_retention)
      : std::runtime_error(what), minimal_retention_(minimal_retention) {}

  double minimal_retention() const { return minimal_retention_; }

 private:
  double minimal_retention_;
};

}  // namespace pmp
