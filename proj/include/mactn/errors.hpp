#pragma once

#include <stdexcept>
#include <string>

namespace mactn {

// Shapes that do not line up for an operation.
class DimensionError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

// Caller broke a precondition that is not a plain shape problem.
class ContractError : public std::logic_error {
public:
  using std::logic_error::logic_error;
};

// A NaN or Inf reached an op boundary.
class NonFiniteError : public std::domain_error {
public:
  using std::domain_error::domain_error;
};

class EmptyReductionError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

// Invalid configuration value (model, pipeline, training).
class ConfigError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

} // namespace mactn
