#pragma once

#include <stdexcept>
#include <string>

namespace ncdsfl {

// Dimension or length mismatch between operands.
class SizeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// More mutually orthogonal classifier directions requested than the feature
// space can hold.
class InfeasibleOrthogonalityError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DegenerateInputError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class ParameterError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class StepSizeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, int round)
      : std::runtime_error(what), round_(round) {}
  int round() const { return round_; }

 private:
  int round_;
};

class CoverageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace ncdsfl
