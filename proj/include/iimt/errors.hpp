#pragma once

#include <stdexcept>
#include <string>

namespace iimt {

// Dimension or layout disagreement between operands.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Invalid configuration or missing prerequisite.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Index (token id, char id, code index) outside its vocabulary.
struct RangeError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

// Caller violated an operation precondition.
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

// Non-finite value surfaced during training.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A metric asked for on an input where it is undefined (empty corpus, empty reference).
struct UndefinedScoreError : std::domain_error {
  using std::domain_error::domain_error;
};

}  // namespace iimt
