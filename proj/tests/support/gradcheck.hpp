#pragma once

// Central finite-difference gradient checks against the tape.

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "iimt/tensor.hpp"

namespace iimt::testing {

constexpr double kFdStep = 1e-5;
constexpr double kGradTol = 1e-4;
// Denominator floor. Below it errors are absolute: finite differences carry
// ~1e-10 round-off, which matters for structurally zero gradients (key biases).
constexpr double kGradFloor = 1e-5;

struct GradCheck {
  double max_rel_err = 0;
  std::string worst;  // "<param>[<index>]: tape a, numeric n"
  int checked = 0;
};

using NamedTensors = std::vector<std::pair<std::string, ad::Tensor>>;

// f builds a scalar loss from the current values of params. The analytic
// gradient comes from one taped evaluation; each checked coordinate is then
// perturbed by +-h and f re-evaluated without a tape. max_coords < 0 checks
// every coordinate, otherwise an evenly strided subset per tensor.
GradCheck gradcheck(const std::function<ad::Tensor()>& f, const NamedTensors& params, int max_coords = -1,
                    double h = kFdStep);

double rel_err(double a, double b);

}  // namespace iimt::testing
