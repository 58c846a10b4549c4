#pragma once

// AdamW with decoupled weight decay and a polynomial learning-rate schedule.

#include <vector>

#include "iimt/checkpoint.hpp"
#include "iimt/nn.hpp"

namespace iimt {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  // Gradients are rescaled so their global L2 norm does not exceed this (0 = off).
  double clip_norm = 1.0;
};

class AdamW {
 public:
  AdamW(nn::ParameterStore& ps, AdamWConfig cfg);

  // Applies one update from the accumulated gradients, then clears them.
  // Weight decay skips 1-D parameters (biases, norms). Throws NumericalError
  // when a gradient is not finite.
  void step(double lr);
  long steps() const { return t_; }

  // Moments are stored as "adam.m.<name>" / "adam.v.<name>" arrays plus the
  // step count in the config text.
  void save_state(Checkpoint& into) const;
  void load_state(const Checkpoint& from);

 private:
  nn::ParameterStore& ps_;
  AdamWConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  long t_ = 0;
};

struct LrSchedule {
  double peak = 1e-3;
  double end = 0.0;
  double power = 1.0;
  int warmup = 0;
  int total = 1;

  // Linear warmup to peak, then peak -> end following (1 - progress)^power.
  double at(int step) const;
};

}  // namespace iimt
