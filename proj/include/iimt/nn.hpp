#pragma once

// Parameter registry and the small stateless layers built on it.

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "iimt/ops.hpp"

namespace iimt::nn {

using ad::Real;
using ad::Shape;
using ad::Tensor;

// Owns every trainable tensor of a model under a unique dotted name, in
// registration order. Initialization draws from one seeded generator, so a
// model built twice with the same seed is bitwise identical.
class ParameterStore {
 public:
  explicit ParameterStore(std::uint64_t seed = 0) : rng_(seed) {}

  Tensor normal(const std::string& name, Shape shape, Real stddev);
  Tensor uniform(const std::string& name, Shape shape, Real lo, Real hi);
  Tensor constant(const std::string& name, Shape shape, Real value);

  const std::vector<std::pair<std::string, Tensor>>& params() const { return params_; }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  Tensor find(const std::string& name) const;
  std::size_t numel() const;

  void set_trainable(bool on);
  void zero_grad();

 private:
  Tensor add(const std::string& name, Tensor t);

  std::mt19937_64 rng_;
  std::vector<std::pair<std::string, Tensor>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

// Per-forward state: train/eval mode and the dropout seed stream.
struct ForwardCtx {
  bool training = false;
  Real dropout = 0.0;
  std::uint64_t seed = 0;
  std::uint64_t calls = 0;

  Tensor drop(const Tensor& x);
};

struct Linear {
  Tensor w;  // [in, out]
  Tensor b;  // [out], undefined without bias

  Linear() = default;
  Linear(ParameterStore& ps, const std::string& name, int in, int out, bool bias = true);
  Tensor operator()(const Tensor& x) const;
};

struct LayerNorm {
  Tensor gain, bias;
  Real eps = 1e-5;

  LayerNorm() = default;
  LayerNorm(ParameterStore& ps, const std::string& name, int dim);
  Tensor operator()(const Tensor& x) const { return ad::layer_norm(x, gain, bias, eps); }
};

struct Embedding {
  Tensor table;  // [vocab, dim]

  Embedding() = default;
  Embedding(ParameterStore& ps, const std::string& name, int vocab, int dim, Real stddev);
  Tensor operator()(std::span<const int> ids) const { return ad::embedding(table, ids); }
  int vocab() const { return table.dim(0); }
};

}  // namespace iimt::nn
