#include "iimt/nn.hpp"

#include <cmath>

#include "iimt/errors.hpp"

namespace iimt::nn {

Tensor ParameterStore::add(const std::string& name, Tensor t) {
  if (contains(name)) throw ConfigError("duplicate parameter name " + name);
  t.set_requires_grad(true);
  index_[name] = params_.size();
  params_.emplace_back(name, t);
  return t;
}

Tensor ParameterStore::normal(const std::string& name, Shape shape, Real stddev) {
  Tensor t = Tensor::zeros(std::move(shape));
  std::normal_distribution<Real> dist(0.0, stddev);
  for (Real& v : t.data_mut()) v = dist(rng_);
  return add(name, t);
}

Tensor ParameterStore::uniform(const std::string& name, Shape shape, Real lo, Real hi) {
  Tensor t = Tensor::zeros(std::move(shape));
  std::uniform_real_distribution<Real> dist(lo, hi);
  for (Real& v : t.data_mut()) v = dist(rng_);
  return add(name, t);
}

Tensor ParameterStore::constant(const std::string& name, Shape shape, Real value) {
  return add(name, Tensor::full(std::move(shape), value));
}

Tensor ParameterStore::find(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter " + name);
  return params_[it->second].second;
}

std::size_t ParameterStore::numel() const {
  std::size_t n = 0;
  for (const auto& [name, t] : params_) n += t.numel();
  return n;
}

void ParameterStore::set_trainable(bool on) {
  for (auto& [name, t] : params_) t.set_requires_grad(on);
}

void ParameterStore::zero_grad() {
  for (auto& [name, t] : params_) t.zero_grad();
}

// splitmix64 finalizer over the pair.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Tensor ForwardCtx::drop(const Tensor& x) {
  if (!training || dropout == 0.0) return x;
  return ad::dropout(x, dropout, mix_seed(seed, calls++), true);
}

Linear::Linear(ParameterStore& ps, const std::string& name, int in, int out, bool bias) {
  w = ps.normal(name + ".w", {in, out}, 1.0 / std::sqrt(static_cast<Real>(in)));
  if (bias) b = ps.constant(name + ".b", {out}, 0.0);
}

Tensor Linear::operator()(const Tensor& x) const { return ad::linear(x, w, b.defined() ? &b : nullptr); }

LayerNorm::LayerNorm(ParameterStore& ps, const std::string& name, int dim) {
  gain = ps.constant(name + ".g", {dim}, 1.0);
  bias = ps.constant(name + ".b", {dim}, 0.0);
}

Embedding::Embedding(ParameterStore& ps, const std::string& name, int vocab, int dim, Real stddev) {
  table = ps.normal(name, {vocab, dim}, stddev);
}

}  // namespace iimt::nn
