#include "iimt/optim.hpp"

#include <cmath>

#include "iimt/config.hpp"
#include "iimt/errors.hpp"

namespace iimt {

AdamW::AdamW(nn::ParameterStore& ps, AdamWConfig cfg) : ps_(ps), cfg_(cfg) {
  for (const auto& [name, t] : ps_.params()) {
    m_.emplace_back(t.numel(), 0.0);
    v_.emplace_back(t.numel(), 0.0);
  }
}

void AdamW::step(double lr) {
  const auto& params = ps_.params();
  double sq = 0;
  for (auto& [name, t] : params) {
    if (!t.has_grad()) continue;
    for (double g : t.grad()) {
      if (!std::isfinite(g)) throw NumericalError("non-finite gradient in parameter " + name);
      sq += g * g;
    }
  }
  const double norm = std::sqrt(sq);
  const double clip = (cfg_.clip_norm > 0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / norm : 1.0;
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    ad::Tensor t = params[i].second;
    if (!t.requires_grad()) continue;
    auto w = t.data_mut();
    const bool decay = cfg_.weight_decay > 0 && t.rank() > 1;
    const bool has = t.has_grad();
    std::span<const double> g = t.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double gk = has ? g[k] * clip : 0.0;
      m[k] = cfg_.beta1 * m[k] + (1 - cfg_.beta1) * gk;
      v[k] = cfg_.beta2 * v[k] + (1 - cfg_.beta2) * gk * gk;
      if (decay) w[k] -= lr * cfg_.weight_decay * w[k];
      w[k] -= lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + cfg_.eps);
    }
    t.zero_grad();
  }
}

void AdamW::save_state(Checkpoint& into) const {
  const auto& params = ps_.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    into.arrays.push_back({"adam.m." + params[i].first, params[i].second.shape(), m_[i]});
    into.arrays.push_back({"adam.v." + params[i].first, params[i].second.shape(), v_[i]});
  }
  into.config += "adam.step = " + std::to_string(t_) + "\n";
}

void AdamW::load_state(const Checkpoint& from) {
  const auto& params = ps_.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const NamedArray* m = from.find("adam.m." + params[i].first);
    const NamedArray* v = from.find("adam.v." + params[i].first);
    if (!m || !v || m->data.size() != m_[i].size() || v->data.size() != v_[i].size())
      throw ContractError("optimizer state missing or mismatched for " + params[i].first);
    m_[i] = m->data;
    v_[i] = v->data;
  }
  t_ = static_cast<long>(Config::parse(from.config).get_u64("adam.step", 0));
}

double LrSchedule::at(int step) const {
  if (warmup > 0 && step < warmup) return peak * (step + 1) / warmup;
  const int span = std::max(1, total - warmup);
  const double progress = std::min(1.0, static_cast<double>(step - warmup) / span);
  return end + (peak - end) * std::pow(1.0 - progress, power);
}

}  // namespace iimt
