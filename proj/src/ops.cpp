#include "iimt/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <random>

#include "iimt/errors.hpp"

namespace iimt::ad {

namespace kn = iimt::kernels;

namespace {

using NodePtr = std::shared_ptr<Node>;

Tape* recording(std::initializer_list<const Tensor*> inputs) {
  Tape* tape = active_tape();
  if (tape == nullptr) return nullptr;
  for (const Tensor* t : inputs)
    if (t != nullptr && t->defined() && t->requires_grad()) return tape;
  return nullptr;
}

void mark_output(Tensor& out) {
  out.ptr()->requires_grad = true;
  out.ptr()->leaf = false;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " + b.shape_string());
}

// Splits a shape into (outer, axis_len, inner) around axis.
void split_axis(const Shape& s, int axis, std::size_t& outer, int& len, std::size_t& inner) {
  outer = 1;
  inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}

int normalize_axis(int axis, int rank) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError("axis out of range");
  return axis;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out = Tensor::zeros(a.shape());
  auto o = out.data_mut();
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] + bv[i];
  if (Tape* tape = recording({&a, &b})) {
    mark_output(out);
    tape->record([an = a.ptr(), bn = b.ptr(), on = out.ptr()] {
      if (on->grad.empty()) return;
      const Real* g = on->grad.data();
      const std::size_t n = on->grad.size();
      if (an->requires_grad) {
        Real* ga = an->grad_data();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (bn->requires_grad) {
        Real* gb = bn->grad_data();
        for (std::size_t i = 0; i < n; ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out = Tensor::zeros(a.shape());
  auto o = out.data_mut();
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] - bv[i];
  if (Tape* tape = recording({&a, &b})) {
    mark_output(out);
    tape->record([an = a.ptr(), bn = b.ptr(), on = out.ptr()] {
      if (on->grad.empty()) return;
      const Real* g = on->grad.data();
      const std::size_t n = on->grad.size();
      if (an->requires_grad) {
        Real* ga = an->grad_data();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (bn->requires_grad) {
        Real* gb = bn->grad_data();
        for (std::size_t i = 0; i < n; ++i) gb[i] -= g[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out = Tensor::zeros(a.shape());
  auto o = out.data_mut();
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] * bv[i];
  if (Tape* tape = recording({&a, &b})) {
    mark_output(out);
    tape->record([an = a.ptr(), bn = b.ptr(), on = out.ptr()] {
      if (on->grad.empty()) return;
      const Real* g = on->grad.data();
      const std::size_t n = on->grad.size();
      if (an->requires_grad) {
        Real* ga = an->grad_data();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * bn->value[i];
      }
      if (bn->requires_grad) {
        Real* gb = bn->grad_data();
        for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * an->value[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& a, Real s) {
  Tensor out = Tensor::zeros(a.shape());
  auto o = out.data_mut();
  auto av = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] * s;
  if (Tape* tape = recording({&a})) {
    mark_output(out);
    tape->record([an = a.ptr(), on = out.ptr(), s] {
      if (on->grad.empty()) return;
      Real* ga = an->grad_data();
      for (std::size_t i = 0; i < on->grad.size(); ++i) ga[i] += s * on->grad[i];
    });
  }
  return out;
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  const int n = x.dim(-1);
  if (bias.numel() != static_cast<std::size_t>(n))
    throw ShapeError("add_bias: bias " + bias.shape_string() + " does not match last dim of " + x.shape_string());
  Tensor out = Tensor::zeros(x.shape());
  auto o = out.data_mut();
  auto xv = x.data();
  auto bv = bias.data();
  const std::size_t rows = x.numel() / n;
  for (std::size_t r = 0; r < rows; ++r)
    for (int j = 0; j < n; ++j) o[r * n + j] = xv[r * n + j] + bv[j];
  if (Tape* tape = recording({&x, &bias})) {
    mark_output(out);
    tape->record([xn = x.ptr(), bn = bias.ptr(), on = out.ptr(), rows, n] {
      if (on->grad.empty()) return;
      const Real* g = on->grad.data();
      if (xn->requires_grad) {
        Real* gx = xn->grad_data();
        for (std::size_t i = 0; i < rows * n; ++i) gx[i] += g[i];
      }
      if (bn->requires_grad) {
        Real* gb = bn->grad_data();
        for (std::size_t r = 0; r < rows; ++r)
          for (int j = 0; j < n; ++j) gb[j] += g[r * n + j];
      }
    });
  }
  return out;
}

Tensor add_positional(const Tensor& x, const Tensor& table, int seq) {
  if (x.rank() != 2 || table.rank() != 2 || x.dim(1) != table.dim(1))
    throw ShapeError("add_positional: " + x.shape_string() + " vs table " + table.shape_string());
  if (seq <= 0 || x.dim(0) % seq != 0 || seq > table.dim(0))
    throw ShapeError("add_positional: sequence length " + std::to_string(seq) + " incompatible with " + x.shape_string() + " / table " + table.shape_string());
  const int d = x.dim(1);
  const int rows = x.dim(0);
  Tensor out = Tensor::zeros(x.shape());
  auto o = out.data_mut();
  auto xv = x.data();
  auto tv = table.data();
  for (int r = 0; r < rows; ++r) {
    const int s = r % seq;
    for (int j = 0; j < d; ++j) o[static_cast<std::size_t>(r) * d + j] = xv[static_cast<std::size_t>(r) * d + j] + tv[static_cast<std::size_t>(s) * d + j];
  }
  if (Tape* tape = recording({&x, &table})) {
    mark_output(out);
    tape->record([xn = x.ptr(), tn = table.ptr(), on = out.ptr(), rows, d, seq] {
      if (on->grad.empty()) return;
      const Real* g = on->grad.data();
      if (xn->requires_grad) {
        Real* gx = xn->grad_data();
        for (std::size_t i = 0; i < static_cast<std::size_t>(rows) * d; ++i) gx[i] += g[i];
      }
      if (tn->requires_grad) {
        Real* gt = tn->grad_data();
        for (int r = 0; r < rows; ++r)
          for (int j = 0; j < d; ++j) gt[static_cast<std::size_t>(r % seq) * d + j] += g[static_cast<std::size_t>(r) * d + j];
      }
    });
  }
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: dimension mismatch " + a.shape_string() + " x " + b.shape_string());
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = Tensor::zeros({m, n});
  kn::parallel::gemm(kn::Trans::kNo, kn::Trans::kNo, {a.data().data(), m, k, k},
                     {b.data().data(), k, n, n}, {out.data_mut().data(), m, n, n}, false);
  if (Tape* tape = recording({&a, &b})) {
    mark_output(out);
    tape->record([an = a.ptr(), bn = b.ptr(), on = out.ptr(), m, k, n] {
      if (on->grad.empty()) return;
      kn::MatView g{on->grad.data(), m, n, n};
      if (an->requires_grad)
        kn::parallel::gemm(kn::Trans::kNo, kn::Trans::kYes, g, {bn->value.data(), k, n, n},
                           {an->grad_data(), m, k, k}, true);
      if (bn->requires_grad)
        kn::parallel::gemm(kn::Trans::kYes, kn::Trans::kNo, {an->value.data(), m, k, k}, g,
                           {bn->grad_data(), k, n, n}, true);
    });
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor* bias) {
  if (w.rank() != 2 || x.dim(-1) != w.dim(0))
    throw ShapeError("linear: dimension mismatch " + x.shape_string() + " x " + w.shape_string());
  const int k = w.dim(0), n = w.dim(1);
  if (bias && bias->numel() != static_cast<std::size_t>(n))
    throw ShapeError("linear: bias " + bias->shape_string() + " does not match output width " + std::to_string(n));
  const int m = static_cast<int>(x.numel() / k);
  Shape out_shape = x.shape();
  out_shape.back() = n;
  Tensor out = Tensor::zeros(out_shape);
  Real* o = out.data_mut().data();
  if (bias) {
    auto bv = bias->data();
    for (int r = 0; r < m; ++r) std::copy(bv.begin(), bv.end(), o + static_cast<std::size_t>(r) * n);
  }
  kn::parallel::gemm(kn::Trans::kNo, kn::Trans::kNo, {x.data().data(), m, k, k},
                     {w.data().data(), k, n, n}, {o, m, n, n}, bias != nullptr);
  if (Tape* tape = recording({&x, &w, bias})) {
    mark_output(out);
    NodePtr bn = bias ? bias->ptr() : nullptr;
    tape->record([xn = x.ptr(), wn = w.ptr(), bn, on = out.ptr(), m, k, n] {
      if (on->grad.empty()) return;
      kn::MatView g{on->grad.data(), m, n, n};
      if (xn->requires_grad)
        kn::parallel::gemm(kn::Trans::kNo, kn::Trans::kYes, g, {wn->value.data(), k, n, n},
                           {xn->grad_data(), m, k, k}, true);
      if (wn->requires_grad)
        kn::parallel::gemm(kn::Trans::kYes, kn::Trans::kNo, {xn->value.data(), m, k, k}, g,
                           {wn->grad_data(), k, n, n}, true);
      if (bn && bn->requires_grad) {
        Real* gb = bn->grad_data();
        for (int r = 0; r < m; ++r)
          for (int j = 0; j < n; ++j) gb[j] += g.at(r, j);
      }
    });
  }
  return out;
}

Tensor sigmoid(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  auto o = out.data_mut();
  auto xv = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = 1.0 / (1.0 + std::exp(-xv[i]));
  if (Tape* tape = recording({&x})) {
    mark_output(out);
    tape->record([xn = x.ptr(), on = out.ptr()] {
      if (on->grad.empty()) return;
      Real* gx = xn->grad_data();
      for (std::size_t i = 0; i < on->grad.size(); ++i) {
        const Real y = on->value[i];
        gx[i] += on->grad[i] * y * (1.0 - y);
      }
    });
  }
  return out;
}

Tensor gelu(const Tensor& x) {
  constexpr Real kInvSqrt2 = 0.70710678118654752440;
  Tensor out = Tensor::zeros(x.shape());
  auto o = out.data_mut();
  auto xv = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = 0.5 * xv[i] * (1.0 + std::erf(xv[i] * kInvSqrt2));
  if (Tape* tape = recording({&x})) {
    mark_output(out);
    tape->record([xn = x.ptr(), on = out.ptr()] {
      if (on->grad.empty()) return;
      const Real inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
      Real* gx = xn->grad_data();
      for (std::size_t i = 0; i < on->grad.size(); ++i) {
        const Real v = xn->value[i];
        const Real cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        const Real pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
        gx[i] += on->grad[i] * (cdf + v * pdf);
      }
    });
  }
  return out;
}

Tensor relu(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  auto o = out.data_mut();
  auto xv = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = xv[i] > 0 ? xv[i] : 0.0;
  if (Tape* tape = recording({&x})) {
    mark_output(out);
    tape->record([xn = x.ptr(), on = out.ptr()] {
      if (on->grad.empty()) return;
      Real* gx = xn->grad_data();
      for (std::size_t i = 0; i < on->grad.size(); ++i)
        if (xn->value[i] > 0) gx[i] += on->grad[i];
    });
  }
  return out;
}

Tensor softmax(const Tensor& x, int axis) {
  axis = normalize_axis(axis, x.rank());
  std::size_t outer = 0, inner = 0;
  int len = 0;
  split_axis(x.shape(), axis, outer, len, inner);
  Tensor out = Tensor::zeros(x.shape());
  if (inner == 1) {
    kn::parallel::softmax_rows(x.data().data(), out.data_mut().data(), static_cast<int>(outer), len);
  } else {
    auto xv = x.data();
    auto o = out.data_mut();
    std::vector<Real> row(len), res(len);
    for (std::size_t a = 0; a < outer; ++a)
      for (std::size_t c = 0; c < inner; ++c) {
        for (int j = 0; j < len; ++j) row[j] = xv[(a * len + j) * inner + c];
        kn::serial::softmax_rows(row.data(), res.data(), 1, len);
        for (int j = 0; j < len; ++j) o[(a * len + j) * inner + c] = res[j];
      }
  }
  if (Tape* tape = recording({&x})) {
    mark_output(out);
    tape->record([xn = x.ptr(), on = out.ptr(), outer, len, inner] {
      if (on->grad.empty()) return;
      Real* gx = xn->grad_data();
      const Real* g = on->grad.data();
      const Real* y = on->value.data();
      for (std::size_t a = 0; a < outer; ++a)
        for (std::size_t c = 0; c < inner; ++c) {
          Real dot = 0;
          for (int j = 0; j < len; ++j) {
            const std::size_t e = (a * len + j) * inner + c;
            dot += g[e] * y[e];
          }
          for (int j = 0; j < len; ++j) {
            const std::size_t e = (a * len + j) * inner + c;
            gx[e] += y[e] * (g[e] - dot);
          }
        }
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, Real eps) {
  const int n = x.dim(-1);
  if (gain.numel() != static_cast<std::size_t>(n) || bias.numel() != static_cast<std::size_t>(n))
    throw ShapeError("layer_norm: gain/bias must match last dim of " + x.shape_string());
  const std::size_t rows = x.numel() / n;
  Tensor out = Tensor::zeros(x.shape());
  auto xhat = std::make_shared<std::vector<Real>>(x.numel());
  auto rstd = std::make_shared<std::vector<Real>>(rows);
  auto xv = x.data();
  auto gv = gain.data();
  auto bv = bias.data();
  auto o = out.data_mut();
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* xr = xv.data() + r * n;
    Real mu = 0;
    for (int j = 0; j < n; ++j) mu += xr[j];
    mu /= n;
    Real var = 0;
    for (int j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= n;
    const Real rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (int j = 0; j < n; ++j) {
      const Real h = (xr[j] - mu) * rs;
      (*xhat)[r * n + j] = h;
      o[r * n + j] = h * gv[j] + bv[j];
    }
  }
  if (Tape* tape = recording({&x, &gain, &bias})) {
    mark_output(out);
    tape->record([xn = x.ptr(), gn = gain.ptr(), bn = bias.ptr(), on = out.ptr(), xhat, rstd, rows, n] {
      if (on->grad.empty()) return;
      const Real* g = on->grad.data();
      if (gn->requires_grad || bn->requires_grad) {
        Real* gg = gn->requires_grad ? gn->grad_data() : nullptr;
        Real* gb = bn->requires_grad ? bn->grad_data() : nullptr;
        for (std::size_t r = 0; r < rows; ++r)
          for (int j = 0; j < n; ++j) {
            if (gg) gg[j] += g[r * n + j] * (*xhat)[r * n + j];
            if (gb) gb[j] += g[r * n + j];
          }
      }
      if (xn->requires_grad) {
        Real* gx = xn->grad_data();
        std::vector<Real> dh(n);
        for (std::size_t r = 0; r < rows; ++r) {
          Real mean_dh = 0, mean_dh_h = 0;
          for (int j = 0; j < n; ++j) {
            dh[j] = g[r * n + j] * gn->value[j];
            mean_dh += dh[j];
            mean_dh_h += dh[j] * (*xhat)[r * n + j];
          }
          mean_dh /= n;
          mean_dh_h /= n;
          for (int j = 0; j < n; ++j)
            gx[r * n + j] += (*rstd)[r] * (dh[j] - mean_dh - (*xhat)[r * n + j] * mean_dh_h);
        }
      }
    });
  }
  return out;
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  if (table.rank() != 2) throw ShapeError("embedding: table must be 2-D, got " + table.shape_string());
  const int vocab = table.dim(0), d = table.dim(1);
  for (int id : ids)
    if (id < 0 || id >= vocab)
      throw RangeError("embedding: id " + std::to_string(id) + " outside vocabulary of size " + std::to_string(vocab));
  const int n = static_cast<int>(ids.size());
  if (n == 0) throw ShapeError("embedding: empty id list");
  Tensor out = Tensor::zeros({n, d});
  auto o = out.data_mut();
  auto tv = table.data();
  for (int i = 0; i < n; ++i)
    std::copy_n(tv.begin() + static_cast<std::size_t>(ids[i]) * d, d, o.begin() + static_cast<std::size_t>(i) * d);
  if (Tape* tape = recording({&table})) {
    mark_output(out);
    tape->record([tn = table.ptr(), on = out.ptr(), idv = std::vector<int>(ids.begin(), ids.end()), d] {
      if (on->grad.empty()) return;
      Real* gt = tn->grad_data();
      for (std::size_t i = 0; i < idv.size(); ++i)
        for (int j = 0; j < d; ++j) gt[static_cast<std::size_t>(idv[i]) * d + j] += on->grad[i * d + j];
    });
  }
  return out;
}

Tensor gather_cols(const Tensor& table, std::span<const int> idx) {
  if (table.rank() != 2) throw ShapeError("gather_cols: table must be 2-D, got " + table.shape_string());
  const int rows = table.dim(0), cols = table.dim(1);
  for (int c : idx)
    if (c < 0 || c >= cols) throw RangeError("gather_cols: column " + std::to_string(c) + " out of range");
  const int m = static_cast<int>(idx.size());
  Tensor out = Tensor::zeros({rows, m});
  auto o = out.data_mut();
  auto tv = table.data();
  for (int r = 0; r < rows; ++r)
    for (int j = 0; j < m; ++j) o[static_cast<std::size_t>(r) * m + j] = tv[static_cast<std::size_t>(r) * cols + idx[j]];
  if (Tape* tape = recording({&table})) {
    mark_output(out);
    tape->record([tn = table.ptr(), on = out.ptr(), iv = std::vector<int>(idx.begin(), idx.end()), rows, cols, m] {
      if (on->grad.empty()) return;
      Real* gt = tn->grad_data();
      for (int r = 0; r < rows; ++r)
        for (int j = 0; j < m; ++j) gt[static_cast<std::size_t>(r) * cols + iv[j]] += on->grad[static_cast<std::size_t>(r) * m + j];
    });
  }
  return out;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const int rank = parts[0].rank();
  axis = normalize_axis(axis, rank);
  Shape out_shape = parts[0].shape();
  out_shape[axis] = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != rank) throw ShapeError("concat: rank mismatch");
    for (int i = 0; i < rank; ++i)
      if (i != axis && p.shape()[i] != parts[0].shape()[i])
        throw ShapeError("concat: shape mismatch " + p.shape_string() + " vs " + parts[0].shape_string());
    out_shape[axis] += p.shape()[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= out_shape[i];
  for (int i = axis + 1; i < rank; ++i) inner *= out_shape[i];
  const std::size_t out_block = static_cast<std::size_t>(out_shape[axis]) * inner;
  Tensor out = Tensor::zeros(out_shape);
  auto o = out.data_mut();
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const Tensor& p : parts) {
    offsets.push_back(off);
    const std::size_t block = static_cast<std::size_t>(p.shape()[axis]) * inner;
    auto pv = p.data();
    for (std::size_t a = 0; a < outer; ++a) std::copy_n(pv.begin() + a * block, block, o.begin() + a * out_block + off);
    off += block;
  }
  std::vector<const Tensor*> ptrs;
  Tape* tape = active_tape();
  bool any = false;
  for (const Tensor& p : parts) any = any || p.requires_grad();
  if (tape && any) {
    mark_output(out);
    std::vector<NodePtr> nodes;
    for (const Tensor& p : parts) nodes.push_back(p.ptr());
    tape->record([nodes, offsets, on = out.ptr(), outer, inner, out_block, axis] {
      if (on->grad.empty()) return;
      for (std::size_t i = 0; i < nodes.size(); ++i) {
        if (!nodes[i]->requires_grad) continue;
        const std::size_t block = static_cast<std::size_t>(nodes[i]->shape[axis]) * inner;
        Real* gp = nodes[i]->grad_data();
        for (std::size_t a = 0; a < outer; ++a)
          for (std::size_t e = 0; e < block; ++e) gp[a * block + e] += on->grad[a * out_block + offsets[i] + e];
      }
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw ShapeError("reshape: cannot view " + x.shape_string() + " as " + shape_str(shape));
  Tensor out = Tensor::from(std::move(shape), std::vector<Real>(x.data().begin(), x.data().end()));
  if (Tape* tape = recording({&x})) {
    mark_output(out);
    tape->record([xn = x.ptr(), on = out.ptr()] {
      if (on->grad.empty()) return;
      Real* gx = xn->grad_data();
      for (std::size_t i = 0; i < on->grad.size(); ++i) gx[i] += on->grad[i];
    });
  }
  return out;
}

Tensor transpose(const Tensor& x) {
  if (x.rank() != 2) throw ShapeError("transpose: expected 2-D tensor, got " + x.shape_string());
  return permute(x, {1, 0});
}

Tensor permute(const Tensor& x, const std::vector<int>& perm) {
  const int rank = x.rank();
  if (static_cast<int>(perm.size()) != rank) throw ShapeError("permute: permutation rank mismatch");
  std::vector<bool> seen(rank, false);
  for (int p : perm) {
    if (p < 0 || p >= rank || seen[p]) throw ShapeError("permute: invalid permutation");
    seen[p] = true;
  }
  Shape out_shape(rank);
  for (int i = 0; i < rank; ++i) out_shape[i] = x.shape()[perm[i]];
  std::vector<std::size_t> in_strides(rank, 1);
  for (int i = rank - 2; i >= 0; --i) in_strides[i] = in_strides[i + 1] * x.shape()[i + 1];
  // Source offset for each output element.
  const std::size_t n = x.numel();
  std::vector<std::size_t> src(n);
  std::vector<int> counter(rank, 0);
  for (std::size_t e = 0; e < n; ++e) {
    std::size_t off = 0;
    for (int i = 0; i < rank; ++i) off += counter[i] * in_strides[perm[i]];
    src[e] = off;
    for (int i = rank - 1; i >= 0; --i) {
      if (++counter[i] < out_shape[i]) break;
      counter[i] = 0;
    }
  }
  Tensor out = Tensor::zeros(out_shape);
  auto o = out.data_mut();
  auto xv = x.data();
  for (std::size_t e = 0; e < n; ++e) o[e] = xv[src[e]];
  if (Tape* tape = recording({&x})) {
    mark_output(out);
    tape->record([xn = x.ptr(), on = out.ptr(), src = std::move(src)] {
      if (on->grad.empty()) return;
      Real* gx = xn->grad_data();
      for (std::size_t e = 0; e < src.size(); ++e) gx[src[e]] += on->grad[e];
    });
  }
  return out;
}

Tensor slice(const Tensor& x, int axis, int start, int length) {
  axis = normalize_axis(axis, x.rank());
  if (start < 0 || length <= 0 || start + length > x.shape()[axis])
    throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) + ") outside " + x.shape_string());
  std::size_t outer = 0, inner = 0;
  int len = 0;
  split_axis(x.shape(), axis, outer, len, inner);
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  Tensor out = Tensor::zeros(out_shape);
  auto o = out.data_mut();
  auto xv = x.data();
  const std::size_t block = static_cast<std::size_t>(length) * inner;
  for (std::size_t a = 0; a < outer; ++a)
    std::copy_n(xv.begin() + (a * len + start) * inner, block, o.begin() + a * block);
  if (Tape* tape = recording({&x})) {
    mark_output(out);
    tape->record([xn = x.ptr(), on = out.ptr(), outer, len, inner, start, block] {
      if (on->grad.empty()) return;
      Real* gx = xn->grad_data();
      for (std::size_t a = 0; a < outer; ++a)
        for (std::size_t e = 0; e < block; ++e) gx[(a * len + start) * inner + e] += on->grad[a * block + e];
    });
  }
  return out;
}

Tensor repeat_rows(const Tensor& x, int times) {
  if (times <= 0) throw ShapeError("repeat_rows: times must be positive");
  Shape out_shape = x.shape();
  out_shape[0] *= times;
  Tensor out = Tensor::zeros(out_shape);
  auto o = out.data_mut();
  auto xv = x.data();
  const std::size_t n = x.numel();
  for (int t = 0; t < times; ++t) std::copy(xv.begin(), xv.end(), o.begin() + t * n);
  if (Tape* tape = recording({&x})) {
    mark_output(out);
    tape->record([xn = x.ptr(), on = out.ptr(), times, n] {
      if (on->grad.empty()) return;
      Real* gx = xn->grad_data();
      for (int t = 0; t < times; ++t)
        for (std::size_t e = 0; e < n; ++e) gx[e] += on->grad[t * n + e];
    });
  }
  return out;
}

Tensor sum(const Tensor& x) {
  Real s = 0;
  for (Real v : x.data()) s += v;
  Tensor out = Tensor::scalar(s);
  if (Tape* tape = recording({&x})) {
    mark_output(out);
    tape->record([xn = x.ptr(), on = out.ptr()] {
      if (on->grad.empty()) return;
      Real* gx = xn->grad_data();
      for (std::size_t i = 0; i < xn->value.size(); ++i) gx[i] += on->grad[0];
    });
  }
  return out;
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<Real>(x.numel())); }

Tensor mse(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mse");
  const std::size_t n = a.numel();
  Real s = 0;
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < n; ++i) s += (av[i] - bv[i]) * (av[i] - bv[i]);
  Tensor out = Tensor::scalar(s / n);
  if (Tape* tape = recording({&a, &b})) {
    mark_output(out);
    tape->record([an = a.ptr(), bn = b.ptr(), on = out.ptr(), n] {
      if (on->grad.empty()) return;
      const Real k = 2.0 * on->grad[0] / n;
      if (an->requires_grad) {
        Real* ga = an->grad_data();
        for (std::size_t i = 0; i < n; ++i) ga[i] += k * (an->value[i] - bn->value[i]);
      }
      if (bn->requires_grad) {
        Real* gb = bn->grad_data();
        for (std::size_t i = 0; i < n; ++i) gb[i] -= k * (an->value[i] - bn->value[i]);
      }
    });
  }
  return out;
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, Real smoothing,
                     Reduction reduction, int batch_size) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy: logits must be 2-D, got " + logits.shape_string());
  const int n = logits.dim(0), v = logits.dim(1);
  if (static_cast<int>(targets.size()) != n)
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(n) + " rows");
  if (smoothing < 0 || smoothing >= 1) throw ContractError("cross_entropy: smoothing must lie in [0, 1)");
  auto probs = std::make_shared<std::vector<Real>>(logits.numel());
  kn::parallel::softmax_rows(logits.data().data(), probs->data(), n, v);
  auto z = logits.data();
  int counted = 0;
  Real total = 0;
  for (int r = 0; r < n; ++r) {
    const int t = targets[r];
    if (t < 0) continue;
    if (t >= v) throw RangeError("cross_entropy: target " + std::to_string(t) + " outside vocabulary of size " + std::to_string(v));
    ++counted;
    const Real* zr = z.data() + static_cast<std::size_t>(r) * v;
    Real mx = zr[0];
    for (int j = 1; j < v; ++j) mx = std::max(mx, zr[j]);
    Real se = 0, zsum = 0;
    for (int j = 0; j < v; ++j) {
      se += std::exp(zr[j] - mx);
      zsum += zr[j];
    }
    const Real lse = mx + std::log(se);
    total += lse - (1.0 - smoothing) * zr[t] - smoothing / v * zsum;
  }
  Real norm = reduction == Reduction::kMean ? static_cast<Real>(counted) : static_cast<Real>(batch_size);
  if (norm <= 0) norm = 1;
  Tensor out = Tensor::scalar(counted > 0 ? total / norm : 0.0);
  if (Tape* tape = recording({&logits})) {
    mark_output(out);
    tape->record([ln = logits.ptr(), on = out.ptr(), probs, tv = std::vector<int>(targets.begin(), targets.end()), n, v, smoothing, norm] {
      if (on->grad.empty()) return;
      const Real k = on->grad[0] / norm;
      Real* gl = ln->grad_data();
      for (int r = 0; r < n; ++r) {
        const int t = tv[r];
        if (t < 0) continue;
        for (int j = 0; j < v; ++j) {
          const Real target = smoothing / v + (j == t ? 1.0 - smoothing : 0.0);
          gl[static_cast<std::size_t>(r) * v + j] += k * ((*probs)[static_cast<std::size_t>(r) * v + j] - target);
        }
      }
    });
  }
  return out;
}

Tensor soft_cross_entropy(const Tensor& logits, std::span<const Real> target_probs,
                          Real temperature, Reduction reduction, int batch_size) {
  if (logits.rank() != 2) throw ShapeError("soft_cross_entropy: logits must be 2-D");
  if (target_probs.size() != logits.numel())
    throw ShapeError("soft_cross_entropy: target distribution size does not match " + logits.shape_string());
  if (temperature <= 0) throw ContractError("soft_cross_entropy: temperature must be positive");
  const int n = logits.dim(0), v = logits.dim(1);
  auto scaled = std::vector<Real>(logits.data().begin(), logits.data().end());
  for (Real& s : scaled) s /= temperature;
  auto probs = std::make_shared<std::vector<Real>>(logits.numel());
  kn::parallel::softmax_rows(scaled.data(), probs->data(), n, v);
  Real total = 0;
  for (int r = 0; r < n; ++r) {
    const Real* zr = scaled.data() + static_cast<std::size_t>(r) * v;
    Real mx = zr[0];
    for (int j = 1; j < v; ++j) mx = std::max(mx, zr[j]);
    Real se = 0;
    for (int j = 0; j < v; ++j) se += std::exp(zr[j] - mx);
    const Real lse = mx + std::log(se);
    for (int j = 0; j < v; ++j) {
      const Real q = target_probs[static_cast<std::size_t>(r) * v + j];
      if (q != 0) total -= q * (zr[j] - lse);
    }
  }
  const Real norm = reduction == Reduction::kMean ? static_cast<Real>(n) : static_cast<Real>(batch_size);
  Tensor out = Tensor::scalar(total / norm);
  if (Tape* tape = recording({&logits})) {
    mark_output(out);
    tape->record([ln = logits.ptr(), on = out.ptr(), probs, q = std::vector<Real>(target_probs.begin(), target_probs.end()), n, v, temperature, norm] {
      if (on->grad.empty()) return;
      const Real k = on->grad[0] / (norm * temperature);
      Real* gl = ln->grad_data();
      for (int r = 0; r < n; ++r) {
        Real qsum = 0;
        for (int j = 0; j < v; ++j) qsum += q[static_cast<std::size_t>(r) * v + j];
        for (int j = 0; j < v; ++j) {
          const std::size_t e = static_cast<std::size_t>(r) * v + j;
          gl[e] += k * ((*probs)[e] * qsum - q[e]);
        }
      }
    });
  }
  return out;
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor* bias, int stride, int pad) {
  if (x.rank() != 4 || weight.rank() != 4 || x.dim(1) != weight.dim(1))
    throw ShapeError("conv2d: input " + x.shape_string() + " incompatible with weight " + weight.shape_string());
  if (stride <= 0 || pad < 0) throw ConfigError("conv2d: stride must be positive and padding non-negative");
  const int b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int o = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  const int oh = kn::conv_out_size(h, kh, stride, pad);
  const int ow = kn::conv_out_size(w, kw, stride, pad);
  if (oh <= 0 || ow <= 0) throw ShapeError("conv2d: kernel larger than padded input");
  if (bias && bias->numel() != static_cast<std::size_t>(o)) throw ShapeError("conv2d: bias size mismatch");
  const int ckk = c * kh * kw;
  const int plane = oh * ow;
  Tensor out = Tensor::zeros({b, o, oh, ow});
  std::vector<Real> cols(static_cast<std::size_t>(ckk) * plane);
  Real* op = out.data_mut().data();
  for (int n = 0; n < b; ++n) {
    kn::parallel::im2col(x.data().data() + static_cast<std::size_t>(n) * c * h * w, c, h, w, kh, kw, stride, pad, cols.data());
    Real* on = op + static_cast<std::size_t>(n) * o * plane;
    if (bias)
      for (int f = 0; f < o; ++f) std::fill_n(on + static_cast<std::size_t>(f) * plane, plane, bias->data()[f]);
    kn::parallel::gemm(kn::Trans::kNo, kn::Trans::kNo, {weight.data().data(), o, ckk, ckk},
                       {cols.data(), ckk, plane, plane}, {on, o, plane, plane}, bias != nullptr);
  }
  if (Tape* tape = recording({&x, &weight, bias})) {
    mark_output(out);
    NodePtr bn = bias ? bias->ptr() : nullptr;
    tape->record([xn = x.ptr(), wn = weight.ptr(), bn, on = out.ptr(), b, c, h, w, o, kh, kw, stride, pad, ckk, plane] {
      if (on->grad.empty()) return;
      std::vector<Real> cols(static_cast<std::size_t>(ckk) * plane);
      for (int n = 0; n < b; ++n) {
        kn::MatView g{on->grad.data() + static_cast<std::size_t>(n) * o * plane, o, plane, plane};
        if (wn->requires_grad) {
          kn::parallel::im2col(xn->value.data() + static_cast<std::size_t>(n) * c * h * w, c, h, w, kh, kw, stride, pad, cols.data());
          kn::parallel::gemm(kn::Trans::kNo, kn::Trans::kYes, g, {cols.data(), ckk, plane, plane},
                             {wn->grad_data(), o, ckk, ckk}, true);
        }
        if (xn->requires_grad) {
          kn::parallel::gemm(kn::Trans::kYes, kn::Trans::kNo, {wn->value.data(), o, ckk, ckk}, g,
                             {cols.data(), ckk, plane, plane}, false);
          kn::parallel::col2im(cols.data(), c, h, w, kh, kw, stride, pad, xn->grad_data() + static_cast<std::size_t>(n) * c * h * w);
        }
        if (bn && bn->requires_grad) {
          Real* gb = bn->grad_data();
          for (int f = 0; f < o; ++f)
            for (int p = 0; p < plane; ++p) gb[f] += g.at(f, p);
        }
      }
    });
  }
  return out;
}

Tensor dropout(const Tensor& x, Real rate, std::uint64_t seed, bool training) {
  if (rate < 0 || rate >= 1) throw ConfigError("dropout: rate must lie in [0, 1)");
  if (!training || rate == 0) return x;
  auto mask = std::make_shared<std::vector<Real>>(x.numel());
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<Real> unif(0.0, 1.0);
  const Real keep_scale = 1.0 / (1.0 - rate);
  for (Real& m : *mask) m = unif(rng) >= rate ? keep_scale : 0.0;
  Tensor out = Tensor::zeros(x.shape());
  auto o = out.data_mut();
  auto xv = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = xv[i] * (*mask)[i];
  if (Tape* tape = recording({&x})) {
    mark_output(out);
    tape->record([xn = x.ptr(), on = out.ptr(), mask] {
      if (on->grad.empty()) return;
      Real* gx = xn->grad_data();
      for (std::size_t i = 0; i < on->grad.size(); ++i) gx[i] += on->grad[i] * (*mask)[i];
    });
  }
  return out;
}

namespace {

void check_attention(const Tensor& q, const Tensor& k, const Tensor* v, const kn::AttentionShape& s,
                     const Tensor* bias, const std::vector<int>* key_len) {
  if (s.heads <= 0 || s.dim % s.heads != 0)
    throw ConfigError("attention: model dim " + std::to_string(s.dim) + " not divisible by " + std::to_string(s.heads) + " heads");
  const Shape qs{s.batch * s.sq, s.dim};
  const Shape ks{s.batch * s.sk, s.dim};
  if (q.shape() != qs) throw ShapeError("attention: query " + q.shape_string() + " expected " + shape_str(qs));
  if (k.shape() != ks) throw ShapeError("attention: key " + k.shape_string() + " expected " + shape_str(ks));
  if (v && v->shape() != ks) throw ShapeError("attention: value " + v->shape_string() + " expected " + shape_str(ks));
  if (bias && bias->numel() != static_cast<std::size_t>(s.heads) * s.sq * s.sk)
    throw ShapeError("attention: bias " + bias->shape_string() + " expected [heads, sq, sk]");
  if (key_len && static_cast<int>(key_len->size()) != s.batch) throw ShapeError("attention: key_len size mismatch");
}

}  // namespace

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const kn::AttentionShape& s,
                 const Tensor* bias, const std::vector<int>* key_len) {
  check_attention(q, k, &v, s, bias, key_len);
  auto probs = std::make_shared<std::vector<Real>>(static_cast<std::size_t>(s.batch) * s.heads * s.sq * s.sk);
  Tensor out = Tensor::zeros({s.batch * s.sq, s.dim});
  auto lens = key_len ? std::make_shared<std::vector<int>>(*key_len) : nullptr;
  kn::parallel::attention_forward(s, q.data().data(), k.data().data(), v.data().data(),
                                  bias ? bias->data().data() : nullptr, lens ? lens->data() : nullptr,
                                  probs->data(), out.data_mut().data());
  if (Tape* tape = recording({&q, &k, &v, bias})) {
    mark_output(out);
    NodePtr bn = bias ? bias->ptr() : nullptr;
    tape->record([qn = q.ptr(), kn_ = k.ptr(), vn = v.ptr(), bn, on = out.ptr(), probs, s] {
      if (on->grad.empty()) return;
      // Inputs without gradients get private scratch buffers so they never alias.
      std::vector<Real> sq_, sk_, sv_;
      Real* dq = qn->requires_grad ? qn->grad_data() : (sq_.assign(qn->value.size(), 0.0), sq_.data());
      Real* dk = kn_->requires_grad ? kn_->grad_data() : (sk_.assign(kn_->value.size(), 0.0), sk_.data());
      Real* dv = vn->requires_grad ? vn->grad_data() : (sv_.assign(vn->value.size(), 0.0), sv_.data());
      Real* db = (bn && bn->requires_grad) ? bn->grad_data() : nullptr;
      kn::parallel::attention_backward(s, qn->value.data(), kn_->value.data(), vn->value.data(),
                                       probs->data(), on->grad.data(), dq, dk, dv, db);
    });
  }
  return out;
}

std::vector<Real> attention_probs(const Tensor& q, const Tensor& k, const kn::AttentionShape& s,
                                  const Tensor* bias, const std::vector<int>* key_len) {
  check_attention(q, k, nullptr, s, bias, key_len);
  std::vector<Real> probs(static_cast<std::size_t>(s.batch) * s.heads * s.sq * s.sk);
  std::vector<Real> out(static_cast<std::size_t>(s.batch) * s.sq * s.dim);
  // Values are irrelevant to the probabilities; reuse k as v.
  kn::parallel::attention_forward(s, q.data().data(), k.data().data(), k.data().data(),
                                  bias ? bias->data().data() : nullptr,
                                  key_len ? key_len->data() : nullptr, probs.data(), out.data());
  return probs;
}

}  // namespace iimt::ad
