#pragma once

// Differentiable primitives. Each op validates shapes, computes its forward
// value, and records a backward closure when taping.

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "iimt/kernels.hpp"
#include "iimt/tensor.hpp"

namespace iimt::ad {

// Elementwise, identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, Real s);

// x[..., n] + b[n]
Tensor add_bias(const Tensor& x, const Tensor& bias);
// x[batch*seq, d] + table[s, d] for s < seq; table may be longer than seq.
Tensor add_positional(const Tensor& x, const Tensor& table, int seq);

Tensor matmul(const Tensor& a, const Tensor& b);
// x[..., k] * w[k, n] (+ bias[n]); leading dimensions are flattened.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor* bias = nullptr);

Tensor sigmoid(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor relu(const Tensor& x);

Tensor softmax(const Tensor& x, int axis = -1);
// Normalizes over the last dimension.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, Real eps = 1e-5);

// Rows of table[v, d] selected by ids -> [ids.size(), d]. Throws RangeError on bad ids.
Tensor embedding(const Tensor& table, std::span<const int> ids);
// table[r, c] -> [r, idx.size()] with out[i, j] = table[i, idx[j]].
Tensor gather_cols(const Tensor& table, std::span<const int> idx);

Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose(const Tensor& x);  // 2-D
Tensor permute(const Tensor& x, const std::vector<int>& perm);
Tensor slice(const Tensor& x, int axis, int start, int length);
// Repeats x along a new leading block: [n * x.dim(0), ...].
Tensor repeat_rows(const Tensor& x, int times);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// mean((a - b)^2) over all elements.
Tensor mse(const Tensor& a, const Tensor& b);

enum class Reduction { kMean, kSum };

// Softmax cross-entropy over rows of logits[n, v]. Targets < 0 are ignored.
// With smoothing e the target distribution is (1-e)*onehot + e/v.
// kMean divides by the number of counted rows; kSum divides by batch_size.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, Real smoothing = 0.0,
                     Reduction reduction = Reduction::kMean, int batch_size = 1);
// -sum_k q_k log softmax(logits / temperature)_k per row. target_probs is [n*v].
Tensor soft_cross_entropy(const Tensor& logits, std::span<const Real> target_probs,
                          Real temperature = 1.0, Reduction reduction = Reduction::kMean,
                          int batch_size = 1);

// x[b, c, h, w], w[o, c, kh, kw], bias[o]
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor* bias, int stride, int pad);

// Inverted dropout; identity when !training or rate == 0. The mask is a pure
// function of seed.
Tensor dropout(const Tensor& x, Real rate, std::uint64_t seed, bool training);

// Multi-head scaled dot-product attention over pre-projected q, k, v.
// q: [batch*sq, dim], k/v: [batch*sk, dim], bias: [heads, sq, sk].
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 const kernels::AttentionShape& shape, const Tensor* bias = nullptr,
                 const std::vector<int>* key_len = nullptr);

// Attention probabilities of the most recent forward are not exposed through
// the tape; this helper recomputes them for inspection ([batch, heads, sq, sk]).
std::vector<Real> attention_probs(const Tensor& q, const Tensor& k,
                                  const kernels::AttentionShape& shape, const Tensor* bias = nullptr,
                                  const std::vector<int>* key_len = nullptr);

}  // namespace iimt::ad
