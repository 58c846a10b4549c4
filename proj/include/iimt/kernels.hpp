#pragma once

// Dense numeric kernels. Every kernel exists twice: a plain serial reference
// (kept for testing and benchmarking) and an OpenMP implementation used by the
// autodiff ops. Parallel kernels partition outputs so each element is written
// by exactly one thread in a fixed order; results do not depend on the thread
// count.

#include <cstddef>
#include <span>

namespace iimt::kernels {

using Real = double;

// Row-major strided matrix views.
struct MatView {
  const Real* data;
  int rows;
  int cols;
  int ld;
  Real at(int r, int c) const { return data[static_cast<std::size_t>(r) * ld + c]; }
};

struct MutMatView {
  Real* data;
  int rows;
  int cols;
  int ld;
  Real& at(int r, int c) const { return data[static_cast<std::size_t>(r) * ld + c]; }
};

enum class Trans { kNo, kYes };

// Attention problem layout: q is [batch*sq, dim], k/v are [batch*sk, dim],
// heads split dim evenly. bias (optional) is [heads, sq, sk] and shared
// across the batch. key_len (optional) masks keys at positions >= key_len[b].
struct AttentionShape {
  int batch = 1;
  int sq = 1;
  int sk = 1;
  int dim = 1;
  int heads = 1;
  bool causal = false;
};

namespace serial {

// C (+)= op(A) * op(B)
void gemm(Trans ta, Trans tb, MatView a, MatView b, MutMatView c, bool accumulate);
void softmax_rows(const Real* x, Real* y, int rows, int cols);
// probs: [batch, heads, sq, sk]; out: [batch*sq, dim]
void attention_forward(const AttentionShape& s, const Real* q, const Real* k, const Real* v,
                       const Real* bias, const int* key_len, Real* probs, Real* out);
void attention_backward(const AttentionShape& s, const Real* q, const Real* k, const Real* v,
                        const Real* probs, const Real* dout, Real* dq, Real* dk, Real* dv,
                        Real* dbias);
// x: [channels, h, w] -> cols: [channels*kh*kw, oh*ow]
void im2col(const Real* x, int channels, int h, int w, int kh, int kw, int stride, int pad,
            Real* cols);
void col2im(const Real* cols, int channels, int h, int w, int kh, int kw, int stride, int pad,
            Real* x);

}  // namespace serial

namespace parallel {

void gemm(Trans ta, Trans tb, MatView a, MatView b, MutMatView c, bool accumulate);
void softmax_rows(const Real* x, Real* y, int rows, int cols);
void attention_forward(const AttentionShape& s, const Real* q, const Real* k, const Real* v,
                       const Real* bias, const int* key_len, Real* probs, Real* out);
void attention_backward(const AttentionShape& s, const Real* q, const Real* k, const Real* v,
                        const Real* probs, const Real* dout, Real* dq, Real* dk, Real* dv,
                        Real* dbias);
void im2col(const Real* x, int channels, int h, int w, int kh, int kw, int stride, int pad,
            Real* cols);
void col2im(const Real* cols, int channels, int h, int w, int kh, int kw, int stride, int pad,
            Real* x);

}  // namespace parallel

inline int conv_out_size(int in, int k, int stride, int pad) { return (in + 2 * pad - k) / stride + 1; }

// Number of worker threads the parallel kernels will use.
int max_threads();

}  // namespace iimt::kernels
