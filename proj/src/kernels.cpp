#include "iimt/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace iimt::kernels {

int max_threads() { return omp_get_max_threads(); }

namespace {

constexpr Real kNegInf = -std::numeric_limits<Real>::infinity();

std::size_t idx(int r, int c, int ld) { return static_cast<std::size_t>(r) * ld + c; }

// Copies op(src) into a dense row-major buffer of shape [rows, cols].
void pack(Trans t, MatView src, std::vector<Real>& buf, int& rows, int& cols) {
  if (t == Trans::kNo) {
    rows = src.rows;
    cols = src.cols;
    buf.resize(static_cast<std::size_t>(rows) * cols);
    for (int r = 0; r < rows; ++r) std::copy_n(src.data + idx(r, 0, src.ld), cols, buf.data() + idx(r, 0, cols));
  } else {
    rows = src.cols;
    cols = src.rows;
    buf.resize(static_cast<std::size_t>(rows) * cols);
    for (int r = 0; r < src.rows; ++r)
      for (int c = 0; c < src.cols; ++c) buf[idx(c, r, cols)] = src.data[idx(r, c, src.ld)];
  }
}

// C[i0:i1, :] (+)= A[i0:i1, :] * B, all row-major with leading dimensions.
void gemm_rows(const Real* a, int lda, const Real* b, int ldb, Real* c, int ldc, int i0, int i1,
               int n, int k, bool accumulate) {
  constexpr int MR = 4;
  constexpr int NR = 16;
  int i = i0;
  for (; i + MR <= i1; i += MR) {
    int j = 0;
    for (; j + NR <= n; j += NR) {
      Real acc[MR][NR] = {};
      for (int p = 0; p < k; ++p) {
        const Real* bp = b + idx(p, j, ldb);
        for (int r = 0; r < MR; ++r) {
          const Real av = a[idx(i + r, p, lda)];
#pragma omp simd
          for (int q = 0; q < NR; ++q) acc[r][q] += av * bp[q];
        }
      }
      for (int r = 0; r < MR; ++r) {
        Real* cr = c + idx(i + r, j, ldc);
        for (int q = 0; q < NR; ++q) cr[q] = accumulate ? cr[q] + acc[r][q] : acc[r][q];
      }
    }
    for (; j < n; ++j) {
      for (int r = 0; r < MR; ++r) {
        Real s = 0;
        for (int p = 0; p < k; ++p) s += a[idx(i + r, p, lda)] * b[idx(p, j, ldb)];
        Real& cr = c[idx(i + r, j, ldc)];
        cr = accumulate ? cr + s : s;
      }
    }
  }
  for (; i < i1; ++i) {
    Real* ci = c + idx(i, 0, ldc);
    if (!accumulate) std::fill_n(ci, n, Real{0});
    for (int p = 0; p < k; ++p) {
      const Real av = a[idx(i, p, lda)];
      const Real* bp = b + idx(p, 0, ldb);
#pragma omp simd
      for (int q = 0; q < n; ++q) ci[q] += av * bp[q];
    }
  }
}

// Single-threaded blocked product used inside per-head loops.
void gemm_block(Trans ta, Trans tb, MatView a, MatView b, MutMatView c, bool accumulate,
                std::vector<Real>& abuf, std::vector<Real>& bbuf) {
  const Real* ap = a.data;
  int lda = a.ld;
  int m = c.rows;
  int k = 0;
  if (ta == Trans::kYes) {
    int r = 0;
    pack(ta, a, abuf, r, k);
    ap = abuf.data();
    lda = k;
  } else {
    k = a.cols;
  }
  const Real* bp = b.data;
  int ldb = b.ld;
  if (tb == Trans::kYes) {
    int r = 0, cc = 0;
    pack(tb, b, bbuf, r, cc);
    bp = bbuf.data();
    ldb = cc;
  }
  gemm_rows(ap, lda, bp, ldb, c.data, c.ld, 0, m, c.cols, k, accumulate);
}

void softmax_row(const Real* x, Real* y, int cols) {
  Real mx = kNegInf;
  for (int j = 0; j < cols; ++j) mx = std::max(mx, x[j]);
  if (mx == kNegInf) {
    std::fill_n(y, cols, Real{0});
    return;
  }
  Real sum = 0;
  for (int j = 0; j < cols; ++j) {
    y[j] = std::exp(x[j] - mx);
    sum += y[j];
  }
  const Real inv = 1.0 / sum;
  for (int j = 0; j < cols; ++j) y[j] *= inv;
}

bool key_visible(const AttentionShape& s, const int* key_len, int b, int i, int j) {
  if (s.causal && j > i) return false;
  if (key_len != nullptr && j >= key_len[b]) return false;
  return true;
}

void attention_head_forward(const AttentionShape& s, const Real* q, const Real* k, const Real* v,
                            const Real* bias, const int* key_len, Real* probs, Real* out, int b,
                            int h, std::vector<Real>& abuf, std::vector<Real>& bbuf) {
  const int dh = s.dim / s.heads;
  const Real scale = 1.0 / std::sqrt(static_cast<Real>(dh));
  MatView qv{q + idx(b * s.sq, h * dh, s.dim), s.sq, dh, s.dim};
  MatView kv{k + idx(b * s.sk, h * dh, s.dim), s.sk, dh, s.dim};
  MatView vv{v + idx(b * s.sk, h * dh, s.dim), s.sk, dh, s.dim};
  Real* p = probs + (static_cast<std::size_t>(b) * s.heads + h) * s.sq * s.sk;
  gemm_block(Trans::kNo, Trans::kYes, qv, kv, MutMatView{p, s.sq, s.sk, s.sk}, false, abuf, bbuf);
  const Real* bh = bias ? bias + static_cast<std::size_t>(h) * s.sq * s.sk : nullptr;
  for (int i = 0; i < s.sq; ++i) {
    Real* row = p + idx(i, 0, s.sk);
    for (int j = 0; j < s.sk; ++j) {
      if (!key_visible(s, key_len, b, i, j)) {
        row[j] = kNegInf;
        continue;
      }
      row[j] = row[j] * scale + (bh ? bh[idx(i, j, s.sk)] : 0.0);
    }
    softmax_row(row, row, s.sk);
  }
  gemm_block(Trans::kNo, Trans::kNo, MatView{p, s.sq, s.sk, s.sk}, vv,
             MutMatView{out + idx(b * s.sq, h * dh, s.dim), s.sq, dh, s.dim}, false, abuf, bbuf);
}

// Writes dscores (softmax input gradient, unscaled by 1/sqrt(dh)) into ds.
void attention_head_backward(const AttentionShape& s, const Real* q, const Real* k, const Real* v,
                             const Real* probs, const Real* dout, Real* dq, Real* dk, Real* dv,
                             Real* ds, int b, int h, std::vector<Real>& abuf,
                             std::vector<Real>& bbuf) {
  const int dh = s.dim / s.heads;
  const Real scale = 1.0 / std::sqrt(static_cast<Real>(dh));
  const std::size_t qoff = idx(b * s.sq, h * dh, s.dim);
  const std::size_t koff = idx(b * s.sk, h * dh, s.dim);
  const Real* p = probs + (static_cast<std::size_t>(b) * s.heads + h) * s.sq * s.sk;
  MatView pv{p, s.sq, s.sk, s.sk};
  MatView dov{dout + qoff, s.sq, dh, s.dim};
  // dP = dO * V^T
  gemm_block(Trans::kNo, Trans::kYes, dov, MatView{v + koff, s.sk, dh, s.dim},
             MutMatView{ds, s.sq, s.sk, s.sk}, false, abuf, bbuf);
  // dV += P^T * dO
  gemm_block(Trans::kYes, Trans::kNo, pv, dov, MutMatView{dv + koff, s.sk, dh, s.dim}, true, abuf,
             bbuf);
  for (int i = 0; i < s.sq; ++i) {
    Real* dr = ds + idx(i, 0, s.sk);
    const Real* pr = p + idx(i, 0, s.sk);
    Real dot = 0;
    for (int j = 0; j < s.sk; ++j) dot += dr[j] * pr[j];
    for (int j = 0; j < s.sk; ++j) dr[j] = pr[j] * (dr[j] - dot);
  }
  // dQ += scale * dS * K ; dK += scale * dS^T * Q
  std::vector<Real> tmp(static_cast<std::size_t>(std::max(s.sq, s.sk)) * dh);
  gemm_block(Trans::kNo, Trans::kNo, MatView{ds, s.sq, s.sk, s.sk},
             MatView{k + koff, s.sk, dh, s.dim}, MutMatView{tmp.data(), s.sq, dh, dh}, false, abuf,
             bbuf);
  for (int i = 0; i < s.sq; ++i)
    for (int d = 0; d < dh; ++d) dq[qoff + idx(i, d, s.dim)] += scale * tmp[idx(i, d, dh)];
  gemm_block(Trans::kYes, Trans::kNo, MatView{ds, s.sq, s.sk, s.sk},
             MatView{q + qoff, s.sq, dh, s.dim}, MutMatView{tmp.data(), s.sk, dh, dh}, false, abuf,
             bbuf);
  for (int j = 0; j < s.sk; ++j)
    for (int d = 0; d < dh; ++d) dk[koff + idx(j, d, s.dim)] += scale * tmp[idx(j, d, dh)];
}

}  // namespace

// ---------------------------------------------------------------------------
// Serial reference kernels: direct loops, no blocking.

namespace serial {

void gemm(Trans ta, Trans tb, MatView a, MatView b, MutMatView c, bool accumulate) {
  const int k = ta == Trans::kNo ? a.cols : a.rows;
  for (int i = 0; i < c.rows; ++i) {
    for (int j = 0; j < c.cols; ++j) {
      Real s = 0;
      for (int p = 0; p < k; ++p) {
        const Real av = ta == Trans::kNo ? a.at(i, p) : a.at(p, i);
        const Real bv = tb == Trans::kNo ? b.at(p, j) : b.at(j, p);
        s += av * bv;
      }
      c.at(i, j) = accumulate ? c.at(i, j) + s : s;
    }
  }
}

void softmax_rows(const Real* x, Real* y, int rows, int cols) {
  for (int r = 0; r < rows; ++r) softmax_row(x + idx(r, 0, cols), y + idx(r, 0, cols), cols);
}

void attention_forward(const AttentionShape& s, const Real* q, const Real* k, const Real* v,
                       const Real* bias, const int* key_len, Real* probs, Real* out) {
  const int dh = s.dim / s.heads;
  const Real scale = 1.0 / std::sqrt(static_cast<Real>(dh));
  for (int b = 0; b < s.batch; ++b) {
    for (int h = 0; h < s.heads; ++h) {
      Real* p = probs + (static_cast<std::size_t>(b) * s.heads + h) * s.sq * s.sk;
      for (int i = 0; i < s.sq; ++i) {
        Real* row = p + idx(i, 0, s.sk);
        for (int j = 0; j < s.sk; ++j) {
          if (!key_visible(s, key_len, b, i, j)) {
            row[j] = kNegInf;
            continue;
          }
          Real dot = 0;
          for (int d = 0; d < dh; ++d)
            dot += q[idx(b * s.sq + i, h * dh + d, s.dim)] * k[idx(b * s.sk + j, h * dh + d, s.dim)];
          row[j] = dot * scale + (bias ? bias[(static_cast<std::size_t>(h) * s.sq + i) * s.sk + j] : 0.0);
        }
        softmax_row(row, row, s.sk);
        for (int d = 0; d < dh; ++d) {
          Real acc = 0;
          for (int j = 0; j < s.sk; ++j) acc += row[j] * v[idx(b * s.sk + j, h * dh + d, s.dim)];
          out[idx(b * s.sq + i, h * dh + d, s.dim)] = acc;
        }
      }
    }
  }
}

void attention_backward(const AttentionShape& s, const Real* q, const Real* k, const Real* v,
                        const Real* probs, const Real* dout, Real* dq, Real* dk, Real* dv,
                        Real* dbias) {
  const int dh = s.dim / s.heads;
  const Real scale = 1.0 / std::sqrt(static_cast<Real>(dh));
  std::vector<Real> dp(s.sk);
  for (int b = 0; b < s.batch; ++b) {
    for (int h = 0; h < s.heads; ++h) {
      const Real* p = probs + (static_cast<std::size_t>(b) * s.heads + h) * s.sq * s.sk;
      for (int i = 0; i < s.sq; ++i) {
        const Real* pr = p + idx(i, 0, s.sk);
        const std::size_t qi = idx(b * s.sq + i, h * dh, s.dim);
        Real dot = 0;
        for (int j = 0; j < s.sk; ++j) {
          const std::size_t kj = idx(b * s.sk + j, h * dh, s.dim);
          Real acc = 0;
          for (int d = 0; d < dh; ++d) {
            acc += dout[qi + d] * v[kj + d];
            dv[kj + d] += pr[j] * dout[qi + d];
          }
          dp[j] = acc;
          dot += acc * pr[j];
        }
        for (int j = 0; j < s.sk; ++j) {
          const Real dsij = pr[j] * (dp[j] - dot);
          if (dbias) dbias[(static_cast<std::size_t>(h) * s.sq + i) * s.sk + j] += dsij;
          const std::size_t kj = idx(b * s.sk + j, h * dh, s.dim);
          for (int d = 0; d < dh; ++d) {
            dq[qi + d] += scale * dsij * k[kj + d];
            dk[kj + d] += scale * dsij * q[qi + d];
          }
        }
      }
    }
  }
}

void im2col(const Real* x, int channels, int h, int w, int kh, int kw, int stride, int pad,
            Real* cols) {
  const int oh = conv_out_size(h, kh, stride, pad);
  const int ow = conv_out_size(w, kw, stride, pad);
  for (int c = 0; c < channels; ++c)
    for (int i = 0; i < kh; ++i)
      for (int j = 0; j < kw; ++j) {
        Real* row = cols + static_cast<std::size_t>((c * kh + i) * kw + j) * oh * ow;
        for (int oy = 0; oy < oh; ++oy)
          for (int ox = 0; ox < ow; ++ox) {
            const int y = oy * stride - pad + i;
            const int xx = ox * stride - pad + j;
            row[oy * ow + ox] = (y >= 0 && y < h && xx >= 0 && xx < w) ? x[(static_cast<std::size_t>(c) * h + y) * w + xx] : 0.0;
          }
      }
}

void col2im(const Real* cols, int channels, int h, int w, int kh, int kw, int stride, int pad,
            Real* x) {
  const int oh = conv_out_size(h, kh, stride, pad);
  const int ow = conv_out_size(w, kw, stride, pad);
  for (int c = 0; c < channels; ++c)
    for (int i = 0; i < kh; ++i)
      for (int j = 0; j < kw; ++j) {
        const Real* row = cols + static_cast<std::size_t>((c * kh + i) * kw + j) * oh * ow;
        for (int oy = 0; oy < oh; ++oy)
          for (int ox = 0; ox < ow; ++ox) {
            const int y = oy * stride - pad + i;
            const int xx = ox * stride - pad + j;
            if (y >= 0 && y < h && xx >= 0 && xx < w)
              x[(static_cast<std::size_t>(c) * h + y) * w + xx] += row[oy * ow + ox];
          }
      }
}

}  // namespace serial

// ---------------------------------------------------------------------------
// OpenMP kernels.

namespace parallel {

void gemm(Trans ta, Trans tb, MatView a, MatView b, MutMatView c, bool accumulate) {
  std::vector<Real> abuf, bbuf;
  const Real* ap = a.data;
  int lda = a.ld;
  int k = ta == Trans::kNo ? a.cols : a.rows;
  if (ta == Trans::kYes) {
    int r = 0;
    pack(ta, a, abuf, r, k);
    ap = abuf.data();
    lda = k;
  }
  const Real* bp = b.data;
  int ldb = b.ld;
  if (tb == Trans::kYes) {
    int r = 0, cc = 0;
    pack(tb, b, bbuf, r, cc);
    bp = bbuf.data();
    ldb = cc;
  }
  constexpr int kRowBlock = 32;
  const int m = c.rows;
  const int nblocks = (m + kRowBlock - 1) / kRowBlock;
  const long work = static_cast<long>(m) * c.cols * std::max(k, 1);
#pragma omp parallel for schedule(static) if (work > 262144)
  for (int blk = 0; blk < nblocks; ++blk) {
    const int i0 = blk * kRowBlock;
    const int i1 = std::min(m, i0 + kRowBlock);
    gemm_rows(ap, lda, bp, ldb, c.data, c.ld, i0, i1, c.cols, k, accumulate);
  }
}

void softmax_rows(const Real* x, Real* y, int rows, int cols) {
#pragma omp parallel for schedule(static) if (static_cast<long>(rows) * cols > 65536)
  for (int r = 0; r < rows; ++r) softmax_row(x + idx(r, 0, cols), y + idx(r, 0, cols), cols);
}

void attention_forward(const AttentionShape& s, const Real* q, const Real* k, const Real* v,
                       const Real* bias, const int* key_len, Real* probs, Real* out) {
  const int jobs = s.batch * s.heads;
#pragma omp parallel
  {
    std::vector<Real> abuf, bbuf;
#pragma omp for schedule(static)
    for (int job = 0; job < jobs; ++job)
      attention_head_forward(s, q, k, v, bias, key_len, probs, out, job / s.heads, job % s.heads,
                             abuf, bbuf);
  }
}

void attention_backward(const AttentionShape& s, const Real* q, const Real* k, const Real* v,
                        const Real* probs, const Real* dout, Real* dq, Real* dk, Real* dv,
                        Real* dbias) {
  const int jobs = s.batch * s.heads;
  const std::size_t plane = static_cast<std::size_t>(s.sq) * s.sk;
  std::vector<Real> dscores(static_cast<std::size_t>(jobs) * plane);
#pragma omp parallel
  {
    std::vector<Real> abuf, bbuf;
#pragma omp for schedule(static)
    for (int job = 0; job < jobs; ++job)
      attention_head_backward(s, q, k, v, probs, dout, dq, dk, dv, dscores.data() + job * plane,
                              job / s.heads, job % s.heads, abuf, bbuf);
  }
  if (dbias == nullptr) return;
#pragma omp parallel for schedule(static)
  for (int h = 0; h < s.heads; ++h) {
    Real* db = dbias + h * plane;
    for (int b = 0; b < s.batch; ++b) {
      const Real* src = dscores.data() + (static_cast<std::size_t>(b) * s.heads + h) * plane;
      for (std::size_t e = 0; e < plane; ++e) db[e] += src[e];
    }
  }
}

void im2col(const Real* x, int channels, int h, int w, int kh, int kw, int stride, int pad,
            Real* cols) {
  const int oh = conv_out_size(h, kh, stride, pad);
  const int ow = conv_out_size(w, kw, stride, pad);
  const int rows = channels * kh * kw;
#pragma omp parallel for schedule(static)
  for (int r = 0; r < rows; ++r) {
    const int c = r / (kh * kw);
    const int i = (r / kw) % kh;
    const int j = r % kw;
    Real* row = cols + static_cast<std::size_t>(r) * oh * ow;
    for (int oy = 0; oy < oh; ++oy) {
      const int y = oy * stride - pad + i;
      for (int ox = 0; ox < ow; ++ox) {
        const int xx = ox * stride - pad + j;
        row[oy * ow + ox] = (y >= 0 && y < h && xx >= 0 && xx < w) ? x[(static_cast<std::size_t>(c) * h + y) * w + xx] : 0.0;
      }
    }
  }
}

void col2im(const Real* cols, int channels, int h, int w, int kh, int kw, int stride, int pad,
            Real* x) {
  const int oh = conv_out_size(h, kh, stride, pad);
  const int ow = conv_out_size(w, kw, stride, pad);
#pragma omp parallel for schedule(static)
  for (int c = 0; c < channels; ++c)
    for (int i = 0; i < kh; ++i)
      for (int j = 0; j < kw; ++j) {
        const Real* row = cols + static_cast<std::size_t>((c * kh + i) * kw + j) * oh * ow;
        for (int oy = 0; oy < oh; ++oy) {
          const int y = oy * stride - pad + i;
          if (y < 0 || y >= h) continue;
          for (int ox = 0; ox < ow; ++ox) {
            const int xx = ox * stride - pad + j;
            if (xx >= 0 && xx < w) x[(static_cast<std::size_t>(c) * h + y) * w + xx] += row[oy * ow + ox];
          }
        }
      }
}

}  // namespace parallel

}  // namespace iimt::kernels
