// Serial reference vs OpenMP kernels: wall time and max abs difference.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <vector>

#include "iimt/kernels.hpp"

namespace k = iimt::kernels;
using k::Real;

namespace {

std::vector<Real> random_vec(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<Real> d(0.0, 1.0);
  std::vector<Real> v(n);
  for (Real& x : v) x = d(rng);
  return v;
}

double time_ms(const std::function<void()>& f, int reps) {
  f();
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < reps; ++i) f();
  const auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

double max_diff(const std::vector<Real>& a, const std::vector<Real>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

void report(const char* name, double ts, double tp, double diff) {
  std::printf("%-28s serial %9.3f ms  parallel %9.3f ms  speedup %5.2fx  max|diff| %.2e\n", name, ts, tp, ts / tp,
              diff);
}

}  // namespace

int main() {
  std::mt19937_64 rng(42);
  std::printf("threads: %d\n", k::max_threads());

  for (int n : {64, 128, 256}) {
    const auto a = random_vec(static_cast<std::size_t>(n) * n, rng), b = random_vec(static_cast<std::size_t>(n) * n, rng);
    std::vector<Real> cs(static_cast<std::size_t>(n) * n), cp(cs.size());
    const k::MatView av{a.data(), n, n, n}, bv{b.data(), n, n, n};
    const int reps = n <= 128 ? 20 : 4;
    const double ts = time_ms([&] { k::serial::gemm(k::Trans::kNo, k::Trans::kYes, av, bv, {cs.data(), n, n, n}, false); }, reps);
    const double tp = time_ms([&] { k::parallel::gemm(k::Trans::kNo, k::Trans::kYes, av, bv, {cp.data(), n, n, n}, false); }, reps);
    char name[64];
    std::snprintf(name, sizeof name, "gemm %dx%dx%d", n, n, n);
    report(name, ts, tp, max_diff(cs, cp));
  }

  {
    const int rows = 4096, cols = 512;
    const auto x = random_vec(static_cast<std::size_t>(rows) * cols, rng);
    std::vector<Real> ys(x.size()), yp(x.size());
    const double ts = time_ms([&] { k::serial::softmax_rows(x.data(), ys.data(), rows, cols); }, 10);
    const double tp = time_ms([&] { k::parallel::softmax_rows(x.data(), yp.data(), rows, cols); }, 10);
    report("softmax 4096x512", ts, tp, max_diff(ys, yp));
  }

  {
    k::AttentionShape s{16, 65, 65, 64, 4, false};
    const std::size_t nq = static_cast<std::size_t>(s.batch) * s.sq * s.dim;
    const auto q = random_vec(nq, rng), kk = random_vec(nq, rng), v = random_vec(nq, rng), dout = random_vec(nq, rng);
    const auto bias = random_vec(static_cast<std::size_t>(s.heads) * s.sq * s.sk, rng);
    const std::size_t np = static_cast<std::size_t>(s.batch) * s.heads * s.sq * s.sk;
    std::vector<Real> ps(np), pp(np), os(nq), op(nq);
    const double ts = time_ms([&] { k::serial::attention_forward(s, q.data(), kk.data(), v.data(), bias.data(), nullptr, ps.data(), os.data()); }, 5);
    const double tp = time_ms([&] { k::parallel::attention_forward(s, q.data(), kk.data(), v.data(), bias.data(), nullptr, pp.data(), op.data()); }, 5);
    report("attention fwd b16 s65 d64", ts, tp, max_diff(os, op));

    std::vector<Real> dqs(nq), dks(nq), dvs(nq), dqp(nq), dkp(nq), dvp(nq), dbs(bias.size()), dbp(bias.size());
    const double tbs = time_ms([&] {
      k::serial::attention_backward(s, q.data(), kk.data(), v.data(), ps.data(), dout.data(), dqs.data(), dks.data(), dvs.data(), dbs.data());
    }, 5);
    const double tbp = time_ms([&] {
      k::parallel::attention_backward(s, q.data(), kk.data(), v.data(), pp.data(), dout.data(), dqp.data(), dkp.data(), dvp.data(), dbp.data());
    }, 5);
    report("attention bwd b16 s65 d64", tbs, tbp, std::max({max_diff(dqs, dqp), max_diff(dks, dkp), max_diff(dvs, dvp)}));
  }

  {
    const int c = 16, h = 32, w = 32, kh = 3, kw = 3;
    const int oh = k::conv_out_size(h, kh, 1, 1), ow = k::conv_out_size(w, kw, 1, 1);
    const auto x = random_vec(static_cast<std::size_t>(c) * h * w, rng);
    std::vector<Real> cs(static_cast<std::size_t>(c) * kh * kw * oh * ow), cp(cs.size());
    const double ts = time_ms([&] { k::serial::im2col(x.data(), c, h, w, kh, kw, 1, 1, cs.data()); }, 20);
    const double tp = time_ms([&] { k::parallel::im2col(x.data(), c, h, w, kh, kw, 1, 1, cp.data()); }, 20);
    report("im2col 16x32x32 k3", ts, tp, max_diff(cs, cp));
  }
  return 0;
}
