// Tape semantics, forward values on hand-worked examples, error contracts.

#include <doctest.h>

#include <cmath>

#include "fixtures.hpp"
#include "iimt/errors.hpp"
#include "iimt/ops.hpp"
#include "oracles.hpp"

using namespace iimt;
using namespace iimt::ad;
using iimt::testing::random_values;

namespace {
constexpr double kExact = 1e-12;

std::vector<Real> vals(const Tensor& t) { return {t.data().begin(), t.data().end()}; }
}  // namespace

TEST_CASE("construction contracts") {
  CHECK_THROWS_AS(Tensor::from({2, 3}, {1, 2, 3}), ShapeError);
  CHECK_THROWS_AS(Tensor::zeros({2, 0}), ShapeError);
  CHECK_THROWS_AS(Tensor::zeros({2, 2}).item(), ContractError);
  CHECK(Tensor::scalar(4.5).item() == 4.5);
  const Tensor t = Tensor::zeros({2, 3});
  CHECK(t.dim(-1) == 3);
  CHECK_THROWS_AS(t.dim(2), ShapeError);
}

TEST_CASE("nothing is recorded without a tape or without grad-requiring inputs") {
  Tensor a = Tensor::full({2}, 1.0, true);
  Tensor b = add(a, a);
  CHECK(active_tape() == nullptr);
  CHECK_FALSE(b.requires_grad());

  Tape tape;
  {
    TapeScope scope(tape);
    Tensor c = Tensor::full({2}, 2.0);
    Tensor d = mul(c, c);
    CHECK(tape.size() == 0);
    CHECK_FALSE(d.requires_grad());
    Tensor e = mul(a, c);
    CHECK(tape.size() == 1);
    CHECK(e.requires_grad());
    CHECK_FALSE(e.is_leaf());
  }
}

TEST_CASE("nested tape scopes restore the outer tape") {
  Tape outer, inner;
  TapeScope s1(outer);
  CHECK(active_tape() == &outer);
  {
    TapeScope s2(inner);
    CHECK(active_tape() == &inner);
  }
  CHECK(active_tape() == &outer);
}

TEST_CASE("shared subexpressions accumulate gradients") {
  Tensor a = Tensor::from({3}, {1, 2, 3}, true), b = Tensor::from({3}, {4, -5, 6}, true);
  Tape tape;
  TapeScope scope(tape);
  const Tensor y = mul(a, b);
  const Tensor loss = sum(add(add(y, y), mul(a, a)));  // 2ab + a^2
  tape.backward(loss);
  const std::vector<Real> ga(a.grad().begin(), a.grad().end()), gb(b.grad().begin(), b.grad().end());
  for (int i = 0; i < 3; ++i) {
    CHECK(ga[i] == doctest::Approx(2 * b.data()[i] + 2 * a.data()[i]).epsilon(kExact));
    CHECK(gb[i] == doctest::Approx(2 * a.data()[i]).epsilon(kExact));
  }
}

TEST_CASE("backward contracts") {
  Tensor a = Tensor::from({2}, {1, 2}, true);
  Tape tape;
  TapeScope scope(tape);
  CHECK_THROWS_AS(tape.backward(mul(a, a)), ContractError);  // not scalar
  const Tensor loss = sum(mul(a, a));
  tape.backward(loss);
  CHECK(tape.consumed());
  CHECK_THROWS_AS(tape.backward(loss), ContractError);
  tape.reset();
  CHECK_FALSE(tape.consumed());
  CHECK(tape.size() == 0);
  CHECK_THROWS_AS(tape.backward(Tensor::scalar(1.0)), ContractError);  // not on the tape
}

TEST_CASE("detach stops the gradient") {
  Tensor a = Tensor::from({2}, {3, 4}, true);
  Tape tape;
  TapeScope scope(tape);
  const Tensor loss = sum(mul(a, a.detach()));
  tape.backward(loss);
  CHECK(a.grad()[0] == doctest::Approx(3.0));
  CHECK(a.grad()[1] == doctest::Approx(4.0));
}

TEST_CASE("hand-worked forward values") {
  const Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4}), b = Tensor::from({2, 2}, {5, 6, 7, 8});
  CHECK(vals(matmul(a, b)) == std::vector<Real>{19, 22, 43, 50});
  CHECK(vals(transpose(a)) == std::vector<Real>{1, 3, 2, 4});
  CHECK(vals(concat({a, b}, 1)) == std::vector<Real>{1, 2, 5, 6, 3, 4, 7, 8});
  CHECK(vals(slice(concat({a, b}, 0), 0, 1, 2)) == std::vector<Real>{3, 4, 5, 6});
  CHECK(vals(repeat_rows(Tensor::from({1, 2}, {1, 2}), 2)) == std::vector<Real>{1, 2, 1, 2});

  const Tensor p = permute(Tensor::from({2, 1, 3}, {0, 1, 2, 3, 4, 5}), {2, 0, 1});
  CHECK(p.shape() == Shape{3, 2, 1});
  CHECK(vals(p) == std::vector<Real>{0, 3, 1, 4, 2, 5});

  CHECK(sigmoid(Tensor::scalar(0)).item() == 0.5);
  CHECK(gelu(Tensor::scalar(0)).item() == 0.0);
  CHECK(gelu(Tensor::scalar(1)).item() == doctest::Approx(0.8413447460685429).epsilon(1e-14));
  CHECK(vals(relu(Tensor::from({3}, {-1, 0, 2}))) == std::vector<Real>{0, 0, 2});

  const Tensor s = softmax(Tensor::from({1, 3}, {0, std::log(2.0), std::log(5.0)}));
  CHECK(s.data()[0] == doctest::Approx(0.125).epsilon(kExact));
  CHECK(s.data()[1] == doctest::Approx(0.25).epsilon(kExact));
  CHECK(s.data()[2] == doctest::Approx(0.625).epsilon(kExact));

  CHECK(mse(a, b).item() == 16.0);
  CHECK(mean(a).item() == 2.5);
}

TEST_CASE("layer_norm normalizes each row") {
  const Tensor x = Tensor::from({3, 8}, random_values(24, 5, 3.0));
  const Tensor y = layer_norm(x, Tensor::full({8}, 1.0), Tensor::zeros({8}), 0.0);
  for (int r = 0; r < 3; ++r) {
    double m = 0, v = 0;
    for (int j = 0; j < 8; ++j) m += y.data()[r * 8 + j];
    m /= 8;
    for (int j = 0; j < 8; ++j) v += (y.data()[r * 8 + j] - m) * (y.data()[r * 8 + j] - m);
    CHECK(std::abs(m) < 1e-12);
    CHECK(v / 8 == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("cross entropy matches a per-row oracle") {
  const auto z = random_values(4 * 6, 8);
  const Tensor logits = Tensor::from({4, 6}, z);
  const std::vector<int> t{0, 5, -1, 2};
  for (double eps : {0.0, 0.1}) {
    double expect = 0;
    for (int r : {0, 1, 3})
      expect += iimt::testing::row_cross_entropy({z.begin() + r * 6, z.begin() + r * 6 + 6}, t[r], eps);
    CHECK(cross_entropy(logits, t, eps).item() == doctest::Approx(expect / 3).epsilon(1e-12));
    CHECK(cross_entropy(logits, t, eps, Reduction::kSum, 2).item() == doctest::Approx(expect / 2).epsilon(1e-12));
  }
  CHECK_THROWS_AS(cross_entropy(logits, std::vector<int>{0, 6, 0, 0}), RangeError);
  CHECK_THROWS_AS(cross_entropy(logits, std::vector<int>{0, 1}), ShapeError);
}

TEST_CASE("soft cross entropy equals hard CE on one-hot targets") {
  const auto z = random_values(3 * 5, 9);
  const Tensor logits = Tensor::from({3, 5}, z);
  std::vector<Real> q(15, 0.0);
  const std::vector<int> t{4, 0, 2};
  for (int r = 0; r < 3; ++r) q[r * 5 + t[r]] = 1.0;
  CHECK(soft_cross_entropy(logits, q).item() == doctest::Approx(cross_entropy(logits, t).item()).epsilon(1e-12));
  CHECK_THROWS_AS(soft_cross_entropy(logits, q, 0.0), ContractError);
}

TEST_CASE("conv2d matches direct summation") {
  const Tensor x = Tensor::from({1, 2, 4, 5}, random_values(40, 10));
  const Tensor w = Tensor::from({3, 2, 3, 3}, random_values(54, 11));
  const Tensor b = Tensor::from({3}, {0.5, -1, 2});
  for (int stride : {1, 2})
    for (int pad : {0, 1}) {
      const Tensor y = conv2d(x, w, &b, stride, pad);
      const int oh = (4 + 2 * pad - 3) / stride + 1, ow = (5 + 2 * pad - 3) / stride + 1;
      REQUIRE(y.shape() == Shape{1, 3, oh, ow});
      for (int o = 0; o < 3; ++o)
        for (int i = 0; i < oh; ++i)
          for (int j = 0; j < ow; ++j) {
            double acc = b.data()[o];
            for (int c = 0; c < 2; ++c)
              for (int u = 0; u < 3; ++u)
                for (int v = 0; v < 3; ++v) {
                  const int yy = i * stride + u - pad, xx = j * stride + v - pad;
                  if (yy < 0 || xx < 0 || yy >= 4 || xx >= 5) continue;
                  acc += x.data()[(c * 4 + yy) * 5 + xx] * w.data()[((o * 2 + c) * 3 + u) * 3 + v];
                }
            CHECK(y.data()[(o * oh + i) * ow + j] == doctest::Approx(acc).epsilon(1e-12));
          }
    }
  CHECK_THROWS_AS(conv2d(x, w, &b, 0, 0), ConfigError);
}

TEST_CASE("dropout is a pure function of the seed and identity in eval") {
  const Tensor x = Tensor::full({100}, 1.0);
  CHECK(vals(dropout(x, 0.5, 3, true)) == vals(dropout(x, 0.5, 3, true)));
  CHECK(vals(dropout(x, 0.5, 3, true)) != vals(dropout(x, 0.5, 4, true)));
  CHECK(vals(dropout(x, 0.5, 3, false)) == vals(x));
  const Tensor dropped = dropout(x, 0.5, 3, true);
  for (Real v : dropped.data()) CHECK((v == 0.0 || v == 2.0));
  CHECK_THROWS_AS(dropout(x, 1.0, 3, true), ConfigError);
}

TEST_CASE("attention matches a naive evaluation") {
  kernels::AttentionShape s{2, 3, 4, 4, 2, false};
  const Tensor q = Tensor::from({6, 4}, random_values(24, 12)), k = Tensor::from({8, 4}, random_values(32, 13)),
               v = Tensor::from({8, 4}, random_values(32, 14)), bias = Tensor::from({2, 3, 4}, random_values(24, 15));
  const std::vector<int> key_len{4, 3};
  for (bool causal : {false, true}) {
    s.causal = causal;
    s.sq = causal ? 4 : 3;
    const Tensor qq = causal ? Tensor::from({8, 4}, random_values(32, 16)) : q;
    const Tensor bb = causal ? Tensor::from({2, 4, 4}, random_values(32, 17)) : bias;
    const Tensor out = attention(qq, k, v, s, &bb, &key_len);
    const auto probs = attention_probs(qq, k, s, &bb, &key_len);
    const int hd = 2;
    for (int bi = 0; bi < 2; ++bi)
      for (int h = 0; h < 2; ++h)
        for (int i = 0; i < s.sq; ++i) {
          std::vector<double> logit(4, -INFINITY);
          double mx = -INFINITY;
          for (int j = 0; j < 4; ++j) {
            if (j >= key_len[bi] || (causal && j > i)) continue;
            double d = 0;
            for (int e = 0; e < hd; ++e) d += qq.data()[(bi * s.sq + i) * 4 + h * hd + e] * k.data()[(bi * 4 + j) * 4 + h * hd + e];
            logit[j] = d / std::sqrt(2.0) + bb.data()[(h * s.sq + i) * 4 + j];
            mx = std::max(mx, logit[j]);
          }
          double z = 0;
          for (double l : logit) z += std::isinf(l) ? 0 : std::exp(l - mx);
          for (int e = 0; e < hd; ++e) {
            double o = 0;
            for (int j = 0; j < 4; ++j) {
              const double p = std::isinf(logit[j]) ? 0 : std::exp(logit[j] - mx) / z;
              if (e == 0) CHECK(probs[((bi * 2 + h) * s.sq + i) * 4 + j] == doctest::Approx(p).epsilon(1e-12));
              o += p * v.data()[(bi * 4 + j) * 4 + h * hd + e];
            }
            CHECK(out.data()[(bi * s.sq + i) * 4 + h * hd + e] == doctest::Approx(o).epsilon(1e-12));
          }
        }
  }
}

TEST_CASE("shape and range errors") {
  const Tensor a = Tensor::zeros({2, 3}), b = Tensor::zeros({3, 2});
  CHECK_THROWS_AS(add(a, b), ShapeError);
  CHECK_THROWS_AS(matmul(a, a), ShapeError);
  CHECK_THROWS_AS(reshape(a, {4, 2}), ShapeError);
  CHECK_THROWS_AS(permute(a, {0, 0}), ShapeError);
  CHECK_THROWS_AS(slice(a, 1, 2, 2), ShapeError);
  CHECK_THROWS_AS(embedding(a, std::vector<int>{2}), RangeError);
  CHECK_THROWS_AS(embedding(a, std::vector<int>{-1}), RangeError);
  CHECK_THROWS_AS(layer_norm(a, Tensor::zeros({2}), Tensor::zeros({2})), ShapeError);
  kernels::AttentionShape s{1, 2, 3, 3, 2, false};
  CHECK_THROWS_AS(attention(a, a, a, s), ConfigError);
}
