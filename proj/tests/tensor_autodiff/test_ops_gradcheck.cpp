// Finite-difference checks for every differentiable primitive.

#include <doctest.h>

#include "fixtures.hpp"
#include "gradcheck.hpp"
#include "iimt/ops.hpp"

using namespace iimt;
using namespace iimt::ad;
using iimt::testing::gradcheck;
using iimt::testing::kGradTol;
using iimt::testing::random_values;

namespace {

std::uint64_t g_seed = 100;

Tensor param(Shape s, double scale = 1.0) {
  const std::size_t n = shape_numel(s);
  return Tensor::from(std::move(s), random_values(n, g_seed++, scale));
}

// sum(f() * R) for one fixed random R, so every output coordinate gets a
// distinct weight.
std::function<Tensor()> projected(std::function<Tensor()> f) {
  Tensor probe = f();
  const Tensor r = Tensor::from(probe.shape(), random_values(probe.numel(), g_seed++));
  return [f, r] { return sum(mul(f(), r)); };
}

void expect_ok(const iimt::testing::GradCheck& g) {
  INFO(g.worst);
  CHECK(g.checked > 0);
  CHECK(g.max_rel_err <= kGradTol);
}

}  // namespace

TEST_CASE("elementwise ops") {
  Tensor a = param({3, 4}), b = param({3, 4});
  expect_ok(gradcheck(projected([&] { return add(a, b); }), {{"a", a}, {"b", b}}));
  expect_ok(gradcheck(projected([&] { return sub(a, b); }), {{"a", a}, {"b", b}}));
  expect_ok(gradcheck(projected([&] { return mul(a, b); }), {{"a", a}, {"b", b}}));
  expect_ok(gradcheck(projected([&] { return scale(a, -2.5); }), {{"a", a}}));
  // same tensor on both sides
  expect_ok(gradcheck(projected([&] { return mul(a, a); }), {{"a", a}}));
}

TEST_CASE("bias, positional, matmul, linear") {
  Tensor x = param({2, 3, 4}), bias = param({4});
  expect_ok(gradcheck(projected([&] { return add_bias(x, bias); }), {{"x", x}, {"bias", bias}}));

  Tensor h = param({6, 4}), table = param({5, 4});
  expect_ok(gradcheck(projected([&] { return add_positional(h, table, 3); }), {{"h", h}, {"table", table}}));

  Tensor a = param({3, 5}), b = param({5, 2});
  expect_ok(gradcheck(projected([&] { return matmul(a, b); }), {{"a", a}, {"b", b}}));

  Tensor w = param({4, 3}), wb = param({3});
  expect_ok(gradcheck(projected([&] { return linear(x, w, &wb); }), {{"x", x}, {"w", w}, {"b", wb}}));
  expect_ok(gradcheck(projected([&] { return linear(x, w); }), {{"x", x}, {"w", w}}));
}

TEST_CASE("activations") {
  Tensor x = param({4, 5}, 2.0);
  expect_ok(gradcheck(projected([&] { return sigmoid(x); }), {{"x", x}}));
  expect_ok(gradcheck(projected([&] { return gelu(x); }), {{"x", x}}));
  expect_ok(gradcheck(projected([&] { return relu(x); }), {{"x", x}}));
}

TEST_CASE("softmax over each axis") {
  Tensor x = param({2, 3, 4});
  for (int axis : {0, 1, 2, -1}) {
    CAPTURE(axis);
    expect_ok(gradcheck(projected([&] { return softmax(x, axis); }), {{"x", x}}));
  }
}

TEST_CASE("layer_norm") {
  Tensor x = param({5, 6}), g = param({6}), b = param({6});
  expect_ok(gradcheck(projected([&] { return layer_norm(x, g, b); }), {{"x", x}, {"gain", g}, {"bias", b}}));
}

TEST_CASE("embedding and gather_cols accumulate repeated indices") {
  Tensor table = param({6, 3});
  const std::vector<int> ids{1, 4, 1, 0, 1};
  expect_ok(gradcheck(projected([&] { return embedding(table, ids); }), {{"table", table}}));
  const std::vector<int> cols{2, 0, 2, 5};
  Tensor t2 = param({3, 6});
  expect_ok(gradcheck(projected([&] { return gather_cols(t2, cols); }), {{"t2", t2}}));
}

TEST_CASE("layout ops") {
  Tensor a = param({2, 3}), b = param({2, 2}), c = param({1, 3});
  expect_ok(gradcheck(projected([&] { return concat({a, b}, 1); }), {{"a", a}, {"b", b}}));
  expect_ok(gradcheck(projected([&] { return concat({a, c, a}, 0); }), {{"a", a}, {"c", c}}));
  Tensor x = param({2, 3, 4});
  expect_ok(gradcheck(projected([&] { return reshape(x, {6, 4}); }), {{"x", x}}));
  expect_ok(gradcheck(projected([&] { return transpose(a); }), {{"a", a}}));
  expect_ok(gradcheck(projected([&] { return permute(x, {2, 0, 1}); }), {{"x", x}}));
  expect_ok(gradcheck(projected([&] { return slice(x, 1, 1, 2); }), {{"x", x}}));
  expect_ok(gradcheck(projected([&] { return slice(x, 2, 0, 3); }), {{"x", x}}));
  expect_ok(gradcheck(projected([&] { return repeat_rows(a, 3); }), {{"a", a}}));
}

TEST_CASE("reductions and regression loss") {
  Tensor x = param({3, 4}), y = param({3, 4});
  expect_ok(gradcheck([&] { return sum(mul(x, x)); }, {{"x", x}}));
  expect_ok(gradcheck([&] { return mean(mul(x, y)); }, {{"x", x}, {"y", y}}));
  expect_ok(gradcheck([&] { return mse(x, y); }, {{"x", x}, {"y", y}}));
}

TEST_CASE("cross entropy variants") {
  Tensor z = param({5, 7});
  const std::vector<int> t{3, -1, 0, 6, 3};
  expect_ok(gradcheck([&] { return cross_entropy(z, t); }, {{"z", z}}));
  expect_ok(gradcheck([&] { return cross_entropy(z, t, 0.1); }, {{"z", z}}));
  expect_ok(gradcheck([&] { return cross_entropy(z, t, 0.2, Reduction::kSum, 2); }, {{"z", z}}));

  std::vector<Real> q = random_values(35, 77);
  for (Real& v : q) v = std::exp(v);
  for (int r = 0; r < 5; ++r) {
    Real s = 0;
    for (int j = 0; j < 7; ++j) s += q[r * 7 + j];
    for (int j = 0; j < 7; ++j) q[r * 7 + j] /= s;
  }
  expect_ok(gradcheck([&] { return soft_cross_entropy(z, q); }, {{"z", z}}));
  expect_ok(gradcheck([&] { return soft_cross_entropy(z, q, 2.0, Reduction::kSum, 3); }, {{"z", z}}));
}

TEST_CASE("conv2d") {
  Tensor x = param({2, 2, 5, 5}), w = param({3, 2, 3, 3}), b = param({3});
  expect_ok(gradcheck(projected([&] { return conv2d(x, w, &b, 1, 1); }), {{"x", x}, {"w", w}, {"b", b}}));
  expect_ok(gradcheck(projected([&] { return conv2d(x, w, &b, 2, 1); }), {{"x", x}, {"w", w}, {"b", b}}));
  expect_ok(gradcheck(projected([&] { return conv2d(x, w, nullptr, 1, 0); }), {{"x", x}, {"w", w}}));
}

TEST_CASE("dropout with a fixed seed") {
  Tensor x = param({4, 6});
  expect_ok(gradcheck(projected([&] { return dropout(x, 0.3, 17, true); }), {{"x", x}}));
}

TEST_CASE("attention with bias, causal mask and key lengths") {
  kernels::AttentionShape s{2, 3, 4, 4, 2, false};
  Tensor q = param({6, 4}), k = param({8, 4}), v = param({8, 4}), bias = param({2, 3, 4});
  const std::vector<int> key_len{4, 2};
  expect_ok(gradcheck(projected([&] { return attention(q, k, v, s); }), {{"q", q}, {"k", k}, {"v", v}}));
  expect_ok(gradcheck(projected([&] { return attention(q, k, v, s, &bias, &key_len); }),
                      {{"q", q}, {"k", k}, {"v", v}, {"bias", bias}}));
  kernels::AttentionShape sc{2, 4, 4, 4, 2, true};
  Tensor qc = param({8, 4}), bc = param({2, 4, 4});
  expect_ok(gradcheck(projected([&] { return attention(qc, k, v, sc, &bc); }),
                      {{"q", qc}, {"k", k}, {"v", v}, {"bias", bc}}));
}
