// 2-D relative position buckets and gated fusion.

#include <doctest.h>

#include <map>
#include <set>

#include "fixtures.hpp"
#include "gradcheck.hpp"
#include "iimt/errors.hpp"
#include "iimt/transformer.hpp"

using namespace iimt;
using namespace iimt::nn;
using iimt::testing::random_values;

TEST_CASE("3x3 grid: buckets are a bijection onto displacements") {
  ParameterStore ps(1);
  RelPos2D rp(ps, "rel", 2, 3, 3);
  CHECK(rp.buckets() == 25);
  CHECK(rp.table.shape() == Shape{2, 25});
  std::map<std::pair<int, int>, int> seen;
  std::set<int> used;
  for (int i = 0; i < 9; ++i)
    for (int j = 0; j < 9; ++j) {
      const std::pair<int, int> d{i / 3 - j / 3, i % 3 - j % 3};
      const int b = rp.bucket(d.first, d.second);
      CHECK(b >= 0);
      CHECK(b < 25);
      if (auto it = seen.find(d); it != seen.end())
        CHECK(it->second == b);
      else
        seen[d] = b;
      used.insert(b);
    }
  CHECK(seen.size() == 25);
  CHECK(used.size() == 25);
  // clamped beyond the radius
  CHECK(rp.bucket(7, -9) == rp.bucket(2, -2));
}

TEST_CASE("bias entries equal table[head, bucket] and are translation invariant") {
  ParameterStore ps(1);
  RelPos2D rp(ps, "rel", 2, 3, 4);
  Tensor t = rp.table;
  const auto v = random_values(t.numel(), 3);
  std::copy(v.begin(), v.end(), t.data_mut().begin());
  for (int len : {12, 7}) {
    const Tensor b = rel_pos_bias(3, 4, rp, len);
    REQUIRE(b.shape() == Shape{2, len, len});
    for (int h = 0; h < 2; ++h)
      for (int i = 0; i < len; ++i)
        for (int j = 0; j < len; ++j) {
          const int want = rp.bucket(i / 4 - j / 4, i % 4 - j % 4);
          CHECK(b.data()[(h * len + i) * len + j] == t.data()[h * rp.buckets() + want]);
        }
  }
  const Tensor b = rel_pos_bias(3, 4, rp);
  // (0,0)->(1,1) and (1,2)->(2,3) share a displacement
  CHECK(b.data()[0 * 12 + 5] == b.data()[6 * 12 + 11]);
  CHECK_THROWS_AS(rel_pos_bias(3, 4, rp, 13), ContractError);
}

TEST_CASE("relative bias table starts at zero") {
  ParameterStore ps(1);
  RelPos2D rp(ps, "rel", 4, 8, 8);
  for (Real x : rp.table.data()) CHECK(x == 0.0);
}

TEST_CASE("gated fusion is a sigmoid-gated convex combination") {
  ParameterStore ps(1);
  GatedFusion g(ps, "gate", 4);
  const Tensor img = Tensor::from({3, 4}, random_values(12, 4)), txt = Tensor::from({3, 4}, random_values(12, 5));
  const Tensor gate = g.gate(img, txt), fused = g.fuse(img, txt);
  for (std::size_t i = 0; i < 12; ++i) {
    const double z = gate.data()[i];
    CHECK(z > 0);
    CHECK(z < 1);
    CHECK(fused.data()[i] == doctest::Approx(z * img.data()[i] + (1 - z) * txt.data()[i]).epsilon(1e-12));
  }
  // gate by hand: sigmoid(img W + txt U)
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 4; ++c) {
      double s = 0;
      for (int k = 0; k < 4; ++k)
        s += img.data()[r * 4 + k] * g.w_img.w.data()[k * 4 + c] + txt.data()[r * 4 + k] * g.w_txt.w.data()[k * 4 + c];
      CHECK(gate.data()[r * 4 + c] == doctest::Approx(1 / (1 + std::exp(-s))).epsilon(1e-12));
    }
  CHECK_THROWS_AS(g.gate(img, Tensor::zeros({2, 4})), ContractError);
}

TEST_CASE("saturated gate selects one stream") {
  ParameterStore ps(1);
  GatedFusion g(ps, "gate", 2);
  Tensor wi = g.w_img.w, wt = g.w_txt.w;
  for (Real& v : wt.data_mut()) v = 0;
  for (Real& v : wi.data_mut()) v = 0;
  wi.data_mut()[0] = wi.data_mut()[3] = 200;  // identity * 200
  const Tensor img = Tensor::from({1, 2}, {1, 1}), txt = Tensor::from({1, 2}, {-3, 5});
  CHECK(g.fuse(img, txt).data()[0] == doctest::Approx(1.0));
  CHECK(g.fuse(img, txt).data()[1] == doctest::Approx(1.0));
  const Tensor neg = Tensor::from({1, 2}, {-1, -1});
  CHECK(g.fuse(neg, txt).data()[0] == doctest::Approx(-3.0));
  CHECK(g.fuse(neg, txt).data()[1] == doctest::Approx(5.0));
}

TEST_CASE("gated fusion gradients") {
  ParameterStore ps(1);
  GatedFusion g(ps, "gate", 4);
  Tensor img = Tensor::from({3, 4}, random_values(12, 6)), txt = Tensor::from({3, 4}, random_values(12, 7));
  const Tensor r = Tensor::from({3, 4}, random_values(12, 8));
  auto params = iimt::testing::named_params(ps);
  params.emplace_back("img", img);
  params.emplace_back("txt", txt);
  const auto res = iimt::testing::gradcheck([&] { return ad::sum(ad::mul(g.fuse(img, txt), r)); }, params);
  INFO(res.worst);
  CHECK(res.max_rel_err <= iimt::testing::kGradTol);
}

TEST_CASE("image decoder trace exposes the fused stream") {
  AttentionConfig c;
  c.model_dim = 8;
  c.num_heads = 2;
  c.ffn_dim = 8;
  c.rel_pos_2d = true;
  ParameterStore ps(1);
  ImageDecoderLayer layer(ps, "img", c, 2, 2, true);
  iimt::testing::randomize(ps, 9);
  const Tensor h = Tensor::from({4, 8}, random_values(32, 10)), mem = Tensor::from({3, 8}, random_values(24, 11)),
               txt = Tensor::from({2, 8}, random_values(16, 12));
  ForwardCtx ctx;
  FusionTrace tr;
  const SeqLayout ts{1, 2};
  layer.forward(h, {1, 4}, mem, {1, 3}, &txt, &ts, ctx, &tr);
  const Tensor gate = layer.gate.gate(tr.img_stream, tr.txt_stream);
  for (std::size_t i = 0; i < 32; ++i) {
    const double z = gate.data()[i];
    CHECK(tr.fused.data()[i] == doctest::Approx(z * tr.img_stream.data()[i] + (1 - z) * tr.txt_stream.data()[i]).epsilon(1e-12));
  }
}
