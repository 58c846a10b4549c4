// Stage-1 objective: gradients, fixpoint, routing, commitment weight; model
// contracts and a micro overfit.

#include <doctest.h>

#include <cmath>

#include "fixtures.hpp"
#include "gradcheck.hpp"
#include "iimt/errors.hpp"
#include "iimt/tokenizer.hpp"
#include "iimt/training.hpp"
#include "stage1_surrogate.hpp"

using namespace iimt;
using iimt::testing::micro_tokenizer_config;
using iimt::testing::random_pixels;
using iimt::testing::FrozenStage1;
using iimt::testing::Grads;
using iimt::testing::taped_grads;

TEST_CASE("stage-1 loss gradients: tape equals the frozen surrogate, surrogate passes finite differences") {
  Tokenizer tok(micro_tokenizer_config(), 3);
  iimt::testing::randomize(tok.params(), 4, 0.3);
  const auto px = random_pixels(2, 16, 16, 5);
  const FrozenStage1 frozen(tok, px, 2);

  nn::ForwardCtx ctx;
  const Stage1Loss direct = tok.loss(px, 2, ctx);
  CHECK(direct.tokens == frozen.tokens);
  CHECK(direct.total.item() == doctest::Approx(frozen().total.item()).epsilon(1e-14));

  const Grads a = taped_grads(tok, [&] {
    nn::ForwardCtx c;
    return tok.loss(px, 2, c).total;
  });
  const Grads b = taped_grads(tok, [&] { return frozen().total; });
  for (const auto& [n, g] : a.by_name)
    for (std::size_t i = 0; i < g.size(); ++i) REQUIRE(g[i] == doctest::Approx(b.by_name.at(n)[i]).epsilon(1e-12));

  const auto res = iimt::testing::gradcheck([&] { return frozen().total; }, iimt::testing::named_params(tok.params()), 24);
  INFO(res.worst);
  CHECK(res.max_rel_err <= iimt::testing::kGradTol);
}

TEST_CASE("at an encoder/codebook fixpoint the VQ and commitment terms vanish") {
  Tokenizer tok(micro_tokenizer_config(), 6);
  const auto px = random_pixels(1, 16, 16, 7);
  nn::ForwardCtx ctx;
  const Tensor ze = tok.encode_continuous(px, 1, ctx);
  Tensor cb = tok.codebook();
  const int d = tok.config().code_dim;
  for (double& v : cb.data_mut()) v = 100.0;
  for (int i = 0; i < ze.dim(0); ++i)
    for (int j = 0; j < d; ++j) cb.data_mut()[i * d + j] = ze.data()[i * d + j];
  const Stage1Loss l = tok.loss(px, 1, ctx);
  CHECK(l.tokens == std::vector<int>{0, 1, 2, 3});
  CHECK(l.vq.item() == 0.0);
  CHECK(l.commitment.item() == 0.0);
  CHECK(l.total.item() == l.reconstruction.item());
  const Tensor recon = tok.decode_codes(ze, 1, ctx);
  const auto& c = tok.config();
  CHECK(l.reconstruction.item() ==
        ad::mse(recon, Tensor::from(recon.shape(), patchify(px, c.image_height, c.image_width, c.patch))).item());
}

TEST_CASE("gradient routing: codebook-only, encoder-only, straight-through") {
  Tokenizer tok(micro_tokenizer_config(), 8);
  iimt::testing::randomize(tok.params(), 9, 0.3);
  const auto px = random_pixels(2, 16, 16, 10);
  auto term = [&](Tensor Stage1Loss::*which) {
    return taped_grads(tok, [&] {
      nn::ForwardCtx c;
      return tok.loss(px, 2, c).*which;
    });
  };
  const Grads vq = term(&Stage1Loss::vq), commit = term(&Stage1Loss::commitment), rec = term(&Stage1Loss::reconstruction);

  CHECK(vq.norm("tok.codebook") > 0);
  CHECK(vq.norm("tok.enc") == 0.0);
  CHECK(vq.norm("tok.dec") == 0.0);

  CHECK(commit.norm("tok.codebook") == 0.0);
  CHECK(commit.norm("tok.enc") > 0);
  CHECK(commit.norm("tok.dec") == 0.0);

  CHECK(rec.norm("tok.codebook") == 0.0);
  CHECK(rec.norm("tok.enc") > 0);  // copied across the quantizer
  CHECK(rec.norm("tok.dec") > 0);
}

TEST_CASE("commitment weight is 0.25 and scales the term and its gradient linearly") {
  TokenizerConfig c = micro_tokenizer_config();
  CHECK(TokenizerConfig{}.beta == 0.25);
  c.beta = 1.0;
  Tokenizer unit(c, 11);
  c.beta = 0.25;
  Tokenizer quarter(c, 11);
  const auto px = random_pixels(2, 16, 16, 12);
  nn::ForwardCtx ctx;
  const Stage1Loss a = unit.loss(px, 2, ctx), b = quarter.loss(px, 2, ctx);
  CHECK(b.vq.item() == a.vq.item());
  CHECK(b.reconstruction.item() == a.reconstruction.item());
  CHECK(b.commitment.item() == doctest::Approx(0.25 * a.commitment.item()).epsilon(1e-15));
  // analytic value: beta * mean ||ze - e_k||^2 per element
  const Tensor ze = quarter.encode_continuous(px, 2, ctx);
  double s = 0;
  const int d = c.code_dim;
  for (int i = 0; i < ze.dim(0); ++i)
    s += quantize(ze.data().subspan(i * d, d), quarter.codebook()).distance;
  CHECK(b.commitment.item() == doctest::Approx(0.25 * s / static_cast<double>(ze.numel())).epsilon(1e-12));
  CHECK(b.vq.item() == doctest::Approx(s / static_cast<double>(ze.numel())).epsilon(1e-12));

  auto grads = [&](Tokenizer& t) {
    return taped_grads(t, [&] {
      nn::ForwardCtx x;
      return t.loss(px, 2, x).commitment;
    });
  };
  const Grads ga = grads(unit), gb = grads(quarter);
  for (const auto& [n, g] : ga.by_name)
    for (std::size_t i = 0; i < g.size(); ++i) CHECK(gb.by_name.at(n)[i] == doctest::Approx(0.25 * g[i]).epsilon(1e-12));
}

TEST_CASE("codebook initialization is uniform in [-1/K, 1/K]") {
  Tokenizer tok(TokenizerConfig{}, 1);
  const double r = 1.0 / 512;
  double lo = 1, hi = -1;
  for (double v : tok.codebook().data()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  CHECK(lo >= -r);
  CHECK(hi <= r);
  CHECK(hi - lo > 1.9 * r);
  CHECK(tok.codebook().shape() == ad::Shape{512, 64});
}

TEST_CASE("encode/decode contracts and determinism") {
  Tokenizer tok(micro_tokenizer_config(), 13);
  const auto px = random_pixels(3, 16, 16, 14);
  const auto all = tok.encode(px, 3);
  REQUIRE(all.size() == 12);
  for (int b = 0; b < 3; ++b) {
    const auto one = tok.encode(std::span<const double>(px).subspan(b * 768, 768), 1);
    CHECK(std::vector<int>(all.begin() + 4 * b, all.begin() + 4 * b + 4) == one);
  }
  Tokenizer twin(micro_tokenizer_config(), 13);
  CHECK(twin.encode(px, 3) == all);

  const auto out = tok.decode(all, 3);
  CHECK(out.size() == px.size());
  for (double v : out) CHECK((v >= 0.0 && v <= 1.0));
  CHECK_THROWS_AS(tok.decode(std::vector<int>{0, 1, 2, 8}), RangeError);
  CHECK_THROWS_AS(tok.decode(std::vector<int>{0, 1, 2}), ShapeError);
  CHECK_THROWS_AS(tok.encode(std::vector<double>(100), 1), ShapeError);
  CHECK_THROWS_AS(tok.encode(Image::filled(8, 8, {0, 0, 0})), ShapeError);

  TokenizerConfig bad = micro_tokenizer_config();
  bad.patch = 5;
  CHECK_THROWS_AS(Tokenizer(bad, 1), ConfigError);
  bad = micro_tokenizer_config();
  bad.beta = -1;
  CHECK_THROWS_AS(Tokenizer(bad, 1), ConfigError);
}

TEST_CASE("micro tokenizer overfits two images") {
  TokenizerConfig c = micro_tokenizer_config();
  c.codebook_size = 16;
  c.model_dim = 16;
  c.ffn_dim = 32;
  c.code_dim = 8;
  Tokenizer tok(c, 15);
  // blocky images: each 8x8 patch one flat color
  std::vector<std::vector<double>> images;
  for (int n = 0; n < 2; ++n) {
    std::vector<double> img(16 * 16 * 3);
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x)
        for (int ch = 0; ch < 3; ++ch) img[(y * 16 + x) * 3 + ch] = ((y / 8 + x / 8 + n + ch) % 2) ? 0.9 : 0.1;
    images.push_back(img);
  }
  Stage1Config sc;
  sc.steps = 300;
  sc.batch_size = 2;
  sc.lr = 3e-3;
  sc.warmup = 10;
  std::vector<Stage1LogEntry> log;
  train_stage1(tok, images, sc, {}, &log);
  REQUIRE(log.size() == 300);
  CHECK(log.back().rec <= 0.5 * log.front().rec);
  double mae = 0;
  for (const auto& img : images) {
    const auto rt = tok.decode(tok.encode(img, 1), 1);
    for (std::size_t i = 0; i < img.size(); ++i) mae += std::abs(rt[i] - img[i]);
  }
  mae /= 2.0 * images[0].size();
  MESSAGE("micro round-trip MAE " << mae);
  CHECK(mae <= 0.05);
}
