// Text-to-image teacher: distributions, gradients, sizing, and a memorization
// check where only the text distinguishes examples.

#include <doctest.h>

#include <cmath>

#include "fixtures.hpp"
#include "gradcheck.hpp"
#include "iimt/errors.hpp"
#include "iimt/teacher.hpp"
#include "iimt/training.hpp"

using namespace iimt;
using iimt::testing::micro_teacher_config;
using iimt::testing::random_pixels;

namespace {

double token_accuracy(const TeacherModel& t, const std::vector<IimtExample>& data, const std::vector<std::string>& texts) {
  int hit = 0, total = 0;
  const int n = t.config().num_tokens(), k = t.config().codebook_size;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto p = t.distributions(data[i].src_pixels, {texts[i]}, data[i].tokens);
    for (int r = 0; r < n; ++r) {
      int best = 0;
      for (int j = 1; j < k; ++j)
        if (p[r * k + j] > p[r * k + best]) best = j;
      hit += best == data[i].tokens[r];
      ++total;
    }
  }
  return static_cast<double>(hit) / total;
}

}  // namespace

TEST_CASE("sizing follows the student") {
  const TeacherConfig t = TeacherConfig::for_student(ModelConfig{});
  CHECK(t.model_dim == 48);
  CHECK(t.ffn_dim == 96);
  CHECK(t.num_heads == 4);
  CHECK(t.num_tokens() == 64);
  CHECK(t.codebook_size == 512);
  CHECK(t.feature_h() == 8);
  ModelConfig odd;
  odd.model_dim = 20;
  odd.num_heads = 4;
  CHECK(TeacherConfig::for_student(odd).model_dim % 4 == 0);
  TeacherConfig bad = micro_teacher_config();
  bad.image_height = 20;
  CHECK_THROWS_AS(TeacherModel(bad, 1), ConfigError);
}

TEST_CASE("distributions are normalized and sharpen with lower temperature") {
  TeacherModel t(micro_teacher_config(), 1);
  iimt::testing::randomize(t.params(), 2, 0.3);
  const auto px = random_pixels(2, 16, 16, 3);
  const std::vector<int> tokens{1, 2, 3, 4, 5, 6, 7, 0};
  const auto p1 = t.distributions(px, {"ab", "c"}, tokens, 1.0);
  const auto p3 = t.distributions(px, {"ab", "c"}, tokens, 3.0);
  REQUIRE(p1.size() == 8 * 8);
  double h1 = 0, h3 = 0;
  for (int r = 0; r < 8; ++r) {
    double s = 0;
    for (int j = 0; j < 8; ++j) {
      s += p1[r * 8 + j];
      CHECK(p1[r * 8 + j] > 0);
      h1 -= p1[r * 8 + j] * std::log(p1[r * 8 + j]);
      h3 -= p3[r * 8 + j] * std::log(p3[r * 8 + j]);
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
  CHECK(h3 > h1);
  CHECK_THROWS_AS(t.distributions(px, {"ab", "c"}, tokens, 0.0), ConfigError);
  CHECK_THROWS_AS(t.distributions(px, {"ab", "c"}, std::vector<int>{1, 2}, 1.0), ShapeError);
  CHECK_THROWS_AS(t.distributions(px, {"ab", "c"}, std::vector<int>{9, 2, 3, 4, 5, 6, 7, 0}, 1.0), RangeError);
}

TEST_CASE("teacher is causal over gold tokens") {
  TeacherModel t(micro_teacher_config(), 4);
  iimt::testing::randomize(t.params(), 5, 0.3);
  const auto px = random_pixels(1, 16, 16, 6);
  const auto a = t.distributions(px, {"x"}, std::vector<int>{1, 2, 3, 4});
  const auto b = t.distributions(px, {"x"}, std::vector<int>{1, 2, 6, 6});
  for (int i = 0; i < 3 * 8; ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
}

TEST_CASE("teacher gradients") {
  TeacherModel t(micro_teacher_config(), 7);
  iimt::testing::randomize(t.params(), 8, 0.3);
  const auto px = random_pixels(2, 16, 16, 9);
  const std::vector<int> tokens{1, 2, 3, 4, 5, 6, 7, 0};
  auto f = [&] {
    nn::ForwardCtx ctx;
    return ad::cross_entropy(t.logits(px, {"ab", "c"}, tokens, ctx), tokens);
  };
  const auto res = iimt::testing::gradcheck(f, iimt::testing::named_params(t.params()), 6);
  INFO(res.worst);
  CHECK(res.max_rel_err <= iimt::testing::kGradTol);
}

TEST_CASE("teacher memorizes text-determined tokens and depends on the text") {
  TeacherConfig c = micro_teacher_config();
  c.model_dim = 16;
  c.ffn_dim = 32;
  c.num_heads = 2;
  c.image_height = c.image_width = 32;
  c.token_grid_h = c.token_grid_w = 3;
  TeacherModel t(c, 10);
  // identical images: only the text tells examples apart
  const auto gray = std::vector<double>(32 * 32 * 3, 0.5);
  const std::vector<std::string> words{"haus", "baum", "katze", "hund", "wasser", "licht", "berg", "see"};
  std::vector<IimtExample> data;
  std::mt19937_64 rng(11);
  for (const auto& w : words) {
    IimtExample e;
    e.id = w;
    e.src_pixels = gray;
    e.tgt_text = w;
    for (int i = 0; i < 9; ++i) e.tokens.push_back(static_cast<int>(rng() % 8));
    data.push_back(e);
  }
  TeacherTrainConfig tc;
  tc.steps = 400;
  tc.batch_size = 8;
  tc.lr = 3e-3;
  tc.warmup = 20;
  tc.weight_decay = 0.0;
  std::vector<TeacherLogEntry> log;
  train_teacher(t, data, tc, {}, &log);
  REQUIRE(log.size() == 400);
  MESSAGE("teacher CE " << log.front().ce << " -> " << log.back().ce);
  CHECK(log.back().ce <= 0.1);
  const double acc = token_accuracy(t, data, words);
  std::vector<std::string> shuffled(words.begin() + 1, words.end());
  shuffled.push_back(words.front());
  const double control = token_accuracy(t, data, shuffled);
  MESSAGE("accuracy " << acc << ", with mismatched texts " << control);
  CHECK(acc >= 0.95);
  CHECK(control <= 0.6);
}
