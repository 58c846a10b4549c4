// Template OCR on clean renderings: exact text and boxes when axis-aligned,
// high exact-match rate at the maximum rotation.

#include <doctest.h>

#include <random>

#include "iimt/ocr.hpp"
#include "iimt/synthesis.hpp"

using namespace iimt;

namespace {

const GlyphAtlas& atlas() { return GlyphAtlas::builtin(); }

// Words over the whole atlas alphabet, short enough to fit most of the time.
std::string random_sentence(std::mt19937_64& rng) {
  std::string alphabet;
  for (char c : atlas().alphabet())
    if (c != ' ') alphabet += c;
  std::uniform_int_distribution<int> nw(1, 5), wl(1, 5);
  std::uniform_int_distribution<std::size_t> ch(0, alphabet.size() - 1);
  std::string s;
  const int n = nw(rng);
  for (int i = 0; i < n; ++i) {
    if (i) s += ' ';
    const int l = wl(rng);
    for (int k = 0; k < l; ++k) s += alphabet[ch(rng)];
  }
  return s;
}

// Renders n accepted samples; returns (exact text matches, chars right, chars total).
struct RoundTrip {
  int samples = 0, exact = 0;
  long long chars = 0, chars_right = 0;
  int box_within_1px = 0, boxes = 0;
};

RoundTrip round_trip(const RenderSpec& spec, int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  RoundTrip rt;
  std::uint64_t k = 0;
  while (rt.samples < n) {
    const std::string text = random_sentence(rng);
    RenderedSample r;
    try {
      r = render(text, spec, atlas(), seed * 100000 + k++);
    } catch (const RejectionError&) {
      continue;
    }
    ++rt.samples;
    const OcrResult o = oracle_ocr(r.image);
    const std::string got = o.text();
    rt.exact += got == r.text;
    rt.chars += static_cast<long long>(r.text.size());
    for (std::size_t i = 0; i < r.text.size(); ++i) rt.chars_right += i < got.size() && got[i] == r.text[i];
    if (o.boxes.size() == r.boxes.size()) {
      for (std::size_t i = 0; i < o.boxes.size(); ++i) {
        const Box &a = o.boxes[i].box, &b = r.boxes[i].box;
        ++rt.boxes;
        rt.box_within_1px += std::abs(a.x_min - b.x_min) <= 1 && std::abs(a.y_min - b.y_min) <= 1 &&
                             std::abs(a.x_max - b.x_max) <= 1 && std::abs(a.y_max - b.y_max) <= 1;
      }
    }
  }
  return rt;
}

}  // namespace

TEST_CASE("axis-aligned renderings: 500 of 500 read exactly") {
  RenderSpec spec;
  spec.max_rotation_deg = 0;
  const RoundTrip rt = round_trip(spec, 500, 1);
  MESSAGE("axis-aligned exact " << rt.exact << "/500, chars " << rt.chars_right << "/" << rt.chars);
  CHECK(rt.exact == 500);
  CHECK(rt.chars_right == rt.chars);
  CHECK(rt.box_within_1px == rt.boxes);
  CHECK(rt.boxes > 500);
}

TEST_CASE("\"hello world\": exact text, boxes within a pixel") {
  RenderSpec spec;
  spec.max_rotation_deg = 0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    const RenderedSample r = render("hello world", spec, atlas(), s);
    const OcrResult o = oracle_ocr(r.image);
    CHECK(o.text() == "hello world");
    REQUIRE(o.boxes.size() == 2u);
    for (int i = 0; i < 2; ++i) {
      CHECK(o.boxes[i].text == r.boxes[i].text);
      CHECK(std::abs(o.boxes[i].box.x_min - r.boxes[i].box.x_min) <= 1);
      CHECK(std::abs(o.boxes[i].box.y_min - r.boxes[i].box.y_min) <= 1);
      CHECK(std::abs(o.boxes[i].box.x_max - r.boxes[i].box.x_max) <= 1);
      CHECK(std::abs(o.boxes[i].box.y_max - r.boxes[i].box.y_max) <= 1);
    }
    CHECK(std::abs(o.angle_deg) < 0.5);
  }
}

TEST_CASE("rotated renderings at up to 8 degrees: at least 95% exact") {
  const RenderSpec spec;  // max rotation 8 degrees
  const RoundTrip rt = round_trip(spec, 500, 2);
  MESSAGE("rotated exact " << rt.exact << "/500, chars " << rt.chars_right << "/" << rt.chars);
  CHECK(rt.exact >= 475);
}

TEST_CASE("darkness map and skew estimate") {
  Placement p;
  p.background = {180, 200, 250};
  RenderSpec spec;
  const RenderedSample r = render_placed("ab cd", spec, atlas(), p);
  const auto dark = darkness_map(r.image);
  for (int y = 0; y < spec.height; ++y)
    for (int x = 0; x < spec.width; ++x) {
      const double d = dark[y * spec.width + x];
      if (r.image.rgb(x, y) == p.background) CHECK(d == 0.0);
      else CHECK(d == doctest::Approx(1.0));
    }
  // projection skew tracks the applied rotation on multi-line text
  for (double deg : {-6.0, -3.0, 3.0, 6.0}) {
    p.rotation_deg = deg;
    const RenderedSample rr = render_placed("ab cd ef gh ij", spec, atlas(), p);
    const double est = estimate_skew(darkness_map(rr.image), spec.width, spec.height);
    CAPTURE(deg);
    CHECK(std::abs(est - deg) <= 1.5);
    CHECK(std::abs(oracle_ocr(rr.image).angle_deg - deg) <= 1.0);
  }
}

TEST_CASE("blank and non-text images") {
  const Image blank = Image::filled(64, 64, {120, 130, 140});
  const OcrResult o = oracle_ocr(blank);
  CHECK(o.boxes.empty());
  CHECK(o.text().empty());
  // boxes stay in bounds and texts stay in the alphabet on arbitrary pixels
  std::mt19937_64 rng(4);
  for (int t = 0; t < 20; ++t) {
    Image noise = Image::filled(64, 64, {255, 255, 255});
    for (auto& v : noise.pixels)
      if (rng() % 7 == 0) v = static_cast<std::uint8_t>(rng() % 256);
    for (const TextBox& tb : oracle_ocr(noise).boxes) {
      CHECK(tb.box.x_min >= 0);
      CHECK(tb.box.y_min >= 0);
      CHECK(tb.box.x_max <= 64);
      CHECK(tb.box.y_max <= 64);
      for (unsigned char c : tb.text) CHECK(atlas().has(c));
    }
  }
}
