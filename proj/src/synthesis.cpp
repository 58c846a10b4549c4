#include "iimt/synthesis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

#include "iimt/errors.hpp"
#include "iimt/nn.hpp"

namespace iimt {

namespace fs = std::filesystem;

namespace {

constexpr double kPi = 3.14159265358979323846;

std::string byte_name(unsigned char c) {
  char buf[8];
  std::snprintf(buf, sizeof buf, "0x%02X", c);
  return buf;
}

}  // namespace

int RenderSpec::max_line_chars(const GlyphAtlas& a) const {
  return (width - 2 * margin + a.advance() - a.mask_width()) / a.advance();
}

int RenderSpec::max_lines(const GlyphAtlas& a) const {
  const int avail = height - 2 * margin - a.mask_height();
  return avail < 0 ? 0 : avail / a.line_pitch() + 1;
}

void RenderSpec::validate() const {
  if (width <= 0 || height <= 0) throw ConfigError("synth: image size must be positive");
  if (margin < 0) throw ConfigError("synth: margin must be non-negative");
  if (max_rotation_deg < 0 || max_rotation_deg >= 45) throw ConfigError("synth: max_rotation_deg must lie in [0, 45)");
  if (max_translation_px < 0) throw ConfigError("synth: max_translation_px must be non-negative");
  if (min_background_luminance < 0 || min_background_luminance > 0.95)
    throw ConfigError("synth: min_background_luminance must lie in [0, 0.95]");
  const GlyphAtlas& a = GlyphAtlas::builtin();
  if (max_line_chars(a) < 1 || max_lines(a) < 1) throw ConfigError("synth: image too small for one glyph");
}

void RenderSpec::write(Config& c, const std::string& p) const {
  c.set(p + "width", std::to_string(width));
  c.set(p + "height", std::to_string(height));
  c.set(p + "margin", std::to_string(margin));
  c.set(p + "max_rotation_deg", format_real(max_rotation_deg));
  c.set(p + "max_translation_px", std::to_string(max_translation_px));
  c.set(p + "min_background_luminance", format_real(min_background_luminance));
}

RenderSpec RenderSpec::read(const Config& c, const std::string& p) {
  RenderSpec s;
  s.width = c.get_int(p + "width", s.width);
  s.height = c.get_int(p + "height", s.height);
  s.margin = c.get_int(p + "margin", s.margin);
  s.max_rotation_deg = c.get_real(p + "max_rotation_deg", s.max_rotation_deg);
  s.max_translation_px = c.get_int(p + "max_translation_px", s.max_translation_px);
  s.min_background_luminance = c.get_real(p + "min_background_luminance", s.min_background_luminance);
  return s;
}

std::string normalize_text(const std::string& text) {
  std::string out;
  bool space = false;
  for (char ch : text) {
    if (ch == ' ' || ch == '\t' || ch == '\n' || ch == '\r') {
      space = !out.empty();
    } else {
      if (space) out.push_back(' ');
      space = false;
      out.push_back(ch);
    }
  }
  return out;
}

std::vector<std::string> wrap_text(const std::string& text, int max_chars) {
  std::vector<std::string> lines;
  std::istringstream in(normalize_text(text));
  std::string word, line;
  while (in >> word) {
    if (static_cast<int>(word.size()) > max_chars)
      throw RejectionError(RejectionError::Reason::kOverflow,
                           "word '" + word + "' is longer than a line of " + std::to_string(max_chars) + " glyphs");
    if (line.empty()) {
      line = word;
    } else if (static_cast<int>(line.size() + 1 + word.size()) <= max_chars) {
      line += ' ' + word;
    } else {
      lines.push_back(line);
      line = word;
    }
  }
  if (!line.empty()) lines.push_back(line);
  return lines;
}

double luminance(Rgb c) { return (0.299 * c.r + 0.587 * c.g + 0.114 * c.b) / 255.0; }

Rgb sample_background(const RenderSpec& spec, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> chan(0, 255);
  for (;;) {
    Rgb c{static_cast<std::uint8_t>(chan(rng)), static_cast<std::uint8_t>(chan(rng)), static_cast<std::uint8_t>(chan(rng))};
    if (luminance(c) >= spec.min_background_luminance) return c;
  }
}

Placement sample_placement(const RenderSpec& spec, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Placement p;
  std::uniform_real_distribution<double> angle(-spec.max_rotation_deg, spec.max_rotation_deg);
  std::uniform_int_distribution<int> shift(-spec.max_translation_px, spec.max_translation_px);
  p.rotation_deg = spec.max_rotation_deg > 0 ? angle(rng) : 0.0;
  p.dx = shift(rng);
  p.dy = shift(rng);
  p.background = sample_background(spec, nn::mix_seed(seed, 0xb9));
  return p;
}

RenderedSample render_placed(const std::string& text, const RenderSpec& spec, const GlyphAtlas& atlas,
                             const Placement& placement) {
  spec.validate();
  RenderedSample out;
  out.text = normalize_text(text);
  if (out.text.empty()) throw ContractError("render: text is empty");
  for (char ch : out.text)
    if (!atlas.has(static_cast<unsigned char>(ch)))
      throw RejectionError(RejectionError::Reason::kUnknownGlyph,
                           "no glyph for byte " + byte_name(static_cast<unsigned char>(ch)));
  out.lines = wrap_text(out.text, spec.max_line_chars(atlas));
  if (static_cast<int>(out.lines.size()) > spec.max_lines(atlas))
    throw RejectionError(RejectionError::Reason::kOverflow, std::to_string(out.lines.size()) + " lines exceed the " +
                                                                std::to_string(spec.max_lines(atlas)) + " that fit");
  out.placement = placement;
  const int w = spec.width, h = spec.height;

  // Untransformed ink mask and tight per-line boxes.
  std::vector<double> mask(static_cast<std::size_t>(w) * h, 0.0);
  double bx0 = w, by0 = h, bx1 = 0, by1 = 0;
  for (std::size_t li = 0; li < out.lines.size(); ++li) {
    const std::string& line = out.lines[li];
    Box b{w, h, 0, 0};
    const int top = spec.margin + static_cast<int>(li) * atlas.line_pitch();
    for (std::size_t ci = 0; ci < line.size(); ++ci) {
      const Glyph& g = atlas.glyph(static_cast<unsigned char>(line[ci]));
      const int left = spec.margin + static_cast<int>(ci) * atlas.advance();
      for (int r = 0; r < atlas.mask_height(); ++r)
        for (int c = 0; c < atlas.mask_width(); ++c) {
          if (!g.ink(r, c)) continue;
          const int x = left + c, y = top + r;
          mask[static_cast<std::size_t>(y) * w + x] = 1.0;
          b.x_min = std::min(b.x_min, x);
          b.y_min = std::min(b.y_min, y);
          b.x_max = std::max(b.x_max, x + 1);
          b.y_max = std::max(b.y_max, y + 1);
        }
    }
    out.layout_boxes.push_back({line, b});
    bx0 = std::min<double>(bx0, b.x_min);
    by0 = std::min<double>(by0, b.y_min);
    bx1 = std::max<double>(bx1, b.x_max);
    by1 = std::max<double>(by1, b.y_max);
  }

  // Forward map: p = center + t + R (q - center). Pixels sample the mask at the
  // inverse image of their centers.
  const double cx = 0.5 * (bx0 + bx1), cy = 0.5 * (by0 + by1);
  const double th = placement.rotation_deg * kPi / 180.0;
  const double cs = std::cos(th), sn = std::sin(th);
  const double tx = placement.dx, ty = placement.dy;

  for (const TextBox& lb : out.layout_boxes) {
    const double xs[2] = {static_cast<double>(lb.box.x_min), static_cast<double>(lb.box.x_max)};
    const double ys[2] = {static_cast<double>(lb.box.y_min), static_cast<double>(lb.box.y_max)};
    double x0 = 1e300, y0 = 1e300, x1 = -1e300, y1 = -1e300;
    for (double qx : xs)
      for (double qy : ys) {
        const double px = cx + tx + cs * (qx - cx) - sn * (qy - cy);
        const double py = cy + ty + sn * (qx - cx) + cs * (qy - cy);
        x0 = std::min(x0, px);
        y0 = std::min(y0, py);
        x1 = std::max(x1, px);
        y1 = std::max(y1, py);
      }
    // Snap values within rounding noise of an integer before taking floor/ceil.
    auto snap = [](double v) { return std::abs(v - std::round(v)) < 1e-9 ? std::round(v) : v; };
    Box b{static_cast<int>(std::floor(snap(x0))), static_cast<int>(std::floor(snap(y0))),
          static_cast<int>(std::ceil(snap(x1))), static_cast<int>(std::ceil(snap(y1)))};
    if (b.x_min < 0 || b.y_min < 0 || b.x_max > w || b.y_max > h)
      throw RejectionError(RejectionError::Reason::kOverflow, "line '" + lb.text + "' leaves the image");
    out.boxes.push_back({lb.text, b});
  }

  out.image = Image::filled(w, h, placement.background);
  auto alpha_at = [&](double sx, double sy) {
    // sx, sy in mask index coordinates (pixel centers at integers).
    const double fx = std::floor(sx), fy = std::floor(sy);
    const int ix = static_cast<int>(fx), iy = static_cast<int>(fy);
    const double ax = sx - fx, ay = sy - fy;
    double v = 0;
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) {
        const int x = ix + dx, y = iy + dy;
        if (x < 0 || y < 0 || x >= w || y >= h) continue;
        const double wgt = (dx ? ax : 1 - ax) * (dy ? ay : 1 - ay);
        v += wgt * mask[static_cast<std::size_t>(y) * w + x];
      }
    return v;
  };
  const std::uint8_t bg[3] = {placement.background.r, placement.background.g, placement.background.b};
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double px = x + 0.5 - cx - tx, py = y + 0.5 - cy - ty;
      const double qx = cx + cs * px + sn * py, qy = cy - sn * px + cs * py;
      const double a = alpha_at(qx - 0.5, qy - 0.5);
      if (a <= 0) continue;
      for (int c = 0; c < 3; ++c)
        out.image.at(x, y, c) = static_cast<std::uint8_t>(std::lround(bg[c] * (1.0 - std::min(a, 1.0))));
    }
  return out;
}

RenderedSample render(const std::string& text, const RenderSpec& spec, const GlyphAtlas& atlas, std::uint64_t seed) {
  return render_placed(text, spec, atlas, sample_placement(spec, seed));
}

RenderedPair synth_pair(const std::string& src, const std::string& tgt, const RenderSpec& spec, const GlyphAtlas& atlas,
                        std::uint64_t seed) {
  Placement p = sample_placement(spec, seed);
  RenderedPair out;
  p.background = sample_background(spec, nn::mix_seed(seed, 1));
  out.src = render_placed(src, spec, atlas, p);
  p.background = sample_background(spec, nn::mix_seed(seed, 2));
  out.tgt = render_placed(tgt, spec, atlas, p);
  return out;
}

// ---------------------------------------------------------------- manifest

namespace {

nlohmann::json boxes_json(const std::vector<TextBox>& boxes) {
  nlohmann::json a = nlohmann::json::array();
  for (const TextBox& b : boxes)
    a.push_back({{"text", latin1_to_utf8(b.text)}, {"box", {b.box.x_min, b.box.y_min, b.box.x_max, b.box.y_max}}});
  return a;
}

std::vector<TextBox> boxes_from(const nlohmann::json& a) {
  std::vector<TextBox> out;
  for (const auto& e : a) {
    const auto& b = e.at("box");
    if (!b.is_array() || b.size() != 4) throw IoError("box must hold four integers");
    out.push_back({utf8_to_latin1(e.at("text").get<std::string>()),
                   {b[0].get<int>(), b[1].get<int>(), b[2].get<int>(), b[3].get<int>()}});
  }
  return out;
}

}  // namespace

std::string manifest_line(const ManifestRecord& r) {
  nlohmann::json j{{"id", r.id},
                   {"src_image_path", r.src_image_path},
                   {"tgt_image_path", r.tgt_image_path},
                   {"src_text", latin1_to_utf8(r.src_text)},
                   {"tgt_text", latin1_to_utf8(r.tgt_text)},
                   {"src_boxes", boxes_json(r.src_boxes)},
                   {"tgt_boxes", boxes_json(r.tgt_boxes)},
                   {"rotation_deg", r.rotation_deg},
                   {"translation_px", {r.translation_px.first, r.translation_px.second}}};
  return j.dump();
}

ManifestRecord parse_manifest_line(const std::string& line) {
  try {
    const auto j = nlohmann::json::parse(line);
    ManifestRecord r;
    r.id = j.at("id").get<std::string>();
    r.src_image_path = j.at("src_image_path").get<std::string>();
    r.tgt_image_path = j.at("tgt_image_path").get<std::string>();
    r.src_text = utf8_to_latin1(j.at("src_text").get<std::string>());
    r.tgt_text = utf8_to_latin1(j.at("tgt_text").get<std::string>());
    r.src_boxes = boxes_from(j.at("src_boxes"));
    r.tgt_boxes = boxes_from(j.at("tgt_boxes"));
    r.rotation_deg = j.at("rotation_deg").get<double>();
    const auto& t = j.at("translation_px");
    r.translation_px = {t.at(0).get<int>(), t.at(1).get<int>()};
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed manifest record: ") + e.what());
  } catch (const RangeError& e) {
    throw IoError(std::string("malformed manifest record: ") + e.what());
  }
}

void write_manifest(const fs::path& path, const std::vector<ManifestRecord>& records) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write " + tmp.string());
    for (const ManifestRecord& r : records) out << manifest_line(r) << '\n';
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::vector<ManifestRecord> read_manifest(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open manifest " + path.string());
  std::vector<ManifestRecord> out;
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(parse_manifest_line(line));
    } catch (const IoError& e) {
      throw IoError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------- dataset

double DatasetSummary::rejection_rate() const {
  const int rej = rejected_overflow + rejected_glyph;
  const int total = train + valid + test + rej;
  return total ? static_cast<double>(rej) / total : 0.0;
}

ParallelCorpus read_parallel_corpus(const fs::path& path, int* skipped) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open corpus " + path.string());
  ParallelCorpus out;
  int bad = 0;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos) {
      ++bad;
      continue;
    }
    try {
      std::string s = normalize_text(utf8_to_latin1(line.substr(0, tab)));
      std::string t = normalize_text(utf8_to_latin1(line.substr(tab + 1)));
      if (s.empty() || t.empty()) {
        ++bad;
        continue;
      }
      out.emplace_back(std::move(s), std::move(t));
    } catch (const RangeError&) {
      ++bad;
    }
  }
  if (skipped) *skipped = bad;
  return out;
}

DatasetSummary build_dataset(const ParallelCorpus& corpus, const RenderSpec& spec, const SplitRatios& ratios,
                             std::uint64_t seed, const fs::path& out_dir, const GlyphAtlas& atlas) {
  spec.validate();
  if (ratios.train < 0 || ratios.valid < 0 || ratios.test < 0 || ratios.train + ratios.valid + ratios.test <= 0)
    throw ConfigError("synth: split ratios must be non-negative and not all zero");
  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  if (ec) throw IoError("cannot create " + (out_dir / "images").string() + ": " + ec.message());

  const int n = static_cast<int>(corpus.size());
  std::vector<std::optional<ManifestRecord>> recs(n);
  std::vector<int> reason(n, -1);
  std::vector<std::string> errors(n);
  const int width = std::max(6, static_cast<int>(std::to_string(std::max(n - 1, 0)).size()));

#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < n; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "%0*d", width, i);
    try {
      const RenderedPair p = synth_pair(corpus[i].first, corpus[i].second, spec, atlas, nn::mix_seed(seed, i));
      ManifestRecord r;
      r.id = id;
      r.src_image_path = "images/" + r.id + "_src.png";
      r.tgt_image_path = "images/" + r.id + "_tgt.png";
      r.src_text = p.src.text;
      r.tgt_text = p.tgt.text;
      r.src_boxes = p.src.boxes;
      r.tgt_boxes = p.tgt.boxes;
      r.rotation_deg = p.src.placement.rotation_deg;
      r.translation_px = {p.src.placement.dx, p.src.placement.dy};
      write_png(out_dir / r.src_image_path, p.src.image);
      write_png(out_dir / r.tgt_image_path, p.tgt.image);
      recs[i] = std::move(r);
    } catch (const RejectionError& e) {
      reason[i] = e.reason == RejectionError::Reason::kOverflow ? 0 : 1;
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  }
  for (const std::string& e : errors)
    if (!e.empty()) throw IoError(e);

  DatasetSummary sum;
  std::vector<int> kept;
  for (int i = 0; i < n; ++i) {
    if (recs[i]) kept.push_back(i);
    else if (reason[i] == 0) ++sum.rejected_overflow;
    else ++sum.rejected_glyph;
  }
  std::mt19937_64 rng(nn::mix_seed(seed, 0x5917));
  std::shuffle(kept.begin(), kept.end(), rng);
  const double total = ratios.train + ratios.valid + ratios.test;
  const int m = static_cast<int>(kept.size());
  const int n_train = static_cast<int>(std::lround(m * ratios.train / total));
  const int n_valid = std::min(m - n_train, static_cast<int>(std::lround(m * ratios.valid / total)));
  std::vector<int> parts[3];
  for (int k = 0; k < m; ++k) parts[k < n_train ? 0 : k < n_train + n_valid ? 1 : 2].push_back(kept[k]);
  const char* names[3] = {"train", "valid", "test"};
  for (int s = 0; s < 3; ++s) {
    std::sort(parts[s].begin(), parts[s].end());
    std::vector<ManifestRecord> rs;
    for (int i : parts[s]) rs.push_back(*recs[i]);
    write_manifest(out_dir / (std::string("manifest.") + names[s] + ".jsonl"), rs);
  }
  sum.train = static_cast<int>(parts[0].size());
  sum.valid = static_cast<int>(parts[1].size());
  sum.test = static_cast<int>(parts[2].size());
  return sum;
}

// ---------------------------------------------------------------- toy corpus

namespace {

struct Noun {
  const char* de;
  const char* article;
  const char* en;
};

// Latin-1 byte strings.
const Noun kNouns[] = {
    {"hund", "der", "dog"},     {"katze", "die", "cat"},   {"haus", "das", "house"},  {"baum", "der", "tree"},
    {"t\xfcr", "die", "door"},  {"buch", "das", "book"},   {"blume", "die", "flower"}, {"vogel", "der", "bird"},
    {"stuhl", "der", "chair"},  {"tisch", "der", "table"}, {"auto", "das", "car"},    {"boot", "das", "boat"},
    {"maus", "die", "mouse"},   {"fisch", "der", "fish"},  {"br\xfc""cke", "die", "bridge"}, {"see", "der", "lake"},
};

struct Adj {
  const char* de;
  const char* en;
};

const Adj kAdjs[] = {
    {"klein", "small"}, {"gro\xdf", "big"},  {"rot", "red"},  {"gr\xfcn", "green"}, {"alt", "old"},
    {"neu", "new"},     {"sch\xf6n", "nice"}, {"blau", "blue"}, {"m\xfc""de", "tired"}, {"kalt", "cold"},
};

const Adj kVerbs[] = {{"ist", "is"}, {"war", "was"}};

}  // namespace

ParallelCorpus toy_parallel_corpus(int count, std::uint64_t seed) {
  if (count < 0) throw ConfigError("toy corpus: negative count");
  const int nn_ = std::size(kNouns), na = std::size(kAdjs), nv = std::size(kVerbs);
  const int combos = nn_ * na * nv * 2;
  std::vector<int> order(combos);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  ParallelCorpus out;
  for (int i = 0; i < count; ++i) {
    int k = order[i % combos];
    const bool very = k % 2;
    k /= 2;
    const Adj& v = kVerbs[k % nv];
    k /= nv;
    const Adj& a = kAdjs[k % na];
    const Noun& n = kNouns[k / na];
    std::string de = std::string(n.article) + " " + n.de + " " + v.de + (very ? " sehr " : " ") + a.de;
    std::string en = std::string("the ") + n.en + " " + v.en + (very ? " very " : " ") + a.en;
    out.emplace_back(std::move(de), std::move(en));
  }
  return out;
}

}  // namespace iimt
