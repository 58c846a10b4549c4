#include "iimt/ocr.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

namespace iimt {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kInk = 0.5;  // darkness above which a pixel counts as ink
constexpr int kSweepDeg = 10;  // coarse skew candidates every 2 degrees in [-10, 10]

double lum(double r, double g, double b) { return 0.299 * r + 0.587 * g + 0.114 * b; }

double bilinear(const std::vector<double>& d, int w, int h, double x, double y) {
  const double fx = std::floor(x), fy = std::floor(y);
  const int ix = static_cast<int>(fx), iy = static_cast<int>(fy);
  const double ax = x - fx, ay = y - fy;
  double v = 0;
  for (int dy = 0; dy < 2; ++dy)
    for (int dx = 0; dx < 2; ++dx) {
      const int xx = ix + dx, yy = iy + dy;
      if (xx < 0 || yy < 0 || xx >= w || yy >= h) continue;
      v += (dx ? ax : 1 - ax) * (dy ? ay : 1 - ay) * d[static_cast<std::size_t>(yy) * w + xx];
    }
  return v;
}

struct Frame {
  double cx, cy, cs, sn;
  // Derotated (layout) coordinates to image coordinates.
  void to_image(double u, double v, double& x, double& y) const {
    x = cx + cs * (u - cx) - sn * (v - cy);
    y = cy + sn * (u - cx) + cs * (v - cy);
  }
  void to_layout(double x, double y, double& u, double& v) const {
    u = cx + cs * (x - cx) + sn * (y - cy);
    v = cy - sn * (x - cx) + cs * (y - cy);
  }
};

struct Templates {
  int cells;                         // pixels per pitch cell (mask plus gaps)
  std::vector<unsigned char> codes;  // glyph byte per template
  std::vector<double> masks;         // [glyphs, cells]
  std::vector<double> norms;         // squared mask norms
};

Templates make_templates(const GlyphAtlas& atlas) {
  Templates t;
  t.cells = atlas.advance() * atlas.line_pitch();
  for (const Glyph& g : atlas.glyphs()) {
    t.codes.push_back(g.code);
    for (int r = 0; r < atlas.line_pitch(); ++r)
      for (int c = 0; c < atlas.advance(); ++c)
        t.masks.push_back(r < atlas.mask_height() && c < atlas.mask_width() && g.ink(r, c) ? 1.0 : 0.0);
    t.norms.push_back(g.ink_count());
  }
  return t;
}

struct Grid {
  int row0, row1, col0, col1;  // cell index ranges, half-open
};

struct Reader {
  const std::vector<double>& dark;
  int w, h;
  Frame f;
  const GlyphAtlas& atlas;
  const Templates& tpl;
  double umin, umax, vmin, vmax;  // ink bounds in layout coordinates

  Grid grid(double ox, double oy) const {
    const int ax = atlas.advance(), py = atlas.line_pitch();
    return {static_cast<int>(std::floor((vmin - 0.5 - oy) / py)), static_cast<int>(std::floor((vmax + 0.5 - oy) / py)) + 1,
            static_cast<int>(std::floor((umin - 0.5 - ox) / ax)), static_cast<int>(std::floor((umax + 0.5 - ox) / ax)) + 1};
  }

  void sample(double ox, double oy, int i, int j, double* out) const {
    const double u0 = ox + j * atlas.advance(), v0 = oy + i * atlas.line_pitch();
    int k = 0;
    for (int r = 0; r < atlas.line_pitch(); ++r)
      for (int c = 0; c < atlas.advance(); ++c) {
        double x, y;
        f.to_image(u0 + c + 0.5, v0 + r + 0.5, x, y);
        out[k++] = bilinear(dark, w, h, x - 0.5, y - 0.5);
      }
  }

  // Sum over cells of the best template SSD; lower is a better alignment.
  double score(double ox, double oy) const {
    const Grid g = grid(ox, oy);
    std::vector<double> s(tpl.cells);
    double total = 0;
    for (int i = g.row0; i < g.row1; ++i)
      for (int j = g.col0; j < g.col1; ++j) {
        sample(ox, oy, i, j, s.data());
        double ss = 0;
        for (double v : s) ss += v * v;
        // |s - m|^2 = |s|^2 + |m|^2 - 2 s.m
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t t = 0; t < tpl.codes.size(); ++t) {
          const double* m = tpl.masks.data() + t * tpl.cells;
          double dot = 0;
          for (int k = 0; k < tpl.cells; ++k) dot += s[k] * m[k];
          best = std::min(best, tpl.norms[t] - 2 * dot);
        }
        total += ss + best;
      }
    return total;
  }

  struct CellPixel {
    double dark, a, b;  // observed darkness; position relative to the glyph mask
  };

  // Image pixels grouped by the pitch cell their centers fall into (layout
  // coordinates), for cells of the grid.
  std::vector<std::vector<CellPixel>> cell_pixels(double ox, double oy, const Grid& g) const {
    const int nc = g.col1 - g.col0;
    std::vector<std::vector<CellPixel>> out(static_cast<std::size_t>(g.row1 - g.row0) * nc);
    const int ax = atlas.advance(), py = atlas.line_pitch();
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double u, v;
        f.to_layout(x + 0.5, y + 0.5, u, v);
        const int j = static_cast<int>(std::floor((u - ox + 0.5) / ax));
        const int i = static_cast<int>(std::floor((v - oy + 0.5) / py));
        if (i < g.row0 || i >= g.row1 || j < g.col0 || j >= g.col1) continue;
        out[static_cast<std::size_t>(i - g.row0) * nc + (j - g.col0)].push_back(
            {dark[static_cast<std::size_t>(y) * w + x], u - ox - ax * j - 0.5, v - oy - py * i - 0.5});
      }
    return out;
  }

  // Darkness the renderer would produce for template t at mask position (a, b).
  double rendered(std::size_t t, double a, double b) const {
    const int ax = atlas.advance(), py = atlas.line_pitch();
    const double* m = tpl.masks.data() + t * tpl.cells;
    const double fa = std::floor(a), fb = std::floor(b);
    const int c0 = static_cast<int>(fa), r0 = static_cast<int>(fb);
    const double wa = a - fa, wb = b - fb;
    double v = 0;
    for (int dr = 0; dr < 2; ++dr)
      for (int dc = 0; dc < 2; ++dc) {
        const int r = r0 + dr, c = c0 + dc;
        if (r < 0 || c < 0 || r >= py || c >= ax) continue;
        v += (dc ? wa : 1 - wa) * (dr ? wb : 1 - wb) * m[r * ax + c];
      }
    return v;
  }

  double rendered_ssd(const std::vector<CellPixel>& px, std::size_t t) const {
    double e = 0;
    for (const CellPixel& p : px) {
      const double r = rendered(t, p.a, p.b);
      e += (p.dark - r) * (p.dark - r);
    }
    return e;
  }

  // Template whose rendering best matches the cell: Hamming distance
  // generalized to fractional coverage (sum of absolute differences, equal to
  // the binary Hamming distance on unrotated renderings), ties broken by SSD,
  // then by lower byte.
  int classify_rendered(const std::vector<CellPixel>& px) const {
    int best = 0;
    double best_l1 = std::numeric_limits<double>::infinity(), best_ssd = best_l1;
    for (std::size_t t = 0; t < tpl.codes.size(); ++t) {
      double l1 = 0, e = 0;
      for (const CellPixel& p : px) {
        const double r = rendered(t, p.a, p.b);
        l1 += std::abs(p.dark - r);
        e += (p.dark - r) * (p.dark - r);
      }
      if (l1 < best_l1 - 1e-9 || (l1 <= best_l1 + 1e-9 && e < best_ssd)) {
        best = static_cast<int>(t);
        best_l1 = l1;
        best_ssd = e;
      }
    }
    return best;
  }
};

}  // namespace

std::string OcrResult::text() const {
  std::string s;
  for (const TextBox& b : boxes) {
    if (!s.empty()) s.push_back(' ');
    s += b.text;
  }
  return s;
}

std::vector<double> darkness_map(const Image& img) {
  const std::size_t n = static_cast<std::size_t>(img.width) * img.height;
  std::vector<double> d(n, 0.0);
  if (n == 0) return d;
  std::map<std::uint32_t, std::size_t> counts;
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* p = img.pixels.data() + 3 * i;
    ++counts[(static_cast<std::uint32_t>(p[0]) << 16) | (p[1] << 8) | p[2]];
  }
  std::uint32_t mode = 0;
  std::size_t best = 0;
  for (const auto& [k, c] : counts)
    if (c > best) {
      best = c;
      mode = k;
    }
  double br, bg, bb;
  if (best * 5 >= n) {
    br = (mode >> 16) & 0xFF;
    bg = (mode >> 8) & 0xFF;
    bb = mode & 0xFF;
  } else {
    double med[3];
    std::vector<std::uint8_t> ch(n);
    for (int c = 0; c < 3; ++c) {
      for (std::size_t i = 0; i < n; ++i) ch[i] = img.pixels[3 * i + c];
      std::nth_element(ch.begin(), ch.begin() + n / 2, ch.end());
      med[c] = ch[n / 2];
    }
    br = med[0];
    bg = med[1];
    bb = med[2];
  }
  const double lb = lum(br, bg, bb);
  if (lb <= 0) return d;
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* p = img.pixels.data() + 3 * i;
    d[i] = std::clamp(1.0 - lum(p[0], p[1], p[2]) / lb, 0.0, 1.0);
  }
  return d;
}

double estimate_skew(const std::vector<double>& dark, int w, int h) {
  struct Pt {
    double x, y, m;
  };
  std::vector<Pt> pts;
  const double cx = 0.5 * w, cy = 0.5 * h;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double m = dark[static_cast<std::size_t>(y) * w + x];
      if (m > 0.05) pts.push_back({x + 0.5 - cx, y + 0.5 - cy, m});
    }
  if (pts.empty()) return 0.0;
  const double reach = std::hypot(w, h);
  const int nbins = static_cast<int>(std::ceil(reach)) + 4;
  std::vector<double> prof(nbins);
  auto energy = [&](double deg) {
    const double t = deg * kPi / 180.0, cs = std::cos(t), sn = std::sin(t);
    std::fill(prof.begin(), prof.end(), 0.0);
    for (const Pt& p : pts) {
      const double v = -sn * p.x + cs * p.y + 0.5 * nbins;
      const double fv = std::floor(v);
      const int b = static_cast<int>(fv);
      const double a = v - fv;
      prof[b] += (1 - a) * p.m;
      prof[b + 1] += a * p.m;
    }
    double e = 0;
    for (double v : prof) e += v * v;
    return e;
  };
  double best = 0, best_e = -1;
  auto consider = [&](double deg) {
    const double e = energy(deg);
    if (e > best_e * (1 + 1e-12) || (e >= best_e * (1 - 1e-12) && std::abs(deg) < std::abs(best))) {
      best = deg;
      best_e = e;
    }
  };
  for (int k = -20; k <= 20; ++k) consider(0.5 * k);
  const double coarse = best;
  for (int k = -10; k <= 10; ++k) consider(coarse + 0.05 * k);
  return best;
}

OcrResult oracle_ocr(const Image& img, const GlyphAtlas& atlas) {
  OcrResult res;
  const int w = img.width, h = img.height;
  const std::vector<double> dark = darkness_map(img);
  bool any = false;
  for (double v : dark) any = any || v > kInk;
  if (!any) return res;

  const Templates tpl = make_templates(atlas);
  // Rotate about the center of the ink so angle and grid origin stay nearly
  // independent during the search.
  double ix0 = w, iy0 = h, ix1 = 0, iy1 = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (dark[static_cast<std::size_t>(y) * w + x] > kInk) {
        ix0 = std::min<double>(ix0, x);
        iy0 = std::min<double>(iy0, y);
        ix1 = std::max<double>(ix1, x + 1);
        iy1 = std::max<double>(iy1, y + 1);
      }
  const double pcx = 0.5 * (ix0 + ix1), pcy = 0.5 * (iy0 + iy1);
  auto make_reader = [&](double deg) {
    const double t = deg * kPi / 180.0;
    Reader rd{dark, w, h, Frame{pcx, pcy, std::cos(t), std::sin(t)}, atlas, tpl, 1e300, -1e300, 1e300, -1e300};
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        if (dark[static_cast<std::size_t>(y) * w + x] <= kInk) continue;
        double u, v;
        rd.f.to_layout(x + 0.5, y + 0.5, u, v);
        rd.umin = std::min(rd.umin, u);
        rd.umax = std::max(rd.umax, u);
        rd.vmin = std::min(rd.vmin, v);
        rd.vmax = std::max(rd.vmax, v);
      }
    return rd;
  };
  struct Fit {
    double deg, ox, oy, score;
  };
  // Best grid origin among candidates for one skew angle.
  auto fit = [&](double deg, const std::vector<std::pair<double, double>>& cands) {
    const Reader rd = make_reader(deg);
    std::vector<double> sc(cands.size());
#pragma omp parallel for schedule(dynamic)
    for (std::size_t k = 0; k < cands.size(); ++k) sc[k] = rd.score(cands[k].first, cands[k].second);
    std::size_t best = 0;
    for (std::size_t k = 1; k < cands.size(); ++k)
      if (sc[k] < sc[best]) best = k;
    return Fit{deg, cands[best].first, cands[best].second, sc[best]};
  };
  auto around = [](double ox, double oy, int reach, double step) {
    std::vector<std::pair<double, double>> c;
    for (int a = -reach; a <= reach; ++a)
      for (int b = -reach; b <= reach; ++b) c.emplace_back(ox + step * b, oy + step * a);
    return c;
  };

  // Projection skew is unreliable on a few glyphs of one line, so coarse
  // angles compete with it under a coarse template fit; the two best go on to
  // a half-pixel origin search over one cell period.
  const double skew = estimate_skew(dark, w, h);
  std::vector<std::pair<double, double>> coarse, period;
  for (int a = 0; a < atlas.line_pitch(); ++a)
    for (int b = 0; b < atlas.advance(); ++b) coarse.emplace_back(b, a);
  for (int a = 0; a < 2 * atlas.line_pitch(); ++a)
    for (int b = 0; b < 2 * atlas.advance(); ++b) period.emplace_back(0.5 * b, 0.5 * a);
  std::vector<Fit> starts{fit(skew, coarse)};
  for (int k = -kSweepDeg; k <= kSweepDeg; k += 2) starts.push_back(fit(k, coarse));
  std::stable_sort(starts.begin(), starts.end(), [](const Fit& a, const Fit& b) { return a.score < b.score; });
  Fit best = fit(starts[0].deg, period);
  const Fit second = fit(starts[1].deg, period);
  if (second.score < best.score) best = second;
  best = fit(best.deg, around(best.ox, best.oy, 4, 0.125));

  // Final pose polish against the exact rendering model: per-cell SSD to the
  // predicted appearance of a few candidate glyphs.
  std::map<std::pair<int, int>, std::vector<std::size_t>> shortlist;
  {
    const Reader rd = make_reader(best.deg);
    const Grid g = rd.grid(best.ox, best.oy);
    const auto cells = rd.cell_pixels(best.ox, best.oy, g);
    for (int i = g.row0; i < g.row1; ++i)
      for (int j = g.col0; j < g.col1; ++j) {
        const auto& px = cells[static_cast<std::size_t>(i - g.row0) * (g.col1 - g.col0) + (j - g.col0)];
        std::vector<std::pair<double, std::size_t>> e;
        for (std::size_t t = 0; t < tpl.codes.size(); ++t) e.emplace_back(rd.rendered_ssd(px, t), t);
        std::partial_sort(e.begin(), e.begin() + std::min<std::size_t>(6, e.size()), e.end());
        auto& lst = shortlist[{i, j}];
        for (std::size_t k = 0; k < std::min<std::size_t>(6, e.size()); ++k) lst.push_back(e[k].second);
      }
  }
  auto polish_score = [&](double deg, double ox, double oy) {
    const Reader rd = make_reader(deg);
    const Grid g = rd.grid(ox, oy);
    const auto cells = rd.cell_pixels(ox, oy, g);
    double total = 0;
    for (int i = g.row0; i < g.row1; ++i)
      for (int j = g.col0; j < g.col1; ++j) {
        const auto& px = cells[static_cast<std::size_t>(i - g.row0) * (g.col1 - g.col0) + (j - g.col0)];
        double m = std::numeric_limits<double>::infinity();
        auto it = shortlist.find({i, j});
        if (it != shortlist.end()) {
          for (std::size_t t : it->second) m = std::min(m, rd.rendered_ssd(px, t));
        } else {
          for (std::size_t t = 0; t < tpl.codes.size(); ++t) m = std::min(m, rd.rendered_ssd(px, t));
        }
        total += m;
      }
    return total;
  };
  auto pick = [&](std::vector<Fit> cands) {
#pragma omp parallel for schedule(dynamic)
    for (std::size_t k = 0; k < cands.size(); ++k) cands[k].score = polish_score(cands[k].deg, cands[k].ox, cands[k].oy);
    for (const Fit& c : cands)
      if (c.score < best.score) best = c;
  };
  best.score = polish_score(best.deg, best.ox, best.oy);
  // Coordinate descent: angle sweep, then a 2-D origin sweep, at shrinking steps.
  const struct {
    int na;
    double astep;
    double ostep;
  } scales[] = {{2, 0.1, 0.125}, {4, 0.025, 0.0625}, {2, 0.0125, 0.03125}};
  {
    // Joint angle/origin grid first; the projection skew can be off by a degree.
    const Fit start = best;
    std::vector<Fit> cands;
    for (int k = -8; k <= 8; ++k)
      for (int y = -1; y <= 1; ++y)
        for (int x = -1; x <= 1; ++x)
          if (k || x || y) cands.push_back({start.deg + 0.2 * k, start.ox + 0.25 * x, start.oy + 0.25 * y, 0});
    pick(cands);
  }
  for (const auto& sc : scales)
    for (int rep = 0; rep < 2; ++rep) {
      const Fit start = best;
      std::vector<Fit> cands;
      for (int k = -sc.na; k <= sc.na; ++k)
        if (k != 0) cands.push_back({start.deg + sc.astep * k, start.ox, start.oy, 0});
      pick(cands);
      const Fit mid = best;
      cands.clear();
      for (int y = -2; y <= 2; ++y)
        for (int x = -2; x <= 2; ++x)
          if (x || y) cands.push_back({mid.deg, mid.ox + sc.ostep * x, mid.oy + sc.ostep * y, 0});
      pick(cands);
    }

  res.angle_deg = best.deg;
  const Reader rd = make_reader(best.deg);
  const Frame& f = rd.f;
  const double ox = best.ox, oy = best.oy;

  const Grid g = rd.grid(ox, oy);
  const auto cells = rd.cell_pixels(ox, oy, g);
  for (int i = g.row0; i < g.row1; ++i) {
    std::string line;
    double u0 = 1e300, v0 = 1e300, u1 = -1e300, v1 = -1e300;
    for (int j = g.col0; j < g.col1; ++j) {
      const auto& px = cells[static_cast<std::size_t>(i - g.row0) * (g.col1 - g.col0) + (j - g.col0)];
      const Glyph& gl = atlas.glyph(tpl.codes[rd.classify_rendered(px)]);
      line.push_back(static_cast<char>(gl.code));
      const double cu = ox + j * atlas.advance(), cv = oy + i * atlas.line_pitch();
      for (int r = 0; r < atlas.mask_height(); ++r)
        for (int c = 0; c < atlas.mask_width(); ++c) {
          if (!gl.ink(r, c)) continue;
          u0 = std::min(u0, cu + c);
          u1 = std::max(u1, cu + c + 1);
          v0 = std::min(v0, cv + r);
          v1 = std::max(v1, cv + r + 1);
        }
    }
    line = normalize_text(line);
    if (line.empty()) continue;
    double x0 = 1e300, y0 = 1e300, x1 = -1e300, y1 = -1e300;
    for (double u : {u0, u1})
      for (double v : {v0, v1}) {
        double x, y;
        f.to_image(u, v, x, y);
        x0 = std::min(x0, x);
        y0 = std::min(y0, y);
        x1 = std::max(x1, x);
        y1 = std::max(y1, y);
      }
    auto snap = [](double v) { return std::abs(v - std::round(v)) < 1e-6 ? std::round(v) : v; };
    Box b{std::clamp(static_cast<int>(std::floor(snap(x0))), 0, w), std::clamp(static_cast<int>(std::floor(snap(y0))), 0, h),
          std::clamp(static_cast<int>(std::ceil(snap(x1))), 0, w), std::clamp(static_cast<int>(std::ceil(snap(y1))), 0, h)};
    if (!b.valid()) continue;
    res.boxes.push_back({line, b});
  }
  return res;
}

}  // namespace iimt
