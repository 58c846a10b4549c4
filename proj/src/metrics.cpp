#include "iimt/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

#include "iimt/errors.hpp"
#include "iimt/ocr.hpp"

namespace iimt {

double iou(const Box& a, const Box& b) {
  const long long ix = std::max(0, std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min));
  const long long iy = std::max(0, std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min));
  const long long inter = ix * iy;
  const long long uni = a.area() + b.area() - inter;
  return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

BleuStats& BleuStats::operator+=(const BleuStats& o) {
  for (int n = 0; n < 4; ++n) {
    matches[n] += o.matches[n];
    totals[n] += o.totals[n];
  }
  hyp_len += o.hyp_len;
  ref_len += o.ref_len;
  return *this;
}

double BleuStats::score() const {
  if (hyp_len == 0) return 0.0;
  double log_p = 0;
  for (int n = 0; n < 4; ++n) {
    if (matches[n] == 0 || totals[n] == 0) return 0.0;
    log_p += std::log(static_cast<double>(matches[n]) / static_cast<double>(totals[n]));
  }
  const double bp = hyp_len < ref_len ? std::exp(1.0 - static_cast<double>(ref_len) / hyp_len) : 1.0;
  return 100.0 * bp * std::exp(log_p / 4.0);
}

BleuStats bleu_stats(const std::string& hypothesis, const std::string& reference) {
  const auto h = split_words(hypothesis), r = split_words(reference);
  BleuStats s;
  s.hyp_len = static_cast<long long>(h.size());
  s.ref_len = static_cast<long long>(r.size());
  for (int n = 1; n <= 4; ++n) {
    std::map<std::vector<std::string>, long long> ref_counts, hyp_counts;
    for (std::size_t i = 0; i + n <= r.size(); ++i) ++ref_counts[{r.begin() + i, r.begin() + i + n}];
    for (std::size_t i = 0; i + n <= h.size(); ++i) ++hyp_counts[{h.begin() + i, h.begin() + i + n}];
    long long m = 0, t = 0;
    for (const auto& [g, c] : hyp_counts) {
      t += c;
      auto it = ref_counts.find(g);
      if (it != ref_counts.end()) m += std::min(c, it->second);
    }
    s.matches[n - 1] = m;
    s.totals[n - 1] = t;
  }
  return s;
}

double corpus_bleu(const std::vector<std::string>& hyps, const std::vector<std::string>& refs) {
  if (hyps.size() != refs.size())
    throw ContractError("bleu: " + std::to_string(hyps.size()) + " hypotheses vs " + std::to_string(refs.size()) +
                        " references");
  if (hyps.empty()) throw UndefinedScoreError("bleu: empty corpus");
  BleuStats total;
  for (std::size_t i = 0; i < hyps.size(); ++i) total += bleu_stats(hyps[i], refs[i]);
  return total.score();
}

std::vector<MatchedPair> match_boxes(const std::vector<TextBox>& hyps, const std::vector<TextBox>& refs,
                                     double threshold) {
  std::vector<MatchedPair> out;
  for (std::size_t h = 0; h < hyps.size(); ++h) {
    int best = -1;
    double best_iou = -1;
    for (std::size_t r = 0; r < refs.size(); ++r) {
      const double v = iou(hyps[h].box, refs[r].box);
      if (v > best_iou) {
        best_iou = v;
        best = static_cast<int>(r);
      }
    }
    if (best >= 0 && best_iou >= threshold) out.push_back({static_cast<int>(h), best, best_iou});
  }
  return out;
}

StructureSegment structure_segment(const std::vector<TextBox>& hyps, const std::vector<TextBox>& refs,
                                   double threshold) {
  auto pairs = match_boxes(hyps, refs, threshold);
  // Reading order of the hypothesis boxes.
  std::stable_sort(pairs.begin(), pairs.end(), [&](const MatchedPair& a, const MatchedPair& b) {
    const Box& x = hyps[a.hyp].box;
    const Box& y = hyps[b.hyp].box;
    return x.y_min != y.y_min ? x.y_min < y.y_min : x.x_min < y.x_min;
  });
  StructureSegment s;
  std::vector<bool> ref_used(refs.size(), false);
  for (const MatchedPair& p : pairs) {
    if (!s.hypothesis.empty()) {
      s.hypothesis.push_back(' ');
      s.reference.push_back(' ');
    }
    s.hypothesis += hyps[p.hyp].text;
    s.reference += refs[p.ref].text;
    ref_used[p.ref] = true;
  }
  s.matched = static_cast<int>(pairs.size());
  s.unmatched_hyps = static_cast<int>(hyps.size()) - s.matched;
  s.unmatched_refs = static_cast<int>(std::count(ref_used.begin(), ref_used.end(), false));
  return s;
}

StructureBleu structure_bleu_boxes(const std::vector<TextBox>& hyps, const std::vector<TextBox>& refs) {
  StructureBleu out;
  out.segment = structure_segment(hyps, refs);
  out.no_matches = out.segment.matched == 0;
  out.score = out.no_matches ? 0.0 : bleu_stats(out.segment.hypothesis, out.segment.reference).score();
  return out;
}

StructureBleu structure_bleu(const Image& generated, const Image& reference, const GlyphAtlas& atlas) {
  return structure_bleu_boxes(oracle_ocr(generated, atlas).boxes, oracle_ocr(reference, atlas).boxes);
}

double ssim(const Image& a, const Image& b) {
  if (a.width != b.width || a.height != b.height)
    throw ContractError("ssim: images are " + std::to_string(a.width) + "x" + std::to_string(a.height) + " and " +
                        std::to_string(b.width) + "x" + std::to_string(b.height));
  const int w = a.width, h = a.height;
  if (w == 0 || h == 0) throw ContractError("ssim: empty images");
  constexpr int kRadius = 5;
  constexpr double kSigma = 1.5;
  double g[2 * kRadius + 1];
  for (int k = -kRadius; k <= kRadius; ++k) g[k + kRadius] = std::exp(-(k * k) / (2 * kSigma * kSigma));
  const double c1 = std::pow(0.01 * 255, 2), c2 = std::pow(0.03 * 255, 2);

  // Separable weighted sums; a truncated window renormalizes by the product
  // of its row and column weight sums.
  auto blur = [&](const std::vector<double>& in) {
    std::vector<double> tmp(in.size()), out(in.size());
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double s = 0, ws = 0;
        for (int k = -kRadius; k <= kRadius; ++k) {
          const int xx = x + k;
          if (xx < 0 || xx >= w) continue;
          s += g[k + kRadius] * in[static_cast<std::size_t>(y) * w + xx];
          ws += g[k + kRadius];
        }
        tmp[static_cast<std::size_t>(y) * w + x] = s / ws;
      }
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double s = 0, ws = 0;
        for (int k = -kRadius; k <= kRadius; ++k) {
          const int yy = y + k;
          if (yy < 0 || yy >= h) continue;
          s += g[k + kRadius] * tmp[static_cast<std::size_t>(yy) * w + x];
          ws += g[k + kRadius];
        }
        out[static_cast<std::size_t>(y) * w + x] = s / ws;
      }
    return out;
  };

  const std::size_t n = static_cast<std::size_t>(w) * h;
  double total = 0;
  std::vector<double> x(n), y(n), xx(n), yy(n), xy(n);
  for (int c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = a.pixels[3 * i + c];
      y[i] = b.pixels[3 * i + c];
      xx[i] = x[i] * x[i];
      yy[i] = y[i] * y[i];
      xy[i] = x[i] * y[i];
    }
    const auto mx = blur(x), my = blur(y), mxx = blur(xx), myy = blur(yy), mxy = blur(xy);
    for (std::size_t i = 0; i < n; ++i) {
      const double vx = mxx[i] - mx[i] * mx[i], vy = myy[i] - my[i] * my[i], cxy = mxy[i] - mx[i] * my[i];
      total += ((2 * mx[i] * my[i] + c1) * (2 * cxy + c2)) / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
    }
  }
  return total / (3.0 * n);
}

int word_edit_distance(const std::vector<std::string>& hyp, const std::vector<std::string>& ref) {
  std::vector<int> prev(ref.size() + 1), cur(ref.size() + 1);
  std::iota(prev.begin(), prev.end(), 0);
  for (std::size_t i = 1; i <= hyp.size(); ++i) {
    cur[0] = static_cast<int>(i);
    for (std::size_t j = 1; j <= ref.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (hyp[i - 1] == ref[j - 1] ? 0 : 1)});
    std::swap(prev, cur);
  }
  return prev[ref.size()];
}

double wer(const std::string& hypothesis, const std::string& reference) {
  const auto r = split_words(reference);
  if (r.empty()) throw UndefinedScoreError("wer: empty reference");
  return static_cast<double>(word_edit_distance(split_words(hypothesis), r)) / static_cast<double>(r.size());
}

}  // namespace iimt
