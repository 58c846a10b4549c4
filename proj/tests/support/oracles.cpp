#include "oracles.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <sstream>

namespace iimt::testing {

std::vector<std::string> words(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ' ' || c == '\t' || c == '\n') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

double brute_bleu(const std::vector<std::string>& hyps, const std::vector<std::string>& refs) {
  double match[4] = {0, 0, 0, 0}, total[4] = {0, 0, 0, 0};
  double c = 0, r = 0;
  for (std::size_t s = 0; s < hyps.size(); ++s) {
    const auto h = words(hyps[s]), f = words(refs[s]);
    c += h.size();
    r += f.size();
    for (int n = 1; n <= 4; ++n) {
      std::map<std::string, int> hc, rc;
      auto key = [n](const std::vector<std::string>& w, std::size_t i) {
        std::string k;
        for (int j = 0; j < n; ++j) k += w[i + j] + '\x01';
        return k;
      };
      for (std::size_t i = 0; i + n <= h.size(); ++i) hc[key(h, i)]++;
      for (std::size_t i = 0; i + n <= f.size(); ++i) rc[key(f, i)]++;
      for (const auto& [g, k] : hc) {
        total[n - 1] += k;
        const auto it = rc.find(g);
        match[n - 1] += std::min(k, it == rc.end() ? 0 : it->second);
      }
    }
  }
  if (c == 0) return 0;
  double prod = 1;
  for (int n = 0; n < 4; ++n) {
    if (match[n] == 0) return 0;
    prod *= match[n] / total[n];
  }
  const double bp = c >= r ? 1.0 : std::exp(1 - r / c);
  return 100 * bp * std::pow(prod, 0.25);
}

double direct_ssim(const Image& a, const Image& b) {
  const double c1 = (0.01 * 255) * (0.01 * 255), c2 = (0.03 * 255) * (0.03 * 255);
  double acc = 0;
  for (int ch = 0; ch < 3; ++ch)
    for (int y = 0; y < a.height; ++y)
      for (int x = 0; x < a.width; ++x) {
        double ws = 0, mx = 0, my = 0;
        for (int dy = -5; dy <= 5; ++dy)
          for (int dx = -5; dx <= 5; ++dx) {
            const int xx = x + dx, yy = y + dy;
            if (xx < 0 || yy < 0 || xx >= a.width || yy >= a.height) continue;
            const double w = std::exp(-(dx * dx + dy * dy) / (2 * 1.5 * 1.5));
            ws += w;
            mx += w * a.at(xx, yy, ch);
            my += w * b.at(xx, yy, ch);
          }
        mx /= ws;
        my /= ws;
        double vx = 0, vy = 0, cxy = 0;
        for (int dy = -5; dy <= 5; ++dy)
          for (int dx = -5; dx <= 5; ++dx) {
            const int xx = x + dx, yy = y + dy;
            if (xx < 0 || yy < 0 || xx >= a.width || yy >= a.height) continue;
            const double w = std::exp(-(dx * dx + dy * dy) / (2 * 1.5 * 1.5)) / ws;
            const double da = a.at(xx, yy, ch) - mx, db = b.at(xx, yy, ch) - my;
            vx += w * da * da;
            vy += w * db * db;
            cxy += w * da * db;
          }
        acc += (2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
      }
  return acc / (3.0 * a.width * a.height);
}

int recursive_edit_distance(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  std::map<std::pair<std::size_t, std::size_t>, int> memo;
  std::function<int(std::size_t, std::size_t)> go = [&](std::size_t i, std::size_t j) -> int {
    if (i == a.size()) return static_cast<int>(b.size() - j);
    if (j == b.size()) return static_cast<int>(a.size() - i);
    const auto k = std::make_pair(i, j);
    if (auto it = memo.find(k); it != memo.end()) return it->second;
    int best = go(i + 1, j + 1) + (a[i] == b[j] ? 0 : 1);
    best = std::min(best, go(i + 1, j) + 1);
    best = std::min(best, go(i, j + 1) + 1);
    return memo[k] = best;
  };
  return go(0, 0);
}

int nearest_row(const std::vector<double>& v, const std::vector<double>& codebook, int dim) {
  int best = -1;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k * dim < codebook.size(); ++k) {
    double d = 0;
    for (int j = 0; j < dim; ++j) d += (v[j] - codebook[k * dim + j]) * (v[j] - codebook[k * dim + j]);
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(k);
    }
  }
  return best;
}

double row_cross_entropy(const std::vector<double>& logits, int target, double smoothing) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double l : logits) mx = std::max(mx, l);
  double z = 0;
  for (double l : logits) z += std::exp(l - mx);
  const double lse = mx + std::log(z);
  const double v = static_cast<double>(logits.size());
  double loss = 0;
  for (std::size_t k = 0; k < logits.size(); ++k) {
    const double q = (static_cast<int>(k) == target ? 1 - smoothing : 0) + smoothing / v;
    loss -= q * (logits[k] - lse);
  }
  return loss;
}

}  // namespace iimt::testing
