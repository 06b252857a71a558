#pragma once

// Brute-force reference implementations used only by the tests. They are
// written independently of the library code they check.

#include <cstdint>
#include <random>
#include <vector>

#include "refcut/click_encoding.hpp"
#include "refcut/maskops.hpp"
#include "refcut/model.hpp"

namespace oracle {

using refcut::BitMask;

inline BitMask random_mask(int h, int w, double p, std::mt19937_64& rng) {
  BitMask m(h, w);
  std::bernoulli_distribution fg(p);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) m.set(r, c, fg(rng));
  return m;
}

/// Depth-first labelling; labels follow the row-major first pixel.
inline std::vector<int> flood_labels(const BitMask& m, bool eight, int* count) {
  const int h = m.height(), w = m.width();
  std::vector<int> lab(static_cast<std::size_t>(h) * w, 0);
  int next = 0;
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      if (!m.at(r, c) || lab[r * w + c]) continue;
      ++next;
      std::vector<std::pair<int, int>> stack{{r, c}};
      lab[r * w + c] = next;
      while (!stack.empty()) {
        auto [y, x] = stack.back();
        stack.pop_back();
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            if (dy == 0 && dx == 0) continue;
            if (!eight && dy != 0 && dx != 0) continue;
            const int ny = y + dy, nx = x + dx;
            if (ny < 0 || nx < 0 || ny >= h || nx >= w) continue;
            if (!m.at(ny, nx) || lab[ny * w + nx]) continue;
            lab[ny * w + nx] = next;
            stack.push_back({ny, nx});
          }
      }
    }
  *count = next;
  return lab;
}

/// Squared distance from each foreground pixel to the nearest background
/// pixel, counting the ring just outside the image as background.
inline std::int64_t brute_sq_dist(const BitMask& m, int r, int c) {
  const int h = m.height(), w = m.width();
  std::int64_t best = std::min<std::int64_t>({r + 1, h - r, c + 1, w - c});
  best *= best;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (!m.at(y, x)) {
        const std::int64_t d = std::int64_t(y - r) * (y - r) + std::int64_t(x - c) * (x - c);
        best = std::min(best, d);
      }
  return best;
}

/// Deepest pixel; ties go to the pixel nearest the centroid, then row-major.
inline refcut::Pixel brute_center(const BitMask& m) {
  const int h = m.height(), w = m.width();
  std::int64_t n = 0, sr = 0, sc = 0;
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      if (m.at(r, c)) ++n, sr += r, sc += c;
  refcut::Pixel best{-1, -1};
  std::int64_t best_d = -1, best_off = 0;
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      if (!m.at(r, c)) continue;
      const std::int64_t d = brute_sq_dist(m, r, c);
      const std::int64_t off = (n * r - sr) * (n * r - sr) + (n * c - sc) * (n * c - sc);
      if (d > best_d || (d == best_d && off < best_off)) {
        best = {r, c};
        best_d = d;
        best_off = off;
      }
    }
  return best;
}

struct ClickChoice {
  BitMask region;
  refcut::Click click;
};

inline ClickChoice brute_next_click(const BitMask& pred, const BitMask& gt, int order) {
  const int h = gt.height(), w = gt.width();
  BitMask err(h, w);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) err.set(r, c, pred.at(r, c) != gt.at(r, c));
  int count = 0;
  const auto lab = flood_labels(err, false, &count);
  std::vector<int> size(static_cast<std::size_t>(count) + 1, 0);
  for (int v : lab)
    if (v) ++size[v];
  int pick = 1;
  for (int l = 2; l <= count; ++l)
    if (size[l] > size[pick]) pick = l;
  ClickChoice out{BitMask(h, w), {}};
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) out.region.set(r, c, lab[r * w + c] == pick);
  const refcut::Pixel p = brute_center(out.region);
  out.click = {p.row, p.col,
               gt.at(p.row, p.col) ? refcut::Polarity::Positive : refcut::Polarity::Negative, order};
  return out;
}

/// Per-pixel loop form of the masked channel mean, in long double.
template <typename T>
std::vector<long double> masked_mean_loop(const refcut::nn::Matrix<T>& f,
                                          const std::vector<double>& m) {
  std::vector<long double> out(static_cast<std::size_t>(f.cols), 0.0L);
  long double total = 0;
  for (int x = 0; x < f.rows; ++x) total += m[static_cast<std::size_t>(x)];
  if (total == 0) return out;
  for (int ch = 0; ch < f.cols; ++ch) {
    long double acc = 0;
    for (int x = 0; x < f.rows; ++x) acc += static_cast<long double>(f(x, ch)) * m[static_cast<std::size_t>(x)];
    out[static_cast<std::size_t>(ch)] = acc / total;
  }
  return out;
}

}  // namespace oracle
