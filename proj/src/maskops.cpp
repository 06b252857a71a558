#include "refcut/maskops.hpp"

#include <algorithm>
#include <charconv>
#include <limits>
#include <numeric>

namespace refcut {

namespace {

void require_same_shape(const BitMask& a, const BitMask& b, const char* what) {
  if (!a.same_shape(b)) {
    throw MaskError(std::string(what) + ": dimension mismatch (" + std::to_string(a.height()) +
                    "x" + std::to_string(a.width()) + " vs " + std::to_string(b.height()) + "x" +
                    std::to_string(b.width()) + ")");
  }
}

void require_valid_dims(int h, int w) {
  if (h < 1 || w < 1) {
    throw MaskError("mask dimensions must be at least 1x1, got " + std::to_string(h) + "x" +
                    std::to_string(w));
  }
}

}  // namespace

BitMask::BitMask(int height, int width) : height_(height), width_(width) {
  require_valid_dims(height, width);
  data_.assign(static_cast<std::size_t>(height) * width, 0);
}

BitMask BitMask::full(int height, int width) {
  BitMask m(height, width);
  std::fill(m.data_.begin(), m.data_.end(), 1);
  return m;
}

std::size_t BitMask::count() const {
  return static_cast<std::size_t>(std::count(data_.begin(), data_.end(), std::uint8_t{1}));
}

bool BitMask::any() const {
  return std::any_of(data_.begin(), data_.end(), [](std::uint8_t v) { return v != 0; });
}

BitMask BitMask::operator|(const BitMask& o) const {
  BitMask r = *this;
  r |= o;
  return r;
}

BitMask& BitMask::operator|=(const BitMask& o) {
  require_same_shape(*this, o, "union");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] |= o.data_[i];
  return *this;
}

BitMask BitMask::operator&(const BitMask& o) const {
  require_same_shape(*this, o, "intersection");
  BitMask r = *this;
  for (std::size_t i = 0; i < data_.size(); ++i) r.data_[i] &= o.data_[i];
  return r;
}

BitMask BitMask::operator^(const BitMask& o) const {
  require_same_shape(*this, o, "xor");
  BitMask r = *this;
  for (std::size_t i = 0; i < data_.size(); ++i) r.data_[i] ^= o.data_[i];
  return r;
}

SoftMask::SoftMask(int height, int width, double fill) : height_(height), width_(width) {
  require_valid_dims(height, width);
  data_.assign(static_cast<std::size_t>(height) * width, fill);
}

SoftMask::SoftMask(const BitMask& m) : height_(m.height()), width_(m.width()) {
  data_.resize(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) data_[i] = m[i];
}

double SoftMask::sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }

BitMask SoftMask::threshold(double t) const {
  BitMask m(height_, width_);
  for (std::size_t i = 0; i < data_.size(); ++i) m.set_flat(i, data_[i] >= t);
  return m;
}

BitMask LabeledRegions::region(int label) const {
  BitMask m(height, width);
  for (std::size_t i = 0; i < labels.size(); ++i) m.set_flat(i, labels[i] == label);
  return m;
}

std::vector<std::size_t> LabeledRegions::sizes() const {
  std::vector<std::size_t> s(static_cast<std::size_t>(count) + 1, 0);
  for (auto l : labels) ++s[static_cast<std::size_t>(l)];
  return s;
}

namespace maskops {

double iou(const BitMask& a, const BitMask& b) {
  require_same_shape(a, b, "iou");
  std::size_t inter = 0, uni = 0;
  const auto& da = a.data();
  const auto& db = b.data();
  for (std::size_t i = 0; i < da.size(); ++i) {
    inter += static_cast<std::size_t>(da[i] & db[i]);
    uni += static_cast<std::size_t>(da[i] | db[i]);
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

LabeledRegions connected_components(const BitMask& m, Connectivity conn) {
  LabeledRegions out;
  out.height = m.height();
  out.width = m.width();
  out.labels.assign(m.size(), 0);
  const int h = m.height(), w = m.width();
  static constexpr int kDr[8] = {-1, 1, 0, 0, -1, -1, 1, 1};
  static constexpr int kDc[8] = {0, 0, -1, 1, -1, 1, -1, 1};
  const int n_nbr = conn == Connectivity::Four ? 4 : 8;

  std::vector<std::size_t> queue;
  queue.reserve(m.size());
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const std::size_t seed = static_cast<std::size_t>(r) * w + c;
      if (!m[seed] || out.labels[seed] != 0) continue;
      const std::int32_t label = ++out.count;
      out.labels[seed] = label;
      queue.clear();
      queue.push_back(seed);
      for (std::size_t head = 0; head < queue.size(); ++head) {
        const int pr = static_cast<int>(queue[head] / w);
        const int pc = static_cast<int>(queue[head] % w);
        for (int k = 0; k < n_nbr; ++k) {
          const int nr = pr + kDr[k], nc = pc + kDc[k];
          if (nr < 0 || nc < 0 || nr >= h || nc >= w) continue;
          const std::size_t ni = static_cast<std::size_t>(nr) * w + nc;
          if (m[ni] && out.labels[ni] == 0) {
            out.labels[ni] = label;
            queue.push_back(ni);
          }
        }
      }
    }
  }
  return out;
}

BitMask largest_component(const BitMask& m, Connectivity conn) {
  const LabeledRegions regions = connected_components(m, conn);
  if (regions.count == 0) return BitMask(m.height(), m.width());
  const auto sizes = regions.sizes();
  int best = 1;
  for (int l = 2; l <= regions.count; ++l) {
    if (sizes[static_cast<std::size_t>(l)] > sizes[static_cast<std::size_t>(best)]) best = l;
  }
  return regions.region(best);
}

std::vector<std::int64_t> squared_distance_transform(const BitMask& m) {
  const int h = m.height(), w = m.width();
  // Column pass: 1-D distance to the nearest background pixel, where rows -1
  // and h are background.
  std::vector<std::int64_t> g(m.size());
#pragma omp parallel for schedule(static)
  for (int c = 0; c < w; ++c) {
    std::int64_t d = 0;  // distance to the virtual background row -1
    for (int r = 0; r < h; ++r) {
      d = m.at(r, c) ? d + 1 : 0;
      g[static_cast<std::size_t>(r) * w + c] = d;
    }
    d = 0;
    for (int r = h - 1; r >= 0; --r) {
      d = m.at(r, c) ? d + 1 : 0;
      auto& cell = g[static_cast<std::size_t>(r) * w + c];
      cell = std::min(cell, d);
    }
  }

  // Row pass: lower envelope of parabolas over the padded row, with columns
  // -1 and w acting as background (f = 0).
  std::vector<std::int64_t> out(m.size());
#pragma omp parallel
  {
    const int n = w + 2;
    std::vector<double> f(static_cast<std::size_t>(n));
    std::vector<int> v(static_cast<std::size_t>(n));
    std::vector<double> z(static_cast<std::size_t>(n) + 1);
#pragma omp for schedule(static)
    for (int r = 0; r < h; ++r) {
      f[0] = 0.0;
      f[static_cast<std::size_t>(n) - 1] = 0.0;
      for (int c = 0; c < w; ++c) {
        const double gi = static_cast<double>(g[static_cast<std::size_t>(r) * w + c]);
        f[static_cast<std::size_t>(c) + 1] = gi * gi;
      }
      int k = 0;
      v[0] = 0;
      z[0] = -std::numeric_limits<double>::infinity();
      z[1] = std::numeric_limits<double>::infinity();
      for (int q = 1; q < n; ++q) {
        double s;
        for (;;) {
          const int p = v[static_cast<std::size_t>(k)];
          s = ((f[static_cast<std::size_t>(q)] + double(q) * q) -
               (f[static_cast<std::size_t>(p)] + double(p) * p)) /
              (2.0 * (q - p));
          if (s <= z[static_cast<std::size_t>(k)] && k > 0) {
            --k;
            continue;
          }
          break;
        }
        ++k;
        v[static_cast<std::size_t>(k)] = q;
        z[static_cast<std::size_t>(k)] = s;
        z[static_cast<std::size_t>(k) + 1] = std::numeric_limits<double>::infinity();
      }
      k = 0;
      for (int q = 1; q <= w; ++q) {
        while (z[static_cast<std::size_t>(k) + 1] < q) ++k;
        const std::int64_t p = v[static_cast<std::size_t>(k)];
        const std::int64_t dq = q - p;
        out[static_cast<std::size_t>(r) * w + (q - 1)] =
            dq * dq + static_cast<std::int64_t>(f[static_cast<std::size_t>(p)]);
      }
    }
  }
  return out;
}

Pixel interior_center(const BitMask& m) {
  if (!m.any()) throw MaskError("interior_center: mask is empty");
  const auto dist = squared_distance_transform(m);
  const int w = m.width();

  std::int64_t n = 0, sum_r = 0, sum_c = 0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (!m[i]) continue;
    ++n;
    sum_r += static_cast<std::int64_t>(i / w);
    sum_c += static_cast<std::int64_t>(i % w);
  }
  // Scaled centroid distance keeps the comparison in exact integers.
  auto centroid_dist = [&](std::size_t i) {
    const std::int64_t dr = n * static_cast<std::int64_t>(i / w) - sum_r;
    const std::int64_t dc = n * static_cast<std::int64_t>(i % w) - sum_c;
    return dr * dr + dc * dc;
  };

  std::size_t best = m.size();
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (!m[i]) continue;
    if (best == m.size() || dist[i] > dist[best] ||
        (dist[i] == dist[best] && centroid_dist(i) < centroid_dist(best))) {
      best = i;
    }
  }
  return Pixel{static_cast<int>(best / w), static_cast<int>(best % w)};
}

namespace {

template <typename Source>
SoftMask downsample_impl(int h, int w, int factor, const Source& value) {
  if (factor <= 0) throw MaskError("downsample_area: factor must be positive");
  const int oh = (h + factor - 1) / factor;
  const int ow = (w + factor - 1) / factor;
  SoftMask out(oh, ow);
  const double inv_area = 1.0 / (static_cast<double>(factor) * factor);
#pragma omp parallel for schedule(static)
  for (int orow = 0; orow < oh; ++orow) {
    for (int ocol = 0; ocol < ow; ++ocol) {
      double acc = 0.0;
      const int r1 = std::min(h, (orow + 1) * factor);
      const int c1 = std::min(w, (ocol + 1) * factor);
      for (int r = orow * factor; r < r1; ++r)
        for (int c = ocol * factor; c < c1; ++c) acc += value(r, c);
      out.at(orow, ocol) = acc * inv_area;
    }
  }
  return out;
}

}  // namespace

SoftMask downsample_area(const BitMask& m, int factor) {
  return downsample_impl(m.height(), m.width(), factor,
                         [&](int r, int c) { return m.at(r, c) ? 1.0 : 0.0; });
}

SoftMask downsample_area(const SoftMask& m, int factor) {
  return downsample_impl(m.height(), m.width(), factor, [&](int r, int c) { return m.at(r, c); });
}

BitMask resize_nearest(const BitMask& m, int height, int width) {
  BitMask out(height, width);
  for (int r = 0; r < height; ++r) {
    const int sr = std::min(m.height() - 1, static_cast<int>((r + 0.5) * m.height() / height));
    for (int c = 0; c < width; ++c) {
      const int sc = std::min(m.width() - 1, static_cast<int>((c + 0.5) * m.width() / width));
      out.set(r, c, m.at(sr, sc));
    }
  }
  return out;
}

std::string rle_encode(const BitMask& m) {
  std::string s = std::to_string(m.height()) + "x" + std::to_string(m.width()) + ":";
  std::uint8_t current = 0;
  std::size_t run = 0;
  bool first = true;
  auto flush = [&] {
    if (!first) s += ',';
    s += std::to_string(run);
    first = false;
  };
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (m[i] == current) {
      ++run;
    } else {
      flush();
      current = m[i];
      run = 1;
    }
  }
  flush();
  return s;
}

namespace {

long long parse_int(std::string_view token, std::string_view whole) {
  long long v = 0;
  const auto* begin = token.data();
  const auto* end = token.data() + token.size();
  auto [ptr, ec] = std::from_chars(begin, end, v);
  if (token.empty() || ec != std::errc{} || ptr != end || v < 0) {
    throw MaskError("rle_decode: malformed number '" + std::string(token) + "' in '" +
                    std::string(whole.substr(0, 64)) + "'");
  }
  return v;
}

}  // namespace

BitMask rle_decode(std::string_view s) {
  const auto colon = s.find(':');
  const auto x = s.find('x');
  if (colon == std::string_view::npos || x == std::string_view::npos || x > colon) {
    throw MaskError("rle_decode: expected '{H}x{W}:' header");
  }
  const long long h = parse_int(s.substr(0, x), s);
  const long long w = parse_int(s.substr(x + 1, colon - x - 1), s);
  if (h < 1 || w < 1 || h > 1 << 15 || w > 1 << 15) {
    throw MaskError("rle_decode: invalid dimensions");
  }
  BitMask m(static_cast<int>(h), static_cast<int>(w));
  const std::size_t total = m.size();
  std::string_view body = s.substr(colon + 1);
  if (body.empty()) throw MaskError("rle_decode: missing run lengths");

  std::size_t pos = 0;
  bool fg = false;
  while (true) {
    const auto comma = body.find(',');
    const long long run = parse_int(body.substr(0, comma), s);
    if (static_cast<unsigned long long>(run) > total - pos) {
      throw MaskError("rle_decode: runs exceed " + std::to_string(total) + " pixels");
    }
    for (long long i = 0; i < run; ++i) m.set_flat(pos++, fg);
    fg = !fg;
    if (comma == std::string_view::npos) break;
    body = body.substr(comma + 1);
  }
  if (pos != total) {
    throw MaskError("rle_decode: runs cover " + std::to_string(pos) + " of " +
                    std::to_string(total) + " pixels");
  }
  return m;
}

}  // namespace maskops
}  // namespace refcut
