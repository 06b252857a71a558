#include "refcut/click_encoding.hpp"

#include <algorithm>
#include <string>

namespace refcut {

std::string_view to_string(Polarity p) {
  return p == Polarity::Positive ? "positive" : "negative";
}

Polarity polarity_from_string(std::string_view s) {
  if (s == "positive" || s == "pos") return Polarity::Positive;
  if (s == "negative" || s == "neg") return Polarity::Negative;
  throw std::invalid_argument("unknown click polarity '" + std::string(s) + "'");
}

BitMask rasterize_disks(std::span<const Click> clicks, Polarity polarity, int height, int width,
                        int radius) {
  BitMask out(height, width);
  const long long r2 = static_cast<long long>(radius) * radius;
  for (const Click& click : clicks) {
    if (click.polarity != polarity) continue;
    if (!out.contains(click.row, click.col)) {
      throw MaskError("click (" + std::to_string(click.row) + ", " + std::to_string(click.col) +
                      ") outside " + std::to_string(height) + "x" + std::to_string(width));
    }
    const int r0 = std::max(0, click.row - radius), r1 = std::min(height - 1, click.row + radius);
    const int c0 = std::max(0, click.col - radius), c1 = std::min(width - 1, click.col + radius);
    for (int r = r0; r <= r1; ++r) {
      const long long dr = r - click.row;
      for (int c = c0; c <= c1; ++c) {
        const long long dc = c - click.col;
        if (dr * dr + dc * dc <= r2) out.set(r, c);
      }
    }
  }
  return out;
}

ExtraMaps assemble_extra_maps(std::span<const Click> clicks, const SoftMask& prev, int radius) {
  if (prev.size() == 0) throw MaskError("assemble_extra_maps: previous mask is empty");
  ExtraMaps maps;
  maps.positive = rasterize_disks(clicks, Polarity::Positive, prev.height(), prev.width(), radius);
  maps.negative = rasterize_disks(clicks, Polarity::Negative, prev.height(), prev.width(), radius);
  maps.previous = prev;
  return maps;
}

}  // namespace refcut
