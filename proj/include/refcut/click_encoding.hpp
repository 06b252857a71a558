#pragma once

#include <span>
#include <string_view>
#include <vector>

#include "refcut/maskops.hpp"

namespace refcut {

enum class Polarity { Positive, Negative };

std::string_view to_string(Polarity p);
Polarity polarity_from_string(std::string_view s);

struct Click {
  int row = 0;
  int col = 0;
  Polarity polarity = Polarity::Positive;
  int order = 1;  // 1-based position within the session

  friend bool operator==(const Click&, const Click&) = default;
};

/// The three auxiliary input channels: positive disks, negative disks and the
/// previous prediction.
struct ExtraMaps {
  BitMask positive;
  BitMask negative;
  SoftMask previous;

  int height() const { return positive.height(); }
  int width() const { return positive.width(); }
};

inline constexpr int kDefaultClickRadius = 5;

BitMask rasterize_disks(std::span<const Click> clicks, Polarity polarity, int height, int width,
                        int radius);

/// `prev` fixes the target size; it is all zeros before the first prediction.
ExtraMaps assemble_extra_maps(std::span<const Click> clicks, const SoftMask& prev, int radius);

}  // namespace refcut
