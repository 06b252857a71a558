#pragma once

// Small hand-built part objects shared by several test files.

#include <string>
#include <vector>

#include "refcut/part_object.hpp"

namespace fixture {

using refcut::BitMask;

inline BitMask rect(int h, int w, int r0, int c0, int r1, int c1) {
  BitMask m(h, w);
  for (int r = r0; r < r1; ++r)
    for (int c = c0; c < c1; ++c) m.set(r, c);
  return m;
}

inline refcut::PartObject object(const std::string& id, const std::string& category,
                                 std::vector<refcut::Part> parts, int h = 8, int w = 8) {
  refcut::PartObject o;
  o.object_id = id;
  o.category = category;
  o.image = refcut::Image(h, w, 0.5f);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) o.image.at(r, c, 0) = static_cast<float>((r * w + c) % 7) / 7.0f;
  o.parts = std::move(parts);
  return o;
}

/// Three vertical bars: 1 touches 2, 2 touches 3, 1 and 3 are apart.
inline refcut::PartObject chain3(const std::string& id, const std::string& category = "chain") {
  return object(id, category,
                {{"a", rect(8, 8, 1, 0, 7, 2)}, {"b", rect(8, 8, 1, 2, 7, 4)}, {"c", rect(8, 8, 1, 4, 7, 6)}});
}

}  // namespace fixture
