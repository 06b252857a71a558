#include "refcut/part_object.hpp"

#include <algorithm>
#include <set>
#include <stdexcept>

namespace refcut {

int PartObject::find(std::string_view tag) const {
  for (std::size_t i = 0; i < parts.size(); ++i)
    if (parts[i].tag == tag) return static_cast<int>(i);
  return -1;
}

BitMask PartObject::union_of(std::span<const int> part_indices) const {
  BitMask out(image.height, image.width);
  for (int i : part_indices) out |= parts.at(static_cast<std::size_t>(i)).mask;
  return out;
}

BitMask PartObject::union_of_tags(std::span<const std::string> tags) const {
  BitMask out(image.height, image.width);
  for (const auto& t : tags) {
    const int i = find(t);
    if (i >= 0) out |= parts[static_cast<std::size_t>(i)].mask;
  }
  return out;
}

BitMask PartObject::whole() const {
  BitMask out(image.height, image.width);
  for (const auto& p : parts) out |= p.mask;
  return out;
}

void PartObject::validate() const {
  auto fail = [&](const std::string& m) {
    throw std::invalid_argument("object '" + object_id + "': " + m);
  };
  if (object_id.empty()) throw std::invalid_argument("object with empty object_id");
  if (image.empty()) fail("missing image");
  if (parts.empty()) fail("has no parts");
  std::set<std::string> tags;
  for (const auto& p : parts) {
    if (!tags.insert(p.tag).second) fail("duplicate part tag '" + p.tag + "'");
    if (p.mask.height() != image.height || p.mask.width() != image.width) {
      fail("part '" + p.tag + "' mask is " + std::to_string(p.mask.height()) + "x" +
           std::to_string(p.mask.width()) + ", image is " + std::to_string(image.height) + "x" +
           std::to_string(image.width));
    }
  }
  for (std::size_t i = 0; i < parts.size(); ++i)
    for (std::size_t j = i + 1; j < parts.size(); ++j)
      if ((parts[i].mask & parts[j].mask).any())
        fail("parts '" + parts[i].tag + "' and '" + parts[j].tag + "' overlap");
}

void sort_by_object_id(Dataset& dataset) {
  std::sort(dataset.begin(), dataset.end(), [](const PartObject& a, const PartObject& b) {
    return a.object_id.compare(b.object_id) < 0;
  });
}

}  // namespace refcut
