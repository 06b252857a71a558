#pragma once

#include <span>
#include <string>
#include <vector>

#include "refcut/image.hpp"
#include "refcut/maskops.hpp"

namespace refcut {

struct Part {
  std::string tag;
  BitMask mask;
};

/// One annotated object instance: an image plus disjoint, tagged part masks.
struct PartObject {
  std::string object_id;
  std::string category;
  Image image;
  std::vector<Part> parts;

  int part_count() const { return static_cast<int>(parts.size()); }
  /// Index of `tag` in parts, or -1.
  int find(std::string_view tag) const;
  BitMask union_of(std::span<const int> part_indices) const;
  BitMask union_of_tags(std::span<const std::string> tags) const;
  BitMask whole() const;

  /// Throws std::invalid_argument naming the object on any violated invariant.
  void validate() const;
};

using Dataset = std::vector<PartObject>;

/// Sorts by object_id with plain byte-wise comparison.
void sort_by_object_id(Dataset& dataset);

}  // namespace refcut
