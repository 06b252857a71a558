#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "refcut/part_object.hpp"

namespace refcut {

inline constexpr int kFormatVersion = 1;

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Canonical part-tag order per category, stored in root/categories.json.
using CategoryTags = std::map<std::string, std::vector<std::string>>;

CategoryTags read_categories(const std::filesystem::path& root);

/// Layout: root/{split}/{category}/{object_id}/{image.png, parts.png, parts.json}.
/// parts.png holds palette indices, index i + 1 being the i-th tag of parts.json.
/// Objects come back sorted by object_id with parts in canonical tag order.
Dataset load_part_dataset(const std::filesystem::path& root, const std::string& split);

/// Writes `dataset` under root/split and merges its categories into
/// root/categories.json.
void export_tda(const Dataset& dataset, const std::filesystem::path& root,
                const std::string& split);

/// Reassigns pixels claimed by several parts to the lexicographically first
/// tag. Returns the number of contested pixels.
std::size_t resolve_contested_pixels(std::vector<Part>& parts);

/// Converts a COCO-style part annotation file (one image per object, part
/// names as categories, object class as supercategory, polygon segmentations)
/// into PartObjects. RLE segmentations are rejected.
Dataset convert_coco_parts(const std::filesystem::path& annotation_json,
                           const std::filesystem::path& image_dir);

struct SynthConfig {
  int n_categories = 24;
  int instances_per_category = 40;
  int image_size = 64;
  int min_parts = 1;
  int max_parts = 5;
  double color_jitter = 0.08;
  double geometry_jitter = 0.15;
  int distractors = 2;  // other-category objects painted into the background
  std::string id_prefix;  // prepended to object ids (keeps splits apart)
  std::uint64_t seed = 0;

  void validate() const;
};

/// Names and tag lists of the built-in category library, in library order.
std::vector<std::pair<std::string, std::vector<std::string>>> synthetic_categories();

/// Procedural part composites; deterministic for a given config.
Dataset generate_synthetic(const SynthConfig& config);

}  // namespace refcut
