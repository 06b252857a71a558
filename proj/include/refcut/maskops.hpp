#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace refcut {

/// Raised for invalid arguments to mask primitives (shape mismatch, empty
/// input where a nonempty one is required, malformed wire strings).
class MaskError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Pixel {
  int row = 0;
  int col = 0;
  friend bool operator==(const Pixel&, const Pixel&) = default;
};

/// Binary H x W grid. Elements are stored row-major as 0/1 bytes.
class BitMask {
 public:
  BitMask() = default;
  BitMask(int height, int width);

  static BitMask full(int height, int width);

  int height() const { return height_; }
  int width() const { return width_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  bool at(int r, int c) const { return data_[index(r, c)] != 0; }
  void set(int r, int c, bool v = true) { data_[index(r, c)] = v ? 1 : 0; }
  bool contains(int r, int c) const {
    return r >= 0 && c >= 0 && r < height_ && c < width_;
  }

  const std::vector<std::uint8_t>& data() const { return data_; }
  std::uint8_t operator[](std::size_t i) const { return data_[i]; }
  void set_flat(std::size_t i, bool v) { data_[i] = v ? 1 : 0; }

  std::size_t count() const;
  bool any() const;
  bool same_shape(const BitMask& o) const {
    return height_ == o.height_ && width_ == o.width_;
  }

  BitMask operator|(const BitMask& o) const;
  BitMask operator&(const BitMask& o) const;
  BitMask operator^(const BitMask& o) const;
  BitMask& operator|=(const BitMask& o);

  friend bool operator==(const BitMask&, const BitMask&) = default;

 private:
  std::size_t index(int r, int c) const {
    return static_cast<std::size_t>(r) * width_ + c;
  }

  int height_ = 0;
  int width_ = 0;
  std::vector<std::uint8_t> data_;
};

/// H x W grid of probabilities / soft weights in [0, 1].
class SoftMask {
 public:
  SoftMask() = default;
  SoftMask(int height, int width, double fill = 0.0);
  explicit SoftMask(const BitMask& m);

  int height() const { return height_; }
  int width() const { return width_; }
  std::size_t size() const { return data_.size(); }

  double at(int r, int c) const { return data_[static_cast<std::size_t>(r) * width_ + c]; }
  double& at(int r, int c) { return data_[static_cast<std::size_t>(r) * width_ + c]; }
  const std::vector<double>& data() const { return data_; }
  std::vector<double>& data() { return data_; }

  double sum() const;
  /// Pixels with probability >= threshold become foreground.
  BitMask threshold(double t = 0.5) const;

  friend bool operator==(const SoftMask&, const SoftMask&) = default;

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<double> data_;
};

enum class Connectivity { Four = 4, Eight = 8 };

struct LabeledRegions {
  int height = 0;
  int width = 0;
  std::vector<std::int32_t> labels;  // 0 = background, 1..count
  int count = 0;

  std::int32_t at(int r, int c) const { return labels[static_cast<std::size_t>(r) * width + c]; }
  BitMask region(int label) const;
  std::vector<std::size_t> sizes() const;  // index 0 unused
};

namespace maskops {

double iou(const BitMask& a, const BitMask& b);

/// Labels are assigned in row-major order of each component's first pixel.
LabeledRegions connected_components(const BitMask& m, Connectivity conn);

/// Largest component; ties go to the smaller label. Empty input gives an empty mask.
BitMask largest_component(const BitMask& m, Connectivity conn);

/// Squared exact Euclidean distance from each foreground pixel to the nearest
/// background pixel, with everything outside the grid counted as background.
/// Background pixels get 0.
std::vector<std::int64_t> squared_distance_transform(const BitMask& m);

/// Foreground pixel farthest from background or the image border. Ties go to
/// the pixel nearest the mask centroid, then row-major.
Pixel interior_center(const BitMask& m);

/// Mean of each factor x factor block after zero-padding up to a multiple of factor.
SoftMask downsample_area(const BitMask& m, int factor);
SoftMask downsample_area(const SoftMask& m, int factor);

/// Nearest-neighbour resampling to the requested size.
BitMask resize_nearest(const BitMask& m, int height, int width);

std::string rle_encode(const BitMask& m);
BitMask rle_decode(std::string_view s);

}  // namespace maskops
}  // namespace refcut
