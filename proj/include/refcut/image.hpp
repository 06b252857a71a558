#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <vector>

#include "refcut/maskops.hpp"

namespace refcut {

class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// RGB image, row-major interleaved, values in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> data;

  Image() = default;
  Image(int h, int w, float fill = 0.0f)
      : height(h), width(w), data(static_cast<std::size_t>(h) * w * 3, fill) {}

  float& at(int r, int c, int ch) { return data[(static_cast<std::size_t>(r) * width + c) * 3 + ch]; }
  float at(int r, int c, int ch) const {
    return data[(static_cast<std::size_t>(r) * width + c) * 3 + ch];
  }
  bool empty() const { return data.empty(); }

  friend bool operator==(const Image&, const Image&) = default;
};

/// Single-channel 8-bit index image (part ids stored in a palette PNG).
struct IndexImage {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> data;

  std::uint8_t at(int r, int c) const { return data[static_cast<std::size_t>(r) * width + c]; }
};

/// Rounds to 8 bits per channel, matching what a PNG round trip stores.
void quantize_8bit(Image& image);

std::vector<std::uint8_t> encode_png(const Image& image);
Image decode_png(std::span<const std::uint8_t> bytes);
void write_png(const std::filesystem::path& path, const Image& image);
Image read_png(const std::filesystem::path& path);

void write_index_png(const std::filesystem::path& path, const IndexImage& indices);
/// Reads palette or 8-bit grayscale PNGs as raw indices.
IndexImage read_index_png(const std::filesystem::path& path);

Image resize_bilinear(const Image& image, int height, int width);
Image flip_horizontal(const Image& image);
SoftMask resize_bilinear(const SoftMask& mask, int height, int width);
SoftMask flip_horizontal(const SoftMask& mask);
BitMask flip_horizontal(const BitMask& mask);

}  // namespace refcut
