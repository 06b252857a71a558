#include "refcut/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <string>

#include <opencv2/imgproc.hpp>

namespace refcut {

void quantize_8bit(Image& image) {
  for (float& v : image.data) v = std::round(std::clamp(v, 0.0f, 1.0f) * 255.0f) / 255.0f;
}

namespace {

std::vector<std::uint8_t> to_bytes(const Image& image) {
  std::vector<std::uint8_t> bytes(image.data.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    bytes[i] = static_cast<std::uint8_t>(std::lround(std::clamp(image.data[i], 0.0f, 1.0f) * 255.0f));
  }
  return bytes;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ImageError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ImageError("short write to " + path.string());
}

struct PngImage {
  png_image image{};
  PngImage() {
    image.version = PNG_IMAGE_VERSION;
  }
  ~PngImage() { png_image_free(&image); }
};

}  // namespace

std::vector<std::uint8_t> encode_png(const Image& image) {
  if (image.empty()) throw ImageError("encode_png: empty image");
  const auto bytes = to_bytes(image);
  PngImage png;
  png.image.width = static_cast<png_uint_32>(image.width);
  png.image.height = static_cast<png_uint_32>(image.height);
  png.image.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&png.image, nullptr, &size, 0, bytes.data(), 0, nullptr)) {
    throw ImageError(std::string("encode_png: ") + png.image.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&png.image, out.data(), &size, 0, bytes.data(), 0, nullptr)) {
    throw ImageError(std::string("encode_png: ") + png.image.message);
  }
  out.resize(size);
  return out;
}

Image decode_png(std::span<const std::uint8_t> bytes) {
  PngImage png;
  if (!png_image_begin_read_from_memory(&png.image, bytes.data(), bytes.size())) {
    throw ImageError(std::string("decode_png: ") + png.image.message);
  }
  png.image.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> buffer(PNG_IMAGE_SIZE(png.image));
  if (!png_image_finish_read(&png.image, nullptr, buffer.data(), 0, nullptr)) {
    throw ImageError(std::string("decode_png: ") + png.image.message);
  }
  Image out(static_cast<int>(png.image.height), static_cast<int>(png.image.width));
  for (std::size_t i = 0; i < buffer.size(); ++i) out.data[i] = buffer[i] / 255.0f;
  return out;
}

void write_png(const std::filesystem::path& path, const Image& image) {
  write_file(path, encode_png(image));
}

Image read_png(const std::filesystem::path& path) {
  try {
    return decode_png(read_file(path));
  } catch (const ImageError& e) {
    throw ImageError(path.string() + ": " + e.what());
  }
}

void write_index_png(const std::filesystem::path& path, const IndexImage& indices) {
  // Fixed palette: index 0 black, parts spread around the hue circle.
  std::uint8_t colormap[256 * 3];
  for (int i = 0; i < 256; ++i) {
    colormap[i * 3 + 0] = static_cast<std::uint8_t>(i == 0 ? 0 : (i * 97) % 256);
    colormap[i * 3 + 1] = static_cast<std::uint8_t>(i == 0 ? 0 : (i * 57 + 80) % 256);
    colormap[i * 3 + 2] = static_cast<std::uint8_t>(i == 0 ? 0 : (i * 31 + 160) % 256);
  }
  int max_index = 0;
  for (auto v : indices.data) max_index = std::max<int>(max_index, v);

  PngImage png;
  png.image.width = static_cast<png_uint_32>(indices.width);
  png.image.height = static_cast<png_uint_32>(indices.height);
  png.image.format = PNG_FORMAT_RGB_COLORMAP;
  png.image.colormap_entries = static_cast<png_uint_32>(std::max(2, max_index + 1));
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&png.image, nullptr, &size, 0, indices.data.data(), 0, colormap)) {
    throw ImageError("write_index_png: " + path.string() + ": " + png.image.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&png.image, out.data(), &size, 0, indices.data.data(), 0,
                                 colormap)) {
    throw ImageError("write_index_png: " + path.string() + ": " + png.image.message);
  }
  out.resize(size);
  write_file(path, out);
}

namespace {

struct MemoryReader {
  const std::uint8_t* data;
  std::size_t size;
  std::size_t offset;
};

void read_callback(png_structp png, png_bytep out, png_size_t length) {
  auto* reader = static_cast<MemoryReader*>(png_get_io_ptr(png));
  if (reader->offset + length > reader->size) png_error(png, "unexpected end of data");
  std::memcpy(out, reader->data + reader->offset, length);
  reader->offset += length;
}

// Plain C control flow only between setjmp and the matching longjmp.
bool read_raw_indices(MemoryReader* reader, std::vector<std::uint8_t>* pixels, int* height,
                      int* width, int* color_type, int* bit_depth, std::string* error) {
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (png == nullptr) {
    *error = "png_create_read_struct failed";
    return false;
  }
  png_infop info = png_create_info_struct(png);
  if (info == nullptr) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    *error = "png_create_info_struct failed";
    return false;
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    *error = "corrupt PNG";
    return false;
  }
  png_set_read_fn(png, reader, read_callback);
  png_read_info(png, info);
  *width = static_cast<int>(png_get_image_width(png, info));
  *height = static_cast<int>(png_get_image_height(png, info));
  *color_type = png_get_color_type(png, info);
  *bit_depth = png_get_bit_depth(png, info);
  if (*bit_depth < 8) png_set_packing(png);
  png_read_update_info(png, info);
  const png_size_t rowbytes = png_get_rowbytes(png, info);
  pixels->resize(rowbytes * static_cast<std::size_t>(*height));
  for (int r = 0; r < *height; ++r) {
    png_read_row(png, pixels->data() + rowbytes * static_cast<std::size_t>(r), nullptr);
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return true;
}

}  // namespace

IndexImage read_index_png(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  MemoryReader reader{bytes.data(), bytes.size(), 0};
  std::vector<std::uint8_t> pixels;
  int h = 0, w = 0, color_type = 0, bit_depth = 0;
  std::string error;
  if (!read_raw_indices(&reader, &pixels, &h, &w, &color_type, &bit_depth, &error)) {
    throw ImageError(path.string() + ": " + error);
  }
  if ((color_type != PNG_COLOR_TYPE_PALETTE && color_type != PNG_COLOR_TYPE_GRAY) ||
      bit_depth > 8) {
    throw ImageError(path.string() + ": expected a palette or 8-bit grayscale PNG");
  }
  IndexImage out;
  out.height = h;
  out.width = w;
  out.data = std::move(pixels);
  return out;
}

Image resize_bilinear(const Image& image, int height, int width) {
  if (image.height == height && image.width == width) return image;
  cv::Mat src(image.height, image.width, CV_32FC3, const_cast<float*>(image.data.data()));
  Image out(height, width);
  cv::Mat dst(height, width, CV_32FC3, out.data.data());
  const int interpolation =
      (height < image.height && width < image.width) ? cv::INTER_AREA : cv::INTER_LINEAR;
  cv::resize(src, dst, cv::Size(width, height), 0, 0, interpolation);
  return out;
}

Image flip_horizontal(const Image& image) {
  Image out(image.height, image.width);
  for (int r = 0; r < image.height; ++r)
    for (int c = 0; c < image.width; ++c)
      for (int ch = 0; ch < 3; ++ch) out.at(r, image.width - 1 - c, ch) = image.at(r, c, ch);
  return out;
}

SoftMask resize_bilinear(const SoftMask& mask, int height, int width) {
  if (mask.height() == height && mask.width() == width) return mask;
  cv::Mat src(mask.height(), mask.width(), CV_64FC1, const_cast<double*>(mask.data().data()));
  SoftMask out(height, width);
  cv::Mat dst(height, width, CV_64FC1, out.data().data());
  const int interpolation =
      (height < mask.height() && width < mask.width()) ? cv::INTER_AREA : cv::INTER_LINEAR;
  cv::resize(src, dst, cv::Size(width, height), 0, 0, interpolation);
  return out;
}

SoftMask flip_horizontal(const SoftMask& mask) {
  SoftMask out(mask.height(), mask.width());
  for (int r = 0; r < mask.height(); ++r)
    for (int c = 0; c < mask.width(); ++c) out.at(r, mask.width() - 1 - c) = mask.at(r, c);
  return out;
}

BitMask flip_horizontal(const BitMask& mask) {
  BitMask out(mask.height(), mask.width());
  for (int r = 0; r < mask.height(); ++r)
    for (int c = 0; c < mask.width(); ++c) out.set(r, mask.width() - 1 - c, mask.at(r, c));
  return out;
}

}  // namespace refcut
