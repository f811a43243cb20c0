#pragma once

#include <png.h>

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace cntl {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// 8-bit single-channel image, row-major.
struct GrayImage {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;

  GrayImage() = default;
  GrayImage(int h, int w, std::uint8_t fill = 0) : height(h), width(w), pixels(std::size_t(h) * w, fill) {}
  std::uint8_t& at(int r, int c) { return pixels[std::size_t(r) * width + c]; }
  std::uint8_t at(int r, int c) const { return pixels[std::size_t(r) * width + c]; }
  bool operator==(const GrayImage&) const = default;
};

// 8-bit RGB image, row-major interleaved.
struct RgbImage {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;

  RgbImage(int h, int w, std::uint8_t fill = 255) : height(h), width(w), pixels(std::size_t(h) * w * 3, fill) {}
  void set(int r, int c, std::uint8_t red, std::uint8_t green, std::uint8_t blue) {
    if (r < 0 || c < 0 || r >= height || c >= width) return;
    auto* p = &pixels[(std::size_t(r) * width + c) * 3];
    p[0] = red;
    p[1] = green;
    p[2] = blue;
  }
};

namespace detail {

inline void write_png(const std::filesystem::path& path, int h, int w, png_uint_32 format, const std::uint8_t* data) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(w);
  image.height = static_cast<png_uint_32>(h);
  image.format = format;
  if (!png_image_write_to_file(&image, path.string().c_str(), 0, data, 0, nullptr))
    throw DataError("cannot write " + path.string() + ": " + image.message);
}

}  // namespace detail

inline void write_png(const std::filesystem::path& path, const GrayImage& img) {
  detail::write_png(path, img.height, img.width, PNG_FORMAT_GRAY, img.pixels.data());
}

inline void write_png(const std::filesystem::path& path, const RgbImage& img) {
  detail::write_png(path, img.height, img.width, PNG_FORMAT_RGB, img.pixels.data());
}

// Reads any PNG and converts it to 8-bit grayscale.
inline GrayImage read_png(const std::filesystem::path& path) {
  if (!std::filesystem::is_regular_file(path)) throw DataError("missing image file " + path.string());
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.string().c_str()))
    throw DataError("cannot read " + path.string() + ": " + image.message);
  image.format = PNG_FORMAT_GRAY;
  GrayImage img(static_cast<int>(image.height), static_cast<int>(image.width));
  if (!png_image_finish_read(&image, nullptr, img.pixels.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw DataError("cannot decode " + path.string() + ": " + msg);
  }
  return img;
}

}  // namespace cntl
