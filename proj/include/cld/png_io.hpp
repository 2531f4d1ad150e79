#pragma once

#include <png.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "cld/errors.hpp"
#include "cld/imaging.hpp"

namespace cld {

namespace detail {

class PngImage {
 public:
  PngImage() {
    std::memset(&image_, 0, sizeof(image_));
    image_.version = PNG_IMAGE_VERSION;
  }
  ~PngImage() { png_image_free(&image_); }
  PngImage(const PngImage&) = delete;
  PngImage& operator=(const PngImage&) = delete;
  png_image* get() { return &image_; }

 private:
  png_image image_;
};

template <std::size_t C>
constexpr png_uint_32 png_format() {
  static_assert(C == 3 || C == 4);
  return C == 4 ? PNG_FORMAT_RGBA : PNG_FORMAT_RGB;
}

}  // namespace detail

// Writes an 8-bit PNG (RGB or straight-alpha RGBA).
template <std::size_t C>
void write_png(const std::string& path, const Image<C>& img) {
  std::vector<std::uint8_t> bytes(img.data.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = quantize8(img.data[i]);
  detail::PngImage png;
  png.get()->width = static_cast<png_uint_32>(img.width);
  png.get()->height = static_cast<png_uint_32>(img.height);
  png.get()->format = detail::png_format<C>();
  if (!png_image_write_to_file(png.get(), path.c_str(), 0, bytes.data(), 0, nullptr)) {
    throw IoError("cannot write PNG '" + path + "': " + png.get()->message);
  }
}

template <std::size_t C>
Image<C> read_png(const std::string& path) {
  if (!std::filesystem::exists(path)) throw IoError("missing PNG file: " + path);
  detail::PngImage png;
  if (!png_image_begin_read_from_file(png.get(), path.c_str())) {
    throw IoError("cannot read PNG '" + path + "': " + png.get()->message);
  }
  png.get()->format = detail::png_format<C>();
  std::vector<std::uint8_t> bytes(PNG_IMAGE_SIZE(*png.get()));
  if (!png_image_finish_read(png.get(), nullptr, bytes.data(), 0, nullptr)) {
    throw IoError("cannot decode PNG '" + path + "': " + png.get()->message);
  }
  Image<C> img(png.get()->height, png.get()->width);
  for (std::size_t i = 0; i < bytes.size(); ++i) img.data[i] = dequantize8(bytes[i]);
  return img;
}

}  // namespace cld
