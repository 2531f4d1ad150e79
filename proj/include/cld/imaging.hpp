#pragma once

// Straight-alpha RGBA layers, layer stacks, and compositing.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "cld/errors.hpp"

namespace cld {

// Interleaved HWC image with channel values in [0, 1].
template <std::size_t C>
struct Image {
  static constexpr std::size_t kChannels = C;

  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> data;

  Image() = default;
  Image(std::size_t h, std::size_t w, double fill = 0.0)
      : height(h), width(w), data(h * w * C, fill) {}

  double& at(std::size_t y, std::size_t x, std::size_t c) {
    return data[(y * width + x) * C + c];
  }
  double at(std::size_t y, std::size_t x, std::size_t c) const {
    return data[(y * width + x) * C + c];
  }
  std::size_t pixels() const { return height * width; }
  bool same_size(std::size_t h, std::size_t w) const { return height == h && width == w; }

  friend bool operator==(const Image&, const Image&) = default;
};

using RgbImage = Image<3>;
using RgbaImage = Image<4>;

// Half-open pixel rectangle [x_l, x_r) x [y_l, y_r).
struct BBox {
  int x_l = 0;
  int y_l = 0;
  int x_r = 0;
  int y_r = 0;

  int width() const { return x_r - x_l; }
  int height() const { return y_r - y_l; }
  long area() const { return static_cast<long>(width()) * height(); }
  bool contains(const BBox& o) const {
    return x_l <= o.x_l && y_l <= o.y_l && x_r >= o.x_r && y_r >= o.y_r;
  }
  bool valid_in(std::size_t h, std::size_t w) const {
    return 0 <= x_l && x_l < x_r && x_r <= static_cast<int>(w) && 0 <= y_l &&
           y_l < y_r && y_r <= static_cast<int>(h);
  }
  std::string str() const {
    return "[" + std::to_string(x_l) + "," + std::to_string(y_l) + "," +
           std::to_string(x_r) + "," + std::to_string(y_r) + "]";
  }

  friend bool operator==(const BBox&, const BBox&) = default;
};

inline BBox full_frame(std::size_t h, std::size_t w) {
  return BBox{0, 0, static_cast<int>(w), static_cast<int>(h)};
}

inline void require_valid_bbox(const BBox& b, std::size_t h, std::size_t w,
                               const std::string& what) {
  if (!b.valid_in(h, w)) {
    throw ValidationError(what + " bbox " + b.str() + " is not a valid box in a " +
                          std::to_string(h) + "x" + std::to_string(w) + " frame");
  }
}

struct ForegroundLayer {
  RgbaImage image;  // full frame; alpha is zero outside bbox
  BBox bbox;
  std::vector<std::string> prompt;
};

// Composite image plus its layers. Foregrounds are ordered bottom-to-top.
struct LayerStack {
  RgbImage composite;
  RgbaImage background;
  std::vector<std::string> background_prompt;
  std::vector<ForegroundLayer> foregrounds;
  std::vector<std::string> global_prompt;

  std::size_t height() const { return background.height; }
  std::size_t width() const { return background.width; }
  std::size_t layer_count() const { return 1 + foregrounds.size(); }
  // Layer k: 0 is the background, k >= 1 the (k-1)-th foreground.
  const RgbaImage& layer(std::size_t k) const {
    return k == 0 ? background : foregrounds.at(k - 1).image;
  }
  BBox layer_bbox(std::size_t k) const {
    return k == 0 ? full_frame(height(), width()) : foregrounds.at(k - 1).bbox;
  }
};

inline double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

inline std::uint8_t quantize8(double v) {
  return static_cast<std::uint8_t>(std::lround(clamp01(v) * 255.0));
}
inline double dequantize8(std::uint8_t v) { return static_cast<double>(v) / 255.0; }

// Snaps every channel onto the 8-bit grid.
template <std::size_t C>
Image<C> quantized(const Image<C>& img) {
  Image<C> out = img;
  for (double& v : out.data) v = dequantize8(quantize8(v));
  return out;
}

// out = fg.rgb * fg.a + out * (1 - fg.a), per pixel.
inline void composite_over(RgbImage& canvas, const RgbaImage& fg) {
  if (!fg.same_size(canvas.height, canvas.width)) {
    throw ValidationError("layer size " + std::to_string(fg.height) + "x" +
                          std::to_string(fg.width) + " does not match frame " +
                          std::to_string(canvas.height) + "x" +
                          std::to_string(canvas.width));
  }
  for (std::size_t p = 0; p < canvas.pixels(); ++p) {
    const double a = fg.data[p * 4 + 3];
    for (std::size_t c = 0; c < 3; ++c) {
      canvas.data[p * 3 + c] = fg.data[p * 4 + c] * a + canvas.data[p * 3 + c] * (1.0 - a);
    }
  }
}

// Checks frame sizes and box geometry. With `strict`, also requires every
// foreground's nonzero alpha to lie inside its box.
inline void validate_stack(const LayerStack& stack, bool strict = false) {
  const std::size_t h = stack.height(), w = stack.width();
  if (h == 0 || w == 0) throw ValidationError("layer stack has an empty frame");
  if (!stack.composite.same_size(h, w)) {
    throw ValidationError("composite size does not match background frame");
  }
  for (std::size_t i = 0; i < stack.foregrounds.size(); ++i) {
    const auto& fg = stack.foregrounds[i];
    const std::string name = "foreground " + std::to_string(i + 1);
    if (!fg.image.same_size(h, w)) {
      throw ValidationError(name + " image size does not match frame");
    }
    require_valid_bbox(fg.bbox, h, w, name);
    if (!strict) continue;
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const bool inside = static_cast<int>(x) >= fg.bbox.x_l &&
                            static_cast<int>(x) < fg.bbox.x_r &&
                            static_cast<int>(y) >= fg.bbox.y_l &&
                            static_cast<int>(y) < fg.bbox.y_r;
        if (!inside && fg.image.at(y, x, 3) > 0.0) {
          throw ValidationError(name + " has alpha outside its bbox at (" +
                                std::to_string(x) + "," + std::to_string(y) + ")");
        }
      }
    }
  }
}

// Background over an opaque black canvas, then each foreground bottom-to-top.
inline RgbImage over_composite(const LayerStack& stack) {
  const std::size_t h = stack.height(), w = stack.width();
  for (std::size_t i = 0; i < stack.foregrounds.size(); ++i) {
    require_valid_bbox(stack.foregrounds[i].bbox, h, w,
                       "foreground " + std::to_string(i + 1));
  }
  RgbImage out(h, w, 0.0);
  composite_over(out, stack.background);
  for (const auto& fg : stack.foregrounds) composite_over(out, fg.image);
  for (double& v : out.data) v = clamp01(v);
  return out;
}

inline constexpr double kNeutralGray = 0.5;

// Flattens straight alpha onto a fixed neutral gray backdrop.
inline RgbImage rgba_to_rgb(const RgbaImage& img) {
  RgbImage out(img.height, img.width);
  for (std::size_t p = 0; p < img.pixels(); ++p) {
    const double a = img.data[p * 4 + 3];
    for (std::size_t c = 0; c < 3; ++c) {
      out.data[p * 3 + c] = img.data[p * 4 + c] * a + kNeutralGray * (1.0 - a);
    }
  }
  return out;
}

inline RgbaImage rgb_to_opaque_rgba(const RgbImage& img) {
  RgbaImage out(img.height, img.width);
  for (std::size_t p = 0; p < img.pixels(); ++p) {
    for (std::size_t c = 0; c < 3; ++c) out.data[p * 4 + c] = img.data[p * 3 + c];
    out.data[p * 4 + 3] = 1.0;
  }
  return out;
}

inline std::vector<double> alpha_channel(const RgbaImage& img) {
  std::vector<double> a(img.pixels());
  for (std::size_t p = 0; p < img.pixels(); ++p) a[p] = img.data[p * 4 + 3];
  return a;
}

// Smallest box containing alpha > threshold. Returns false when no pixel qualifies.
inline bool tight_alpha_bbox(const RgbaImage& img, double threshold, BBox& out) {
  int x_l = static_cast<int>(img.width), y_l = static_cast<int>(img.height);
  int x_r = 0, y_r = 0;
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      if (img.at(y, x, 3) > threshold) {
        x_l = std::min(x_l, static_cast<int>(x));
        y_l = std::min(y_l, static_cast<int>(y));
        x_r = std::max(x_r, static_cast<int>(x) + 1);
        y_r = std::max(y_r, static_cast<int>(y) + 1);
      }
    }
  }
  if (x_r == 0) return false;
  out = BBox{x_l, y_l, x_r, y_r};
  return true;
}

}  // namespace cld
