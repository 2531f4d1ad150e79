#pragma once

// Deterministic synthetic layered images: a solid or gradient background
// plus anti-aliased flat-color shapes, each shape on its own RGBA layer.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "cld/imaging.hpp"
#include "cld/vocab.hpp"

namespace cld {

enum class ShapeKind { kCircle, kRectangle, kTriangle, kRing };
enum class AlphaMode { kOpaque, kTranslucent };

inline std::string_view shape_word(ShapeKind k) {
  return kShapeWords[static_cast<std::size_t>(k)];
}

inline ShapeKind parse_shape_kind(std::string_view word) {
  for (std::size_t i = 0; i < kShapeWords.size(); ++i) {
    if (kShapeWords[i] == word) return static_cast<ShapeKind>(i);
  }
  throw ConfigError("unknown shape '" + std::string(word) + "'");
}

struct SynthConfig {
  std::size_t frame_size = 64;
  std::size_t n_layers = 3;  // background included
  std::vector<ShapeKind> shape_palette{ShapeKind::kCircle, ShapeKind::kRectangle,
                                       ShapeKind::kTriangle, ShapeKind::kRing};
  std::vector<AlphaMode> alpha_modes{AlphaMode::kOpaque, AlphaMode::kTranslucent};
  // Shape extent as a fraction of the frame side.
  double min_extent = 0.25;
  double max_extent = 0.6;
  // Range of the uniform layer alpha used by translucent shapes.
  double translucent_min = 0.6;
  double translucent_max = 0.95;
};

namespace detail {

struct ShapeGeometry {
  ShapeKind kind;
  double x0, y0, x1, y1;  // extent in continuous pixel coordinates
  bool flip = false;      // triangles point down when set
};

inline bool shape_contains(const ShapeGeometry& g, double px, double py) {
  const double cx = 0.5 * (g.x0 + g.x1), cy = 0.5 * (g.y0 + g.y1);
  const double r = 0.5 * std::min(g.x1 - g.x0, g.y1 - g.y0);
  switch (g.kind) {
    case ShapeKind::kCircle: {
      const double dx = px - cx, dy = py - cy;
      return dx * dx + dy * dy <= r * r;
    }
    case ShapeKind::kRing: {
      const double dx = px - cx, dy = py - cy;
      const double d2 = dx * dx + dy * dy;
      const double inner = 0.55 * r;
      return d2 <= r * r && d2 >= inner * inner;
    }
    case ShapeKind::kRectangle:
      return px >= g.x0 && px <= g.x1 && py >= g.y0 && py <= g.y1;
    case ShapeKind::kTriangle: {
      const double apex_y = g.flip ? g.y1 : g.y0;
      const double base_y = g.flip ? g.y0 : g.y1;
      const double ax = cx, ay = apex_y, bx = g.x0, by = base_y, qx = g.x1, qy = base_y;
      const auto edge = [&](double x0, double y0, double x1, double y1) {
        return (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0);
      };
      const double e0 = edge(ax, ay, bx, by);
      const double e1 = edge(bx, by, qx, qy);
      const double e2 = edge(qx, qy, ax, ay);
      return (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0);
    }
  }
  return false;
}

// Fractional pixel coverage from a 4x4 supersampling grid.
inline double coverage(const ShapeGeometry& g, std::size_t x, std::size_t y) {
  constexpr int kSub = 4;
  int hits = 0;
  for (int sy = 0; sy < kSub; ++sy) {
    for (int sx = 0; sx < kSub; ++sx) {
      const double px = static_cast<double>(x) + (sx + 0.5) / kSub;
      const double py = static_cast<double>(y) + (sy + 0.5) / kSub;
      hits += shape_contains(g, px, py) ? 1 : 0;
    }
  }
  return static_cast<double>(hits) / (kSub * kSub);
}

}  // namespace detail

inline LayerStack synth_stack(std::uint64_t seed, const SynthConfig& cfg) {
  if (cfg.shape_palette.empty()) throw ConfigError("synth: shape palette is empty");
  if (cfg.alpha_modes.empty()) throw ConfigError("synth: alpha mode list is empty");
  if (cfg.n_layers < 1) throw ConfigError("synth: n_layers must be at least 1");
  if (cfg.frame_size < 32) throw ConfigError("synth: frame_size must be at least 32");
  if (cfg.n_layers + 1 > kPalette.size()) {
    throw ConfigError("synth: too many layers for the color palette");
  }

  std::mt19937_64 rng(seed);
  const auto uniform = [&](double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
  };
  const auto pick = [&](std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
  };

  const std::size_t n = cfg.frame_size;
  std::vector<std::size_t> colors(kPalette.size());
  for (std::size_t i = 0; i < colors.size(); ++i) colors[i] = i;
  std::shuffle(colors.begin(), colors.end(), rng);
  std::size_t next_color = 0;

  LayerStack stack;
  stack.background = RgbaImage(n, n);
  const bool gradient = pick(2) == 1;
  const NamedColor& c0 = kPalette[colors[next_color++]];
  const NamedColor& c1 = gradient ? kPalette[colors[next_color++]] : c0;
  const bool vertical = pick(2) == 1;
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      const double s = gradient ? static_cast<double>(vertical ? y : x) / (n - 1) : 0.0;
      stack.background.at(y, x, 0) = c0.r + (c1.r - c0.r) * s;
      stack.background.at(y, x, 1) = c0.g + (c1.g - c0.g) * s;
      stack.background.at(y, x, 2) = c0.b + (c1.b - c0.b) * s;
      stack.background.at(y, x, 3) = 1.0;
    }
  }
  stack.background = quantized(stack.background);
  if (gradient) {
    stack.background_prompt = {std::string(c0.name), std::string(c1.name), "gradient",
                               "background"};
  } else {
    stack.background_prompt = {std::string(c0.name), "background"};
  }

  for (std::size_t i = 1; i < cfg.n_layers; ++i) {
    const NamedColor& color = kPalette[colors[next_color++]];
    detail::ShapeGeometry g;
    g.kind = cfg.shape_palette[pick(cfg.shape_palette.size())];
    const double lo = cfg.min_extent * static_cast<double>(n);
    const double hi = cfg.max_extent * static_cast<double>(n);
    double w = uniform(lo, hi);
    double h = uniform(lo, hi);
    if (g.kind == ShapeKind::kCircle || g.kind == ShapeKind::kRing) h = w;
    g.x0 = uniform(1.0, static_cast<double>(n) - 1.0 - w);
    g.y0 = uniform(1.0, static_cast<double>(n) - 1.0 - h);
    g.x1 = g.x0 + w;
    g.y1 = g.y0 + h;
    g.flip = pick(2) == 1;
    const AlphaMode mode = cfg.alpha_modes[pick(cfg.alpha_modes.size())];
    const double layer_alpha = mode == AlphaMode::kOpaque
                                   ? 1.0
                                   : uniform(cfg.translucent_min, cfg.translucent_max);

    ForegroundLayer fg;
    fg.image = RgbaImage(n, n);
    for (std::size_t y = 0; y < n; ++y) {
      for (std::size_t x = 0; x < n; ++x) {
        fg.image.at(y, x, 0) = color.r;
        fg.image.at(y, x, 1) = color.g;
        fg.image.at(y, x, 2) = color.b;
        fg.image.at(y, x, 3) = detail::coverage(g, x, y) * layer_alpha;
      }
    }
    fg.image = quantized(fg.image);
    // Drop alpha at or below one 8-bit step so the tight box threshold and
    // "nonzero alpha" agree.
    for (std::size_t p = 0; p < fg.image.pixels(); ++p) {
      if (fg.image.data[p * 4 + 3] <= 1.0 / 255.0) fg.image.data[p * 4 + 3] = 0.0;
    }
    if (!tight_alpha_bbox(fg.image, 0.0, fg.bbox)) {
      throw ConfigError("synth: shape extent too small to render");
    }
    if (mode == AlphaMode::kTranslucent) fg.prompt.emplace_back("translucent");
    fg.prompt.emplace_back(color.name);
    fg.prompt.emplace_back(shape_word(g.kind));
    stack.foregrounds.push_back(std::move(fg));
  }

  stack.global_prompt = stack.background_prompt;
  for (const auto& fg : stack.foregrounds) {
    stack.global_prompt.insert(stack.global_prompt.end(), fg.prompt.begin(), fg.prompt.end());
  }
  stack.composite = RgbImage(n, n);
  stack.composite = over_composite(stack);
  return stack;
}

}  // namespace cld
