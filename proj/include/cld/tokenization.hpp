#pragma once

// Pixel-space patch tokens and the multi-layer token sequence.
//
// Sequence layout: [composite | background | foreground 1 | ... ], each
// segment the row-major patches of its (snapped) box. Layer indices are
// composite = 0, background = 1, foreground i (bottom-to-top, 1-based) = i+1.
// Token (h, w) indices are absolute patch-grid coordinates in the frame.

#include <cstddef>
#include <string>
#include <vector>

#include "cld/imaging.hpp"
#include "cld/tensor.hpp"

namespace cld {

inline constexpr std::size_t kTokenChannels = 4;
inline constexpr int kCompositeLayer = 0;
inline constexpr int kBackgroundLayer = 1;
inline constexpr int kFirstForegroundLayer = 2;

struct Position {
  int l = 0;
  int h = 0;
  int w = 0;
  friend bool operator==(const Position&, const Position&) = default;
};

struct PatchGrid {
  std::size_t patch_size = 8;
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
  std::size_t channels = kTokenChannels;

  std::size_t token_dim() const { return channels * patch_size * patch_size; }

  static PatchGrid make(std::size_t height, std::size_t width, std::size_t patch,
                        std::size_t channels = kTokenChannels) {
    if (patch == 0 || height % patch != 0 || width % patch != 0) {
      throw ConfigError("frame " + std::to_string(height) + "x" + std::to_string(width) +
                        " is not divisible by patch size " + std::to_string(patch));
    }
    return PatchGrid{patch, height / patch, width / patch, channels};
  }
};

struct Segment {
  int layer_id = 0;
  std::size_t start = 0;
  std::size_t len = 0;
  BBox bbox;  // snapped, in pixels
};

template <typename T>
struct TokenSequence {
  Tensor<T> tokens;  // [L, token_dim]
  std::vector<Position> positions;
  std::vector<Segment> segments;
  std::size_t frame_h = 0;
  std::size_t frame_w = 0;
  std::size_t patch_size = 8;
  std::size_t padding = 0;  // trailing tokens excluded from attention keys and loss

  std::size_t length() const { return positions.size(); }
  std::size_t valid_length() const { return positions.size() - padding; }
  std::size_t token_dim() const { return kTokenChannels * patch_size * patch_size; }

  // 1 for real tokens, 0 for padding.
  std::vector<std::uint8_t> key_mask() const {
    std::vector<std::uint8_t> mask(length(), 1);
    for (std::size_t i = valid_length(); i < length(); ++i) mask[i] = 0;
    return mask;
  }
};

// Floors the top-left and ceils the bottom-right corner to patch boundaries.
inline BBox snap_bbox(const BBox& b, std::size_t patch) {
  const int p = static_cast<int>(patch);
  const auto floor_to = [p](int v) { return (v / p) * p; };
  const auto ceil_to = [p](int v) { return ((v + p - 1) / p) * p; };
  return BBox{floor_to(b.x_l), floor_to(b.y_l), ceil_to(b.x_r), ceil_to(b.y_r)};
}

// Row-major patches of the patch-aligned region `box` of `img`. Each token
// holds its pixels row-major with channels interleaved; images with fewer
// than `out_channels` channels are padded with ones (opaque alpha).
template <typename T, std::size_t C>
Tensor<T> patchify_region(const Image<C>& img, const BBox& box, std::size_t patch,
                          std::size_t out_channels = C) {
  const int p = static_cast<int>(patch);
  if (box.x_l % p || box.y_l % p || box.x_r % p || box.y_r % p) {
    throw ConfigError("patchify: region " + box.str() + " is not aligned to patch " +
                      std::to_string(patch));
  }
  require_valid_bbox(box, img.height, img.width, "patchify region");
  const std::size_t gh = static_cast<std::size_t>(box.height()) / patch;
  const std::size_t gw = static_cast<std::size_t>(box.width()) / patch;
  const std::size_t dim = out_channels * patch * patch;
  std::vector<T> out(gh * gw * dim);
  for (std::size_t ty = 0; ty < gh; ++ty) {
    for (std::size_t tx = 0; tx < gw; ++tx) {
      T* tok = out.data() + (ty * gw + tx) * dim;
      for (std::size_t py = 0; py < patch; ++py) {
        for (std::size_t px = 0; px < patch; ++px) {
          const std::size_t y = static_cast<std::size_t>(box.y_l) + ty * patch + py;
          const std::size_t x = static_cast<std::size_t>(box.x_l) + tx * patch + px;
          for (std::size_t c = 0; c < out_channels; ++c) {
            tok[(py * patch + px) * out_channels + c] =
                c < C ? static_cast<T>(img.at(y, x, c)) : T{1};
          }
        }
      }
    }
  }
  return Tensor<T>(Shape{gh * gw, dim}, std::move(out));
}

template <typename T, std::size_t C>
Tensor<T> patchify(const Image<C>& img, std::size_t patch) {
  PatchGrid::make(img.height, img.width, patch, C);
  return patchify_region<T>(img, full_frame(img.height, img.width), patch);
}

// Writes `tokens` (row-major patches of `box`) into `img`, taking the first
// C channels of each token pixel. Values are copied unclamped.
template <typename T, std::size_t C>
void unpatchify_into(Image<C>& img, std::span<const T> tokens, std::size_t token_channels,
                     const BBox& box, std::size_t patch) {
  const std::size_t gh = static_cast<std::size_t>(box.height()) / patch;
  const std::size_t gw = static_cast<std::size_t>(box.width()) / patch;
  const std::size_t dim = token_channels * patch * patch;
  if (tokens.size() != gh * gw * dim) {
    throw ContractError("unpatchify: " + std::to_string(tokens.size()) +
                        " values do not cover region " + box.str());
  }
  for (std::size_t ty = 0; ty < gh; ++ty) {
    for (std::size_t tx = 0; tx < gw; ++tx) {
      const T* tok = tokens.data() + (ty * gw + tx) * dim;
      for (std::size_t py = 0; py < patch; ++py) {
        for (std::size_t px = 0; px < patch; ++px) {
          const std::size_t y = static_cast<std::size_t>(box.y_l) + ty * patch + py;
          const std::size_t x = static_cast<std::size_t>(box.x_l) + tx * patch + px;
          for (std::size_t c = 0; c < C; ++c) {
            img.at(y, x, c) = static_cast<double>(tok[(py * patch + px) * token_channels + c]);
          }
        }
      }
    }
  }
}

// Inverse of patchify for a full frame.
template <std::size_t C, typename T>
Image<C> unpatchify(const Tensor<T>& tokens, std::size_t height, std::size_t width,
                    std::size_t patch) {
  const PatchGrid grid = PatchGrid::make(height, width, patch, C);
  if (tokens.rank() != 2 || tokens.dim(0) != grid.grid_h * grid.grid_w ||
      tokens.dim(1) != grid.token_dim()) {
    throw DimensionError("unpatchify: token shape " + shape_str(tokens.shape()) +
                         " does not match a " + std::to_string(height) + "x" +
                         std::to_string(width) + " frame");
  }
  Image<C> img(height, width);
  unpatchify_into<T, C>(img, tokens.values(), C, full_frame(height, width), patch);
  return img;
}

// Sequence geometry for a frame and its foreground boxes, with zero tokens.
template <typename T>
TokenSequence<T> make_layout(std::size_t height, std::size_t width,
                             const std::vector<BBox>& foreground_boxes, std::size_t patch,
                             std::size_t max_layers) {
  PatchGrid::make(height, width, patch);
  if (1 + foreground_boxes.size() > max_layers) {
    throw ValidationError("capacity: " + std::to_string(1 + foreground_boxes.size()) +
                          " layers exceed max_layers " + std::to_string(max_layers));
  }
  TokenSequence<T> seq;
  seq.frame_h = height;
  seq.frame_w = width;
  seq.patch_size = patch;
  const auto add_segment = [&](int layer, const BBox& box) {
    Segment s;
    s.layer_id = layer;
    s.start = seq.positions.size();
    s.bbox = box;
    const int p = static_cast<int>(patch);
    for (int gy = box.y_l / p; gy < box.y_r / p; ++gy) {
      for (int gx = box.x_l / p; gx < box.x_r / p; ++gx) {
        seq.positions.push_back(Position{layer, gy, gx});
      }
    }
    s.len = seq.positions.size() - s.start;
    seq.segments.push_back(s);
  };
  add_segment(kCompositeLayer, full_frame(height, width));
  add_segment(kBackgroundLayer, full_frame(height, width));
  for (std::size_t i = 0; i < foreground_boxes.size(); ++i) {
    require_valid_bbox(foreground_boxes[i], height, width,
                       "foreground " + std::to_string(i + 1));
    add_segment(kFirstForegroundLayer + static_cast<int>(i),
                snap_bbox(foreground_boxes[i], patch));
  }
  seq.tokens = Tensor<T>(Shape{seq.positions.size(), seq.token_dim()});
  return seq;
}

// Patchified ground truth: composite (alpha 1), background, and the snapped
// crop of every foreground.
template <typename T>
TokenSequence<T> assemble_sequence(const LayerStack& stack, std::size_t patch,
                                   std::size_t max_layers) {
  validate_stack(stack);
  std::vector<BBox> boxes;
  for (const auto& fg : stack.foregrounds) boxes.push_back(fg.bbox);
  TokenSequence<T> seq = make_layout<T>(stack.height(), stack.width(), boxes, patch, max_layers);
  std::vector<Tensor<T>> parts;
  parts.push_back(patchify_region<T>(stack.composite, seq.segments[0].bbox, patch, kTokenChannels));
  parts.push_back(patchify_region<T>(stack.background, seq.segments[1].bbox, patch));
  for (std::size_t i = 0; i < stack.foregrounds.size(); ++i) {
    parts.push_back(patchify_region<T>(stack.foregrounds[i].image, seq.segments[i + 2].bbox, patch));
  }
  std::vector<T> values;
  values.reserve(seq.length() * seq.token_dim());
  for (const auto& p : parts) values.insert(values.end(), p.values().begin(), p.values().end());
  seq.tokens = Tensor<T>(Shape{seq.length(), seq.token_dim()}, std::move(values));
  return seq;
}

// Copy of `seq` extended with `extra` padding tokens (zeros, position of the
// first token).
template <typename T>
TokenSequence<T> pad_sequence(const TokenSequence<T>& seq, std::size_t extra) {
  TokenSequence<T> out = seq;
  std::vector<T> values(seq.tokens.values().begin(), seq.tokens.values().end());
  values.resize(values.size() + extra * seq.token_dim(), T{0});
  for (std::size_t i = 0; i < extra; ++i) out.positions.push_back(seq.positions.front());
  out.padding = seq.padding + extra;
  out.tokens = Tensor<T>(Shape{out.positions.size(), seq.token_dim()}, std::move(values));
  return out;
}

inline void check_segments(const std::vector<Segment>& segments, std::size_t length,
                           std::size_t h, std::size_t w, std::size_t patch) {
  if (segments.size() < 2 || segments[0].layer_id != kCompositeLayer ||
      segments[0].bbox != full_frame(h, w) || segments[1].layer_id != kBackgroundLayer ||
      segments[1].bbox != full_frame(h, w)) {
    throw ContractError("token sequence must start with full-frame composite and background segments");
  }
  std::size_t expect = 0;
  for (const auto& s : segments) {
    if (!s.bbox.valid_in(h, w) || s.start != expect ||
        s.len * patch * patch != static_cast<std::size_t>(s.bbox.area())) {
      throw ContractError("malformed segment for layer " + std::to_string(s.layer_id));
    }
    expect += s.len;
  }
  if (expect > length) throw ContractError("segments overrun the token sequence");
}

// Decodes a token sequence into layers. Layer canvases are transparent
// outside their snapped boxes; all channels are clamped to [0, 1]. The
// composite segment becomes the stack's composite (its alpha is ignored).
template <typename T>
LayerStack scatter_to_layers(const TokenSequence<T>& seq) {
  const std::size_t h = seq.frame_h, w = seq.frame_w, p = seq.patch_size;
  check_segments(seq.segments, seq.length(), h, w, p);
  if (seq.tokens.rank() != 2 || seq.tokens.dim(1) != seq.token_dim() ||
      seq.tokens.dim(0) != seq.length()) {
    throw ContractError("token tensor shape " + shape_str(seq.tokens.shape()) +
                        " does not match the sequence layout");
  }
  const std::size_t dim = seq.token_dim();
  const auto segment_values = [&](const Segment& s) {
    return seq.tokens.values().subspan(s.start * dim, s.len * dim);
  };
  LayerStack stack;
  stack.composite = RgbImage(h, w);
  unpatchify_into<T, 3>(stack.composite, segment_values(seq.segments[0]), kTokenChannels,
                        seq.segments[0].bbox, p);
  stack.background = RgbaImage(h, w);
  unpatchify_into<T, 4>(stack.background, segment_values(seq.segments[1]), kTokenChannels,
                        seq.segments[1].bbox, p);
  for (std::size_t i = 2; i < seq.segments.size(); ++i) {
    ForegroundLayer fg;
    fg.image = RgbaImage(h, w, 0.0);
    fg.bbox = seq.segments[i].bbox;
    unpatchify_into<T, 4>(fg.image, segment_values(seq.segments[i]), kTokenChannels,
                          fg.bbox, p);
    stack.foregrounds.push_back(std::move(fg));
  }
  for (double& v : stack.composite.data) v = clamp01(v);
  for (double& v : stack.background.data) v = clamp01(v);
  for (auto& fg : stack.foregrounds) {
    for (double& v : fg.image.data) v = clamp01(v);
  }
  return stack;
}

}  // namespace cld
