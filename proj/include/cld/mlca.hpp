#pragma once

// Multi-layer conditional adapter: the condition image is patch-encoded,
// projected to model width, cropped by every segment's box, flattened in
// segment order, and added to the hidden states token-for-token.

#include <random>
#include <string>
#include <vector>

#include "cld/layers.hpp"
#include "cld/tokenization.hpp"

namespace cld {

template <typename T>
struct MlcaParams {
  Linear<T> proj;  // [3 * patch^2] -> d_model

  static MlcaParams init(std::size_t patch, std::size_t d_model, std::mt19937_64& rng) {
    return MlcaParams{Linear<T>::init(3 * patch * patch, d_model, rng)};
  }
  void collect(NamedTensors<T>& out) const { proj.collect("mlca.proj", out); }
};

// Projected condition features on the full-frame patch grid, row-major.
template <typename T>
struct ConditionGrid {
  Tensor<T> features;  // [grid_h * grid_w, d_model]
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
  std::size_t patch_size = 0;
};

template <typename T>
struct GuidanceSequence {
  Tensor<T> tokens;  // [L, d_model], aligned with the main sequence
  std::vector<BBox> source_boxes;
};

template <typename T>
ConditionGrid<T> encode_condition(const MlcaParams<T>& params, const RgbImage& image,
                                  std::size_t patch) {
  const PatchGrid grid = PatchGrid::make(image.height, image.width, patch, 3);
  if (params.proj.weight.dim(0) != grid.token_dim()) {
    throw ConfigError("mlca: projection expects " + std::to_string(params.proj.weight.dim(0)) +
                      " inputs, image patches have " + std::to_string(grid.token_dim()));
  }
  ConditionGrid<T> out;
  out.features = params.proj(patchify<T>(image, patch));
  out.grid_h = grid.grid_h;
  out.grid_w = grid.grid_w;
  out.patch_size = patch;
  return out;
}

// Crops the grid by each patch-aligned box and concatenates the row-major
// crops.
template <typename T>
GuidanceSequence<T> build_guidance(const ConditionGrid<T>& grid, const std::vector<BBox>& boxes) {
  const int p = static_cast<int>(grid.patch_size);
  std::vector<std::size_t> rows;
  for (const BBox& b : boxes) {
    if (b.x_l % p || b.y_l % p || b.x_r % p || b.y_r % p ||
        !b.valid_in(grid.grid_h * grid.patch_size, grid.grid_w * grid.patch_size)) {
      throw ContractError("mlca: box " + b.str() + " is not a patch-aligned box in the frame");
    }
    for (int gy = b.y_l / p; gy < b.y_r / p; ++gy) {
      for (int gx = b.x_l / p; gx < b.x_r / p; ++gx) {
        rows.push_back(static_cast<std::size_t>(gy) * grid.grid_w + static_cast<std::size_t>(gx));
      }
    }
  }
  return GuidanceSequence<T>{gather_rows(grid.features, rows), boxes};
}

// Guidance for every segment of `seq`, in segment order.
template <typename T, typename U>
GuidanceSequence<T> build_guidance(const ConditionGrid<T>& grid, const TokenSequence<U>& seq) {
  std::vector<BBox> boxes;
  for (const auto& s : seq.segments) boxes.push_back(s.bbox);
  GuidanceSequence<T> g = build_guidance(grid, boxes);
  if (g.tokens.dim(0) != seq.valid_length()) {
    throw ContractError("mlca: guidance length " + std::to_string(g.tokens.dim(0)) +
                        " does not match sequence length " + std::to_string(seq.valid_length()));
  }
  return g;
}

// h + guidance, elementwise.
template <typename T>
Tensor<T> fuse(const Tensor<T>& h, const GuidanceSequence<T>& g) {
  if (h.shape() != g.tokens.shape()) {
    throw ContractError("mlca: cannot fuse guidance " + shape_str(g.tokens.shape()) +
                        " into hidden states " + shape_str(h.shape()));
  }
  return add(h, g.tokens);
}

}  // namespace cld
