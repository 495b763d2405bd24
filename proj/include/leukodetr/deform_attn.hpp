#pragma once

#include "leukodetr/nn.hpp"

namespace leukodetr {

struct LevelSpec {
  int64_t h = 0, w = 0;
  int64_t cells() const { return h * w; }
};

int64_t total_cells(const std::vector<LevelSpec>& levels);

// 4-neighbor bilinear read of a [C, H, W] map at a normalized point; grid
// coordinates use half-pixel centers (x * W - 0.5) and out-of-range neighbors
// contribute zero.
template <class T>
Var<T> bilinear_sample(const Var<T>& value_map, T x, T y);

// Sampling + weighting + head aggregation of multi-scale deformable
// attention, before the output projection:
//
//   out[q, h*Dh + d] = sum_{l,k} weights[q,h,l,k] * V_l(ref[q,l] + off/W_l)[h*Dh + d]
//
// values:  [S, D] flattened levels, row-major cells, level by level
// refs:    [Q, L, 2] normalized (x, y), constant w.r.t. the graph
// offsets: [Q, H, L, K, 2] in units of cells at each level
// weights: [Q, H, L, K]
template <class T>
Var<T> msdam_core(const Var<T>& values, const std::vector<LevelSpec>& levels,
                  const Tensor<T>& refs, const Var<T>& offsets, const Var<T>& weights,
                  int heads);

template <class T>
class MsDeformAttention : public Module<T> {
 public:
  MsDeformAttention(int64_t d_model, int levels, int heads, int points, const SeedTree& seeds);

  // query [Q, d_model]; refs [Q, L, 2]; values [S, d_model]; valid [S] with 1
  // for content cells and 0 for padding (padding is zeroed after the value
  // projection, before sampling).
  Var<T> forward(const Var<T>& query, const Tensor<T>& refs, const Var<T>& values,
                 const std::vector<LevelSpec>& levels, const Tensor<T>& valid) const;

  // Linear offset head, reshaped to [Q, H, L, K, 2] cell-unit offsets.
  Var<T> predict_offsets(const Var<T>& query) const;
  // Linear weight head, softmax over the joint (level, point) axis per head,
  // reshaped to [Q, H, L, K].
  Var<T> predict_weights(const Var<T>& query) const;

  int heads() const { return heads_; }
  int points() const { return points_; }
  int levels() const { return levels_; }

  Linear<T> value_proj, output_proj, offset_proj, weight_proj;

 private:
  int64_t d_model_;
  int levels_, heads_, points_;
};

}  // namespace leukodetr
