#pragma once

#include "leukodetr/deform_attn.hpp"
#include "leukodetr/hs_fpn.hpp"
#include "leukodetr/losses.hpp"

namespace leukodetr {

enum class SpatialPeKind { kSin, kLearned, kNone };
enum class ScalePeKind { kLearned, kNone };
SpatialPeKind spatial_pe_from_string(const std::string& s);
ScalePeKind scale_pe_from_string(const std::string& s);
std::string to_string(SpatialPeKind k);
std::string to_string(ScalePeKind k);

struct TransformerConfig {
  int64_t d_model = 256;
  int64_t ffn_dim = 1024;
  int heads = 8;
  int points = 4;
  int levels = 4;
  int enc_layers = 6;
  int dec_layers = 6;
  int64_t num_queries = 100;
  int64_t num_classes = 5;
  double dropout = 0.1;
  SpatialPeKind spatial_pe = SpatialPeKind::kSin;
  ScalePeKind scale_pe = ScalePeKind::kLearned;
};

// One image's flattened pyramid.
template <class T>
struct TokenizedImage {
  Var<T> tokens;  // [S, d], positional + scale encodings already added
  std::vector<LevelSpec> levels;
  Tensor<T> valid;        // [S], 1 = content cell
  Tensor<T> ref_centers;  // [S, L, 2] own-cell centers, replicated across levels
};

// Fixed sine embedding over one level grid: d/2 dims for y then d/2 for x,
// coordinates normalized by the unmasked content extent.
template <class T>
Tensor<T> sine_position_embedding(int64_t h, int64_t w, int64_t content_h, int64_t content_w,
                                  int64_t d_model);

template <class T>
class EncoderLayer : public Module<T> {
 public:
  EncoderLayer(const TransformerConfig& cfg, const SeedTree& seeds);
  Var<T> forward(const Var<T>& tokens, const TokenizedImage<T>& img, ForwardCtx& ctx) const;

  MsDeformAttention<T> attn;
  LayerNorm<T> norm1, norm2;
  Linear<T> ffn1, ffn2;
  double dropout;
};

template <class T>
class DecoderLayer : public Module<T> {
 public:
  DecoderLayer(const TransformerConfig& cfg, const SeedTree& seeds);
  Var<T> forward(const Var<T>& tgt, const Var<T>& qpos, const Tensor<T>& refs,
                 const Var<T>& memory, const TokenizedImage<T>& img, ForwardCtx& ctx) const;

  // standard multi-head self attention over the query set
  Linear<T> q_proj, k_proj, v_proj, o_proj;
  MsDeformAttention<T> cross;
  LayerNorm<T> norm1, norm2, norm3;
  Linear<T> ffn1, ffn2;
  int heads;
  double dropout;
};

template <class T>
class Transformer : public Module<T> {
 public:
  Transformer(const TransformerConfig& cfg, const SeedTree& seeds);

  // Batched pyramid in, per-layer per-image predictions out
  // ([dec_layers][batch]).
  std::vector<std::vector<Prediction<T>>> forward(const FusedPyramid<T>& pyramid,
                                                  ForwardCtx& ctx) const;

  // Single-image pieces, also exercised directly by tests.
  TokenizedImage<T> tokenize(const std::vector<Var<T>>& level_maps,
                             const std::vector<TensorB>& level_masks) const;
  Var<T> encode(const TokenizedImage<T>& img, ForwardCtx& ctx) const;
  std::vector<Prediction<T>> decode(const Var<T>& memory, const TokenizedImage<T>& img,
                                    ForwardCtx& ctx) const;

  TransformerConfig cfg;
  std::vector<std::unique_ptr<EncoderLayer<T>>> enc;
  std::vector<std::unique_ptr<DecoderLayer<T>>> dec;
  Embedding<T> query_embed;  // [Q, 2*d]: content half and positional half
  std::unique_ptr<Embedding<T>> scale_embed;             // [L, d]
  std::unique_ptr<Embedding<T>> row_embed, col_embed;    // learned spatial PE
  Linear<T> ref_head;    // query positional embedding -> reference point logits
  Linear<T> class_head;  // shared across decoder layers
  Mlp<T> box_head;       // shared across decoder layers
};

// Slice image b out of a batched [B,C,H,W] activation.
template <class T>
Var<T> select_image(const Var<T>& batched, int64_t b);
TensorB select_mask(const TensorB& mask, int64_t b);

}  // namespace leukodetr
