#include "leukodetr/transformer.hpp"

#include <cmath>

namespace leukodetr {

using namespace ag;

SpatialPeKind spatial_pe_from_string(const std::string& s) {
  if (s == "sin") return SpatialPeKind::kSin;
  if (s == "learned") return SpatialPeKind::kLearned;
  if (s == "none") return SpatialPeKind::kNone;
  throw std::invalid_argument("pe.spatial must be sin|learned|none, got '" + s + "'");
}

ScalePeKind scale_pe_from_string(const std::string& s) {
  if (s == "learned") return ScalePeKind::kLearned;
  if (s == "none") return ScalePeKind::kNone;
  throw std::invalid_argument("pe.scale must be learned|none, got '" + s + "'");
}

std::string to_string(SpatialPeKind k) {
  switch (k) {
    case SpatialPeKind::kSin: return "sin";
    case SpatialPeKind::kLearned: return "learned";
    default: return "none";
  }
}

std::string to_string(ScalePeKind k) {
  return k == ScalePeKind::kLearned ? "learned" : "none";
}

template <class T>
Tensor<T> sine_position_embedding(int64_t h, int64_t w, int64_t content_h, int64_t content_w,
                                  int64_t d_model) {
  check_arg(d_model % 4 == 0, "sine PE needs d_model divisible by 4");
  const double two_pi = 2.0 * M_PI, temperature = 10000.0;
  int64_t half = d_model / 2;
  Tensor<T> pe({h * w, d_model});
  std::vector<double> inv_freq(half);
  for (int64_t i = 0; i < half; ++i)
    inv_freq[i] = 1.0 / std::pow(temperature, double(2 * (i / 2)) / double(half));
  for (int64_t i = 0; i < h; ++i)
    for (int64_t j = 0; j < w; ++j) {
      double y = (i + 0.5) / double(std::max<int64_t>(content_h, 1)) * two_pi;
      double x = (j + 0.5) / double(std::max<int64_t>(content_w, 1)) * two_pi;
      T* row = pe.data() + (i * w + j) * d_model;
      for (int64_t k = 0; k < half; ++k) {
        double vy = y * inv_freq[k], vx = x * inv_freq[k];
        row[k] = T(k % 2 == 0 ? std::sin(vy) : std::cos(vy));
        row[half + k] = T(k % 2 == 0 ? std::sin(vx) : std::cos(vx));
      }
    }
  return pe;
}

template <class T>
Var<T> select_image(const Var<T>& batched, int64_t b) {
  check_arg(batched.shape().size() == 4, "select_image: need [B,C,H,W]");
  int64_t n = batched.size(0), c = batched.size(1), h = batched.size(2), w = batched.size(3);
  check_arg(b >= 0 && b < n, "select_image: index out of range");
  return reshape(slice_rows(reshape(batched, {n, c * h * w}), b, 1), {c, h, w});
}

TensorB select_mask(const TensorB& mask, int64_t b) {
  int64_t h = mask.size(1), w = mask.size(2);
  TensorB out({h, w});
  std::copy(mask.data() + b * h * w, mask.data() + (b + 1) * h * w, out.data());
  return out;
}

template <class T>
EncoderLayer<T>::EncoderLayer(const TransformerConfig& cfg, const SeedTree& seeds)
    : attn(cfg.d_model, cfg.levels, cfg.heads, cfg.points, seeds.child("attn")),
      norm1(cfg.d_model),
      norm2(cfg.d_model),
      ffn1(cfg.d_model, cfg.ffn_dim, true, seeds.child("ffn1")),
      ffn2(cfg.ffn_dim, cfg.d_model, true, seeds.child("ffn2")),
      dropout(cfg.dropout) {
  this->register_child("attn", attn);
  this->register_child("norm1", norm1);
  this->register_child("norm2", norm2);
  this->register_child("ffn1", ffn1);
  this->register_child("ffn2", ffn2);
}

namespace {

template <class T>
Var<T> maybe_dropout(const Var<T>& x, double p, ForwardCtx& ctx) {
  if (!ctx.train || p <= 0.0) return x;
  check_arg(ctx.rng != nullptr, "training forward needs a dropout rng");
  return dropout(x, p, *ctx.rng);
}

}  // namespace

template <class T>
Var<T> EncoderLayer<T>::forward(const Var<T>& tokens, const TokenizedImage<T>& img,
                                ForwardCtx& ctx) const {
  Var<T> a = attn.forward(tokens, img.ref_centers, tokens, img.levels, img.valid);
  Var<T> h = norm1.forward(add(tokens, maybe_dropout(a, dropout, ctx)));
  Var<T> f = ffn2.forward(maybe_dropout(relu(ffn1.forward(h)), dropout, ctx));
  return norm2.forward(add(h, maybe_dropout(f, dropout, ctx)));
}

template <class T>
DecoderLayer<T>::DecoderLayer(const TransformerConfig& cfg, const SeedTree& seeds)
    : q_proj(cfg.d_model, cfg.d_model, true, seeds.child("q_proj")),
      k_proj(cfg.d_model, cfg.d_model, true, seeds.child("k_proj")),
      v_proj(cfg.d_model, cfg.d_model, true, seeds.child("v_proj")),
      o_proj(cfg.d_model, cfg.d_model, true, seeds.child("o_proj")),
      cross(cfg.d_model, cfg.levels, cfg.heads, cfg.points, seeds.child("cross")),
      norm1(cfg.d_model),
      norm2(cfg.d_model),
      norm3(cfg.d_model),
      ffn1(cfg.d_model, cfg.ffn_dim, true, seeds.child("ffn1")),
      ffn2(cfg.ffn_dim, cfg.d_model, true, seeds.child("ffn2")),
      heads(cfg.heads),
      dropout(cfg.dropout) {
  this->register_child("q_proj", q_proj);
  this->register_child("k_proj", k_proj);
  this->register_child("v_proj", v_proj);
  this->register_child("o_proj", o_proj);
  this->register_child("cross", cross);
  this->register_child("norm1", norm1);
  this->register_child("norm2", norm2);
  this->register_child("norm3", norm3);
  this->register_child("ffn1", ffn1);
  this->register_child("ffn2", ffn2);
}

template <class T>
Var<T> DecoderLayer<T>::forward(const Var<T>& tgt, const Var<T>& qpos, const Tensor<T>& refs,
                                const Var<T>& memory, const TokenizedImage<T>& img,
                                ForwardCtx& ctx) const {
  int64_t d = tgt.size(1), dh = d / heads;
  Var<T> q = q_proj.forward(add(tgt, qpos));
  Var<T> k = k_proj.forward(add(tgt, qpos));
  Var<T> v = v_proj.forward(tgt);
  std::vector<Var<T>> head_outs;
  T scale = T(1.0 / std::sqrt(double(dh)));
  for (int h = 0; h < heads; ++h) {
    Var<T> qh = slice_cols(q, h * dh, dh);
    Var<T> kh = slice_cols(k, h * dh, dh);
    Var<T> vh = slice_cols(v, h * dh, dh);
    Var<T> p = softmax_rows(scalar_mul(matmul(qh, transpose2d(kh)), scale));
    head_outs.push_back(matmul(p, vh));
  }
  Var<T> sa = o_proj.forward(concat_cols(head_outs));
  Var<T> h1 = norm1.forward(add(tgt, maybe_dropout(sa, dropout, ctx)));

  Var<T> ca = cross.forward(add(h1, qpos), refs, memory, img.levels, img.valid);
  Var<T> h2 = norm2.forward(add(h1, maybe_dropout(ca, dropout, ctx)));

  Var<T> f = ffn2.forward(maybe_dropout(relu(ffn1.forward(h2)), dropout, ctx));
  return norm3.forward(add(h2, maybe_dropout(f, dropout, ctx)));
}

template <class T>
Transformer<T>::Transformer(const TransformerConfig& c, const SeedTree& seeds)
    : cfg(c),
      query_embed(c.num_queries, 2 * c.d_model, seeds.child("query_embed")),
      ref_head(c.d_model, 2, true, seeds.child("ref_head")),
      class_head(c.d_model, c.num_classes, true, seeds.child("class_head")),
      box_head(c.d_model, c.d_model, 4, 3, seeds.child("box_head")) {
  check_arg(cfg.d_model % cfg.heads == 0, "transformer: heads must divide d_model");
  check_arg(cfg.enc_layers >= 0 && cfg.dec_layers >= 1, "transformer: bad layer counts");
  for (int i = 0; i < cfg.enc_layers; ++i) {
    enc.push_back(std::make_unique<EncoderLayer<T>>(cfg, seeds.child("enc" + std::to_string(i))));
    this->register_child("enc" + std::to_string(i), *enc.back());
  }
  for (int i = 0; i < cfg.dec_layers; ++i) {
    dec.push_back(std::make_unique<DecoderLayer<T>>(cfg, seeds.child("dec" + std::to_string(i))));
    this->register_child("dec" + std::to_string(i), *dec.back());
  }
  this->register_child("query_embed", query_embed);
  if (cfg.scale_pe == ScalePeKind::kLearned) {
    scale_embed = std::make_unique<Embedding<T>>(cfg.levels, cfg.d_model,
                                                 seeds.child("scale_embed"));
    this->register_child("scale_embed", *scale_embed);
  }
  if (cfg.spatial_pe == SpatialPeKind::kLearned) {
    row_embed = std::make_unique<Embedding<T>>(64, cfg.d_model / 2, seeds.child("row_embed"));
    col_embed = std::make_unique<Embedding<T>>(64, cfg.d_model / 2, seeds.child("col_embed"));
    this->register_child("row_embed", *row_embed);
    this->register_child("col_embed", *col_embed);
  }
  this->register_child("ref_head", ref_head);
  this->register_child("class_head", class_head);
  this->register_child("box_head", box_head);
  // focal-style prior: every class starts near-background
  class_head.bias.node()->value.fill(T(-std::log((1.0 - 0.01) / 0.01)));
}

template <class T>
TokenizedImage<T> Transformer<T>::tokenize(const std::vector<Var<T>>& level_maps,
                                           const std::vector<TensorB>& level_masks) const {
  check_arg((int64_t)level_maps.size() == cfg.levels, "tokenize: level count mismatch");
  TokenizedImage<T> img;
  std::vector<Var<T>> per_level;
  for (int l = 0; l < cfg.levels; ++l) {
    const Var<T>& m = level_maps[l];
    check_arg(m.shape().size() == 3 && m.size(0) == cfg.d_model,
              "tokenize: level maps must be [d_model,H,W]");
    int64_t h = m.size(1), w = m.size(2);
    img.levels.push_back({h, w});
    Var<T> tokens = transpose2d(reshape(m, {cfg.d_model, h * w}));  // [HW, d]

    const TensorB& mask = level_masks[l];
    check_arg(mask.size(0) == h && mask.size(1) == w, "tokenize: mask size mismatch");
    int64_t content_h = 0, content_w = 0;
    for (int64_t i = 0; i < h; ++i)
      for (int64_t j = 0; j < w; ++j)
        if (!mask[i * w + j]) {
          content_h = std::max(content_h, i + 1);
          content_w = std::max(content_w, j + 1);
        }

    if (cfg.spatial_pe == SpatialPeKind::kSin) {
      Tensor<T> pe = sine_position_embedding<T>(h, w, content_h, content_w, cfg.d_model);
      tokens = add(tokens, Var<T>(pe, false));
    } else if (cfg.spatial_pe == SpatialPeKind::kLearned) {
      std::vector<int64_t> ri(h * w), ci(h * w);
      for (int64_t i = 0; i < h; ++i)
        for (int64_t j = 0; j < w; ++j) {
          ri[i * w + j] = std::min<int64_t>(i, 63);
          ci[i * w + j] = std::min<int64_t>(j, 63);
        }
      Var<T> pe = concat_cols<T>({gather_rows(col_embed->weight, ci),
                                  gather_rows(row_embed->weight, ri)});
      tokens = add(tokens, pe);
    }
    if (cfg.scale_pe == ScalePeKind::kLearned)
      tokens = add_rowvec(tokens, reshape(slice_rows(scale_embed->weight, l, 1), {cfg.d_model}));
    per_level.push_back(tokens);
  }
  img.tokens = concat_rows(per_level);

  int64_t s = img.tokens.size(0);
  img.valid = Tensor<T>({s});
  img.ref_centers = Tensor<T>({s, (int64_t)cfg.levels, 2});
  int64_t base = 0;
  for (int l = 0; l < cfg.levels; ++l) {
    int64_t h = img.levels[l].h, w = img.levels[l].w;
    const TensorB& mask = level_masks[l];
    for (int64_t i = 0; i < h; ++i)
      for (int64_t j = 0; j < w; ++j) {
        int64_t t = base + i * w + j;
        img.valid[t] = mask[i * w + j] ? T(0) : T(1);
        for (int l2 = 0; l2 < cfg.levels; ++l2) {
          img.ref_centers.at(t, l2, 0) = T((j + 0.5) / double(w));
          img.ref_centers.at(t, l2, 1) = T((i + 0.5) / double(h));
        }
      }
    base += h * w;
  }
  return img;
}

template <class T>
Var<T> Transformer<T>::encode(const TokenizedImage<T>& img, ForwardCtx& ctx) const {
  Var<T> h = img.tokens;
  for (const auto& layer : enc) h = layer->forward(h, img, ctx);
  return h;
}

template <class T>
std::vector<Prediction<T>> Transformer<T>::decode(const Var<T>& memory,
                                                  const TokenizedImage<T>& img,
                                                  ForwardCtx& ctx) const {
  Var<T> tgt = slice_cols(query_embed.weight, 0, cfg.d_model);
  Var<T> qpos = slice_cols(query_embed.weight, cfg.d_model, cfg.d_model);
  Var<T> ref_raw = ref_head.forward(qpos);  // [Q, 2] logit-space reference points
  Var<T> ref = sigmoid(ref_raw);

  Tensor<T> refs({cfg.num_queries, (int64_t)cfg.levels, 2});
  for (int64_t q = 0; q < cfg.num_queries; ++q)
    for (int l = 0; l < cfg.levels; ++l) {
      refs.at(q, l, 0) = ref.val().at(q, 0);
      refs.at(q, l, 1) = ref.val().at(q, 1);
    }

  std::vector<Prediction<T>> out;
  for (const auto& layer : dec) {
    tgt = layer->forward(tgt, qpos, refs, memory, img, ctx);
    Prediction<T> pred;
    pred.logits = class_head.forward(tgt);
    Var<T> delta = box_head.forward(tgt);
    // clamp keeps boxes strictly inside (0,1) even for extreme weights
    Var<T> cxy = sigmoid(clamp_scalar(add(slice_cols(delta, 0, 2), ref_raw), T(-16), T(16)));
    Var<T> wh = sigmoid(clamp_scalar(slice_cols(delta, 2, 2), T(-16), T(16)));
    pred.boxes = concat_cols<T>({cxy, wh});
    out.push_back(std::move(pred));
  }
  return out;
}

template <class T>
std::vector<std::vector<Prediction<T>>> Transformer<T>::forward(const FusedPyramid<T>& pyramid,
                                                                ForwardCtx& ctx) const {
  check_arg((int64_t)pyramid.levels.size() == cfg.levels, "transformer: level count mismatch");
  int64_t batch = pyramid.levels[0].size(0);
  std::vector<std::vector<Prediction<T>>> out(dec.size());
  for (int64_t b = 0; b < batch; ++b) {
    std::vector<Var<T>> maps;
    std::vector<TensorB> masks;
    for (int l = 0; l < cfg.levels; ++l) {
      maps.push_back(select_image(pyramid.levels[l], b));
      masks.push_back(select_mask(pyramid.masks[l], b));
    }
    TokenizedImage<T> img = tokenize(maps, masks);
    Var<T> memory = encode(img, ctx);
    std::vector<Prediction<T>> preds = decode(memory, img, ctx);
    for (size_t li = 0; li < preds.size(); ++li) out[li].push_back(std::move(preds[li]));
  }
  return out;
}

#define LEUKODETR_INSTANTIATE_TRANSFORMER(T)                                                  \
  template Tensor<T> sine_position_embedding<T>(int64_t, int64_t, int64_t, int64_t, int64_t); \
  template Var<T> select_image<T>(const Var<T>&, int64_t);                                    \
  template class EncoderLayer<T>;                                                             \
  template class DecoderLayer<T>;                                                             \
  template class Transformer<T>;

LEUKODETR_INSTANTIATE_TRANSFORMER(float)
LEUKODETR_INSTANTIATE_TRANSFORMER(double)

}  // namespace leukodetr
