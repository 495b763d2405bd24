#include "leukodetr/deform_attn.hpp"

#include <cmath>

namespace leukodetr {

int64_t total_cells(const std::vector<LevelSpec>& levels) {
  int64_t s = 0;
  for (const auto& l : levels) s += l.cells();
  return s;
}

template <class T>
Var<T> bilinear_sample(const Var<T>& value_map, T x, T y) {
  check_arg(value_map.shape().size() == 3, "bilinear_sample: need [C,H,W]");
  check_arg(std::isfinite((double)x) && std::isfinite((double)y),
            "bilinear_sample: non-finite point");
  int64_t c = value_map.size(0), h = value_map.size(1), w = value_map.size(2);
  double gx = double(x) * w - 0.5, gy = double(y) * h - 0.5;
  int64_t x0 = (int64_t)std::floor(gx), y0 = (int64_t)std::floor(gy);
  T fx = T(gx - x0), fy = T(gy - y0);
  struct Corner {
    int64_t xi, yi;
    T wgt;
  };
  Corner corners[4] = {{x0, y0, (T(1) - fx) * (T(1) - fy)},
                       {x0 + 1, y0, fx * (T(1) - fy)},
                       {x0, y0 + 1, (T(1) - fx) * fy},
                       {x0 + 1, y0 + 1, fx * fy}};
  Tensor<T> out = Tensor<T>::zeros({c});
  for (const Corner& cr : corners) {
    if (cr.xi < 0 || cr.xi >= w || cr.yi < 0 || cr.yi >= h) continue;
    for (int64_t ch = 0; ch < c; ++ch)
      out[ch] += cr.wgt * value_map.val().at(ch, cr.yi, cr.xi);
  }
  auto vn = value_map.node();
  return make_op<T>(std::move(out), {value_map}, [vn, corners, c, h, w](AgNode<T>& g) {
    Tensor<T>& pg = vn->ensure_grad();
    for (const Corner& cr : corners) {
      if (cr.xi < 0 || cr.xi >= w || cr.yi < 0 || cr.yi >= h) continue;
      for (int64_t ch = 0; ch < c; ++ch) pg.at(ch, cr.yi, cr.xi) += cr.wgt * g.grad[ch];
    }
  });
}

namespace {

// Shared forward/backward walker: visits the four corners of every sampling
// point with their interpolation weights and in-bounds row index.
template <class T, class Fn>
void for_each_corner(const std::vector<LevelSpec>& levels, const Tensor<T>& refs,
                     const Tensor<T>& offsets, int64_t q, int64_t heads, int64_t points,
                     Fn&& fn) {
  int64_t num_levels = (int64_t)levels.size();
  std::vector<int64_t> level_base(num_levels, 0);
  for (int64_t l = 1; l < num_levels; ++l)
    level_base[l] = level_base[l - 1] + levels[l - 1].cells();
  for (int64_t qi = 0; qi < q; ++qi)
    for (int64_t hi = 0; hi < heads; ++hi)
      for (int64_t l = 0; l < num_levels; ++l) {
        int64_t lw = levels[l].w, lh = levels[l].h;
        for (int64_t k = 0; k < points; ++k) {
          int64_t off_idx = (((qi * heads + hi) * num_levels + l) * points + k) * 2;
          // grid coords: ref * size - 0.5 + offset_in_cells
          double gx = double(refs.at(qi, l, 0)) * lw - 0.5 + double(offsets[off_idx]);
          double gy = double(refs.at(qi, l, 1)) * lh - 0.5 + double(offsets[off_idx + 1]);
          int64_t x0 = (int64_t)std::floor(gx), y0 = (int64_t)std::floor(gy);
          T fx = T(gx - x0), fy = T(gy - y0);
          const T cw[4] = {(T(1) - fx) * (T(1) - fy), fx * (T(1) - fy), (T(1) - fx) * fy,
                           fx * fy};
          // d(corner weight)/d(gx), d(corner weight)/d(gy)
          const T dwx[4] = {-(T(1) - fy), (T(1) - fy), -fy, fy};
          const T dwy[4] = {-(T(1) - fx), -fx, (T(1) - fx), fx};
          const int64_t cx[4] = {x0, x0 + 1, x0, x0 + 1};
          const int64_t cy[4] = {y0, y0, y0 + 1, y0 + 1};
          for (int corner = 0; corner < 4; ++corner) {
            if (cx[corner] < 0 || cx[corner] >= lw || cy[corner] < 0 || cy[corner] >= lh)
              continue;
            int64_t row = level_base[l] + cy[corner] * lw + cx[corner];
            fn(qi, hi, l, k, row, cw[corner], dwx[corner], dwy[corner]);
          }
        }
      }
}

}  // namespace

template <class T>
Var<T> msdam_core(const Var<T>& values, const std::vector<LevelSpec>& levels,
                  const Tensor<T>& refs, const Var<T>& offsets, const Var<T>& weights,
                  int heads) {
  int64_t s = values.size(0), d = values.size(1);
  int64_t num_levels = (int64_t)levels.size();
  check_arg(s == total_cells(levels), "msdam_core: values rows do not match level shapes");
  check_arg(d % heads == 0, "msdam_core: d_model must divide into heads");
  int64_t q = offsets.size(0);
  int64_t points = offsets.size(3);
  check_arg(offsets.shape() == std::vector<int64_t>({q, heads, num_levels, points, 2}),
            "msdam_core: offsets must be [Q,H,L,K,2]");
  check_arg(weights.shape() == std::vector<int64_t>({q, heads, num_levels, points}),
            "msdam_core: weights must be [Q,H,L,K]");
  check_arg(refs.shape() == std::vector<int64_t>({q, num_levels, 2}),
            "msdam_core: refs must be [Q,L,2] matching the value levels");
  int64_t dh = d / heads;

  Tensor<T> out = Tensor<T>::zeros({q, d});
  const T* vp = values.val().data();
  const T* wp = weights.val().data();
  for_each_corner<T>(levels, refs, offsets.val(), q, heads, points,
                     [&](int64_t qi, int64_t hi, int64_t l, int64_t k, int64_t row, T cw, T,
                         T) {
                       T wv = wp[((qi * heads + hi) * num_levels + l) * points + k] * cw;
                       const T* src = vp + row * d + hi * dh;
                       T* dst = out.data() + qi * d + hi * dh;
                       for (int64_t c = 0; c < dh; ++c) dst[c] += wv * src[c];
                     });

  auto vn = values.node();
  auto on = offsets.node();
  auto wn = weights.node();
  Tensor<T> vv = values.val(), ov = offsets.val(), wv = weights.val();
  int64_t hp = heads;
  return make_op<T>(
      std::move(out), {values, offsets, weights},
      [vn, on, wn, vv, ov, wv, levels, refs, q, d, dh, hp](AgNode<T>& g) {
        int64_t num_levels = (int64_t)levels.size();
        int64_t points = wv.size(3);
        const T* gp = g.grad.data();
        for_each_corner<T>(
            levels, refs, ov, q, hp, points,
            [&](int64_t qi, int64_t hi, int64_t l, int64_t k, int64_t row, T cw, T dwx,
                T dwy) {
              int64_t flat = ((qi * hp + hi) * num_levels + l) * points + k;
              T aw = wv[flat];
              const T* gout = gp + qi * d + hi * dh;
              const T* src = vv.data() + row * d + hi * dh;
              T gdotv = 0;
              for (int64_t c = 0; c < dh; ++c) gdotv += gout[c] * src[c];
              if (vn->requires_grad) {
                T* gv = vn->ensure_grad().data() + row * d + hi * dh;
                T scale = aw * cw;
                for (int64_t c = 0; c < dh; ++c) gv[c] += scale * gout[c];
              }
              if (wn->requires_grad) wn->ensure_grad()[flat] += cw * gdotv;
              if (on->requires_grad) {
                T* go = on->ensure_grad().data() + flat * 2;
                go[0] += aw * dwx * gdotv;
                go[1] += aw * dwy * gdotv;
              }
            });
      });
}

template <class T>
MsDeformAttention<T>::MsDeformAttention(int64_t d_model, int levels, int heads, int points,
                                        const SeedTree& seeds)
    : value_proj(d_model, d_model, true, seeds.child("value_proj")),
      output_proj(d_model, d_model, true, seeds.child("output_proj")),
      offset_proj(d_model, (int64_t)heads * levels * points * 2, true,
                  seeds.child("offset_proj")),
      weight_proj(d_model, (int64_t)heads * levels * points, true, seeds.child("weight_proj")),
      d_model_(d_model),
      levels_(levels),
      heads_(heads),
      points_(points) {
  check_arg(d_model % heads == 0, "MsDeformAttention: heads must divide d_model");
  this->register_child("value_proj", value_proj);
  this->register_child("output_proj", output_proj);
  this->register_child("offset_proj", offset_proj);
  this->register_child("weight_proj", weight_proj);

  // Zero-init both heads: attention starts uniform, sampling starts on a
  // deterministic radial neighborhood (head h points along angle 2*pi*h/H,
  // point k at distance k+1 cells).
  offset_proj.weight.node()->value.zero_();
  weight_proj.weight.node()->value.zero_();
  weight_proj.bias.node()->value.zero_();
  Tensor<T>& ob = offset_proj.bias.node()->value;
  for (int h = 0; h < heads; ++h) {
    double angle = 2.0 * M_PI * h / heads;
    for (int l = 0; l < levels; ++l)
      for (int k = 0; k < points; ++k) {
        int64_t base = (((int64_t)h * levels + l) * points + k) * 2;
        ob[base] = T(std::cos(angle) * (k + 1));
        ob[base + 1] = T(std::sin(angle) * (k + 1));
      }
  }
}

template <class T>
Var<T> MsDeformAttention<T>::predict_offsets(const Var<T>& query) const {
  int64_t q = query.size(0);
  return ag::reshape(offset_proj.forward(query), {q, heads_, levels_, points_, 2});
}

template <class T>
Var<T> MsDeformAttention<T>::predict_weights(const Var<T>& query) const {
  int64_t q = query.size(0);
  Var<T> raw = weight_proj.forward(query);  // [Q, H*L*K]
  Var<T> per_head = ag::reshape(raw, {q * heads_, (int64_t)levels_ * points_});
  return ag::reshape(ag::softmax_rows(per_head), {q, heads_, levels_, points_});
}

template <class T>
Var<T> MsDeformAttention<T>::forward(const Var<T>& query, const Tensor<T>& refs,
                                     const Var<T>& values, const std::vector<LevelSpec>& levels,
                                     const Tensor<T>& valid) const {
  check_arg((int64_t)levels.size() == levels_, "MsDeformAttention: level count mismatch");
  check_arg(query.size(1) == d_model_ && values.size(1) == d_model_,
            "MsDeformAttention: d_model mismatch");
  Var<T> v = value_proj.forward(values);
  if (valid.defined()) {
    check_arg(valid.numel() == values.size(0), "MsDeformAttention: valid mask size mismatch");
    v = ag::mul_colvec(v, Var<T>(valid, false));
  }
  Var<T> sampled =
      msdam_core(v, levels, refs, predict_offsets(query), predict_weights(query), heads_);
  return output_proj.forward(sampled);
}

#define LEUKODETR_INSTANTIATE_DEFORM(T)                                                     \
  template Var<T> bilinear_sample<T>(const Var<T>&, T, T);                                  \
  template Var<T> msdam_core<T>(const Var<T>&, const std::vector<LevelSpec>&,               \
                                const Tensor<T>&, const Var<T>&, const Var<T>&, int);       \
  template class MsDeformAttention<T>;

LEUKODETR_INSTANTIATE_DEFORM(float)
LEUKODETR_INSTANTIATE_DEFORM(double)

}  // namespace leukodetr
