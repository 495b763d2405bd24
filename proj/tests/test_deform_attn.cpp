#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "leukodetr/deform_attn.hpp"
#include "test_util.hpp"

using namespace leukodetr;
using namespace leukodetr::testutil;

namespace {

// Scalar 4-corner interpolation written independently of the library path.
std::vector<double> oracle_bilinear(const TensorD& map, double x, double y) {
  int64_t c = map.size(0), h = map.size(1), w = map.size(2);
  double gx = x * w - 0.5, gy = y * h - 0.5;
  auto read = [&](int64_t ch, int64_t yi, int64_t xi) {
    return (xi >= 0 && xi < w && yi >= 0 && yi < h) ? map.at(ch, yi, xi) : 0.0;
  };
  int64_t x0 = (int64_t)std::floor(gx), y0 = (int64_t)std::floor(gy);
  double fx = gx - x0, fy = gy - y0;
  std::vector<double> out(c);
  for (int64_t ch = 0; ch < c; ++ch) {
    double top = read(ch, y0, x0) * (1 - fx) + read(ch, y0, x0 + 1) * fx;
    double bot = read(ch, y0 + 1, x0) * (1 - fx) + read(ch, y0 + 1, x0 + 1) * fx;
    out[ch] = top * (1 - fy) + bot * fy;
  }
  return out;
}

// Direct evaluation of the multi-scale deformable aggregation with plain
// loops over heads, levels and points.
TensorD oracle_msdam(const TensorD& values, const std::vector<LevelSpec>& levels,
                     const TensorD& refs, const TensorD& offsets, const TensorD& weights,
                     int heads) {
  int64_t q = offsets.size(0), L = (int64_t)levels.size();
  int64_t k = offsets.size(3), d = values.size(1), dh = d / heads;
  TensorD out = TensorD::zeros({q, d});
  for (int64_t qi = 0; qi < q; ++qi)
    for (int64_t hi = 0; hi < heads; ++hi)
      for (int64_t li = 0; li < L; ++li) {
        // rebuild this level as a [dh, H, W] map for the head's channel slice
        int64_t base = 0;
        for (int64_t p = 0; p < li; ++p) base += levels[p].cells();
        TensorD map({dh, levels[li].h, levels[li].w});
        for (int64_t ch = 0; ch < dh; ++ch)
          for (int64_t yy = 0; yy < levels[li].h; ++yy)
            for (int64_t xx = 0; xx < levels[li].w; ++xx)
              map.at(ch, yy, xx) = values.at(base + yy * levels[li].w + xx, hi * dh + ch);
        for (int64_t ki = 0; ki < k; ++ki) {
          int64_t flat = (((qi * heads + hi) * L + li) * k + ki) * 2;  // [Q,H,L,K,2]
          double px = refs.at(qi, li, 0) + offsets[flat] / levels[li].w;
          double py = refs.at(qi, li, 1) + offsets[flat + 1] / levels[li].h;
          std::vector<double> s = oracle_bilinear(map, px, py);
          double wgt = weights.at(qi, hi, li, ki);
          for (int64_t ch = 0; ch < dh; ++ch) out.at(qi, hi * dh + ch) += wgt * s[ch];
        }
      }
  return out;
}

}  // namespace

TEST_CASE("bilinear_sample hits cell centers exactly") {
  std::mt19937_64 gen(1);
  TensorD map = randn({3, 4, 6}, gen);
  for (int64_t i = 0; i < 4; ++i)
    for (int64_t j = 0; j < 6; ++j) {
      VarD s = bilinear_sample(VarD(map), (j + 0.5) / 6.0, (i + 0.5) / 4.0);
      for (int64_t c = 0; c < 3; ++c)
        CHECK(s.val()[c] == doctest::Approx(map.at(c, i, j)).epsilon(1e-12));
    }
  // midpoint of two horizontally adjacent cells
  VarD mid = bilinear_sample(VarD(map), 2.0 / 6.0, 0.5 / 4.0);
  for (int64_t c = 0; c < 3; ++c)
    CHECK(mid.val()[c] == doctest::Approx((map.at(c, 0, 1) + map.at(c, 0, 2)) / 2));
}

TEST_CASE("bilinear_sample matches the scalar oracle at random points") {
  std::mt19937_64 gen(2);
  TensorD map = randn({2, 5, 7}, gen);
  std::uniform_real_distribution<double> u(-0.3, 1.3);  // includes out-of-range
  for (int trial = 0; trial < 200; ++trial) {
    double x = u(gen), y = u(gen);
    VarD s = bilinear_sample(VarD(map), x, y);
    auto ref = oracle_bilinear(map, x, y);
    for (int64_t c = 0; c < 2; ++c) CHECK(s.val()[c] == doctest::Approx(ref[c]).epsilon(1e-12));
  }
  VarD leaf(map, true);
  CHECK(grad_check_ws({leaf}, [&] { return bilinear_sample(leaf, 0.37, 0.81); }, gen) < 1e-6);
}

TEST_CASE("zero-initialized heads give uniform weights and the radial offset bias") {
  SeedTree seeds(7);
  MsDeformAttention<double> attn(32, 2, 4, 3, seeds);
  std::mt19937_64 gen(3);
  VarD query(randn({5, 32}, gen), false);

  VarD w = attn.predict_weights(query);
  for (int64_t i = 0; i < w.numel(); ++i)
    CHECK(w.val()[i] == doctest::Approx(1.0 / 6).epsilon(1e-12));  // 1/(L*K)

  VarD off = attn.predict_offsets(query);
  for (int64_t qi = 0; qi < 5; ++qi)
    for (int h = 0; h < 4; ++h) {
      double angle = 2.0 * M_PI * h / 4;
      for (int l = 0; l < 2; ++l)
        for (int k = 0; k < 3; ++k) {
          CHECK(off.val()[(((qi * 4 + h) * 2 + l) * 3 + k) * 2] ==
                doctest::Approx(std::cos(angle) * (k + 1)));
          CHECK(off.val()[(((qi * 4 + h) * 2 + l) * 3 + k) * 2 + 1] ==
                doctest::Approx(std::sin(angle) * (k + 1)));
        }
    }
}

TEST_CASE("weights sum to one per query and head for any projection") {
  SeedTree seeds(11);
  MsDeformAttention<double> attn(32, 3, 4, 4, seeds);
  std::mt19937_64 gen(5);
  init::normal_(attn.weight_proj.weight.node()->value, 0.0, 1.0, gen);
  init::normal_(attn.weight_proj.bias.node()->value, 0.0, 1.0, gen);
  VarD query(randn({7, 32}, gen), false);
  VarD w = attn.predict_weights(query);  // [7, 4, 3, 4]
  for (int64_t qi = 0; qi < 7; ++qi)
    for (int64_t h = 0; h < 4; ++h) {
      double s = 0;
      for (int64_t l = 0; l < 3; ++l)
        for (int64_t k = 0; k < 4; ++k) s += w.val()[((qi * 4 + h) * 3 + l) * 4 + k];
      CHECK(std::abs(s - 1.0) < 1e-5);
    }
}

TEST_CASE("msdam degenerate cases") {
  std::mt19937_64 gen(6);
  // single level, zero offsets, uniform weights: output = value at the
  // reference point, per head
  std::vector<LevelSpec> levels = {{4, 5}};
  int heads = 2, k = 3;
  int64_t d = 8, dh = d / heads;
  TensorD values = randn({20, d}, gen);
  TensorD refs({2, 1, 2});
  refs.at(0, 0, 0) = 0.33; refs.at(0, 0, 1) = 0.62;
  refs.at(1, 0, 0) = 0.71; refs.at(1, 0, 1) = 0.18;
  TensorD offsets = TensorD::zeros({2, heads, 1, k, 2});
  TensorD weights = TensorD::full({2, heads, 1, k}, 1.0 / k);
  VarD out = msdam_core(VarD(values), levels, refs, VarD(offsets), VarD(weights), heads);
  for (int64_t qi = 0; qi < 2; ++qi) {
    TensorD map({d, 4, 5});
    for (int64_t ch = 0; ch < d; ++ch)
      for (int64_t y = 0; y < 4; ++y)
        for (int64_t x = 0; x < 5; ++x) map.at(ch, y, x) = values.at(y * 5 + x, ch);
    auto ref_val = oracle_bilinear(map, refs.at(qi, 0, 0), refs.at(qi, 0, 1));
    for (int64_t c = 0; c < d; ++c)
      CHECK(out.val().at(qi, c) == doctest::Approx(ref_val[c]).epsilon(1e-10));
  }

  // one-hot weights pick out a single sampled point
  TensorD onehot = TensorD::zeros({2, heads, 1, k});
  for (int64_t qi = 0; qi < 2; ++qi)
    for (int h = 0; h < heads; ++h) onehot.at(qi, h, 0, 1) = 1.0;
  TensorD off2 = TensorD::zeros({2, heads, 1, k, 2});
  for (int64_t i = 0; i < off2.numel(); ++i) off2[i] = 0.7;
  VarD picked = msdam_core(VarD(values), levels, refs, VarD(off2), VarD(onehot), heads);
  for (int64_t qi = 0; qi < 2; ++qi)
    for (int h = 0; h < heads; ++h) {
      TensorD map({dh, 4, 5});
      for (int64_t ch = 0; ch < dh; ++ch)
        for (int64_t y = 0; y < 4; ++y)
          for (int64_t x = 0; x < 5; ++x) map.at(ch, y, x) = values.at(y * 5 + x, h * dh + ch);
      auto s = oracle_bilinear(map, refs.at(qi, 0, 0) + 0.7 / 5, refs.at(qi, 0, 1) + 0.7 / 4);
      for (int64_t c = 0; c < dh; ++c)
        CHECK(picked.val().at(qi, h * dh + c) == doctest::Approx(s[c]).epsilon(1e-10));
    }
}

TEST_CASE("msdam matches the triple-loop oracle on random instances") {
  std::mt19937_64 gen(8);
  std::uniform_real_distribution<double> u01(0.0, 1.0), uo(-1.5, 1.5);
  for (int trial = 0; trial < 30; ++trial) {
    int heads = 1 + (trial % 2), k = 1 + (trial % 2), q = 1 + trial % 4;
    std::vector<LevelSpec> levels = {{3 + trial % 5, 4 + trial % 4}, {2 + trial % 3, 3}};
    int64_t d = 4 * heads;
    TensorD values = randn({total_cells(levels), d}, gen);
    TensorD refs({q, 2, 2});
    for (int64_t i = 0; i < refs.numel(); ++i) refs[i] = u01(gen);
    TensorD offsets({q, heads, 2, k, 2});
    for (int64_t i = 0; i < offsets.numel(); ++i) offsets[i] = uo(gen);
    TensorD weights({q, heads, 2, k});
    for (int64_t i = 0; i < weights.numel(); ++i) weights[i] = u01(gen) + 0.1;
    VarD out = msdam_core(VarD(values), levels, refs, VarD(offsets), VarD(weights), heads);
    TensorD ref = oracle_msdam(values, levels, refs, offsets, weights, heads);
    for (int64_t i = 0; i < ref.numel(); ++i)
      CHECK(std::abs(out.val()[i] - ref[i]) < 1e-10);
  }
}

TEST_CASE("msdam gradients match finite differences") {
  std::mt19937_64 gen(9);
  std::vector<LevelSpec> levels = {{4, 4}, {2, 3}};
  int heads = 2, k = 2;
  int64_t q = 2, d = 8;
  VarD values(randn({total_cells(levels), d}, gen), true);
  TensorD refs({q, 2, 2});
  std::uniform_real_distribution<double> u(0.15, 0.85);
  for (int64_t i = 0; i < refs.numel(); ++i) refs[i] = u(gen);
  VarD offsets(urand({q, heads, 2, k, 2}, gen, -0.9, 0.9), true);
  VarD weights(urand({q, heads, 2, k}, gen, 0.1, 1.0), true);
  double err = grad_check_ws({values, offsets, weights}, [&] {
    return msdam_core(values, levels, refs, offsets, weights, heads);
  }, gen);
  CHECK(err < 1e-5);
}

TEST_CASE("full module gradients flow into query, values and offset head") {
  SeedTree seeds(21);
  int heads = 2, levels_n = 2, k = 2;
  int64_t d = 16;
  MsDeformAttention<double> attn(d, levels_n, heads, k, seeds);
  std::mt19937_64 gen(10);
  // move projections off their zero init so gradients are informative
  init::normal_(attn.offset_proj.weight.node()->value, 0.0, 0.02, gen);
  init::normal_(attn.weight_proj.weight.node()->value, 0.0, 0.2, gen);
  std::vector<LevelSpec> levels = {{4, 4}, {3, 3}};
  VarD query(randn({3, d}, gen), true);
  VarD values(randn({total_cells(levels), d}, gen), true);
  TensorD refs({3, 2, 2});
  std::uniform_real_distribution<double> u(0.2, 0.8);
  for (int64_t i = 0; i < refs.numel(); ++i) refs[i] = u(gen);
  Tensor<double> valid = TensorD::full({total_cells(levels)}, 1.0);

  double err = grad_check_ws(
      {query, values, attn.offset_proj.weight, attn.offset_proj.bias, attn.weight_proj.weight},
      [&] { return attn.forward(query, refs, values, levels, valid); }, gen);
  CHECK(err < 1e-4);
}

TEST_CASE("masked value rows do not contribute") {
  SeedTree seeds(33);
  MsDeformAttention<double> attn(8, 1, 2, 2, seeds);
  std::mt19937_64 gen(11);
  std::vector<LevelSpec> levels = {{3, 4}};
  VarD query(randn({2, 8}, gen), false);
  TensorD refs({2, 1, 2});
  refs.fill(0.5);
  TensorD valid = TensorD::full({12}, 1.0);
  valid[5] = 0;  // mask one cell
  TensorD v1 = randn({12, 8}, gen);
  TensorD v2 = v1.clone();
  for (int64_t c = 0; c < 8; ++c) v2.at(5, c) = 1e6;  // garbage under the mask
  VarD a = attn.forward(query, refs, VarD(v1), levels, valid);
  VarD b = attn.forward(query, refs, VarD(v2), levels, valid);
  for (int64_t i = 0; i < a.numel(); ++i) CHECK(a.val()[i] == doctest::Approx(b.val()[i]));
}

TEST_CASE("locality: distant cells cannot influence a query") {
  SeedTree seeds(44);
  MsDeformAttention<double> attn(8, 1, 2, 2, seeds);  // zero-init offsets: radius <= K cells
  std::mt19937_64 gen(12);
  std::vector<LevelSpec> levels = {{8, 8}};
  VarD query(randn({1, 8}, gen), false);
  TensorD refs({1, 1, 2});
  refs.fill(0.5);  // grid coords (3.5, 3.5); max offset magnitude K=2 cells
  TensorD v1 = randn({64, 8}, gen);
  TensorD v2 = v1.clone();
  for (int64_t c = 0; c < 8; ++c) v2.at(7 * 8 + 7, c) += 100.0;  // corner, > 2 cells away
  TensorD no_mask = TensorD::full({64}, 1.0);
  VarD a = attn.forward(query, refs, VarD(v1), levels, no_mask);
  VarD b = attn.forward(query, refs, VarD(v2), levels, no_mask);
  for (int64_t i = 0; i < a.numel(); ++i) CHECK(a.val()[i] == doctest::Approx(b.val()[i]));
}
