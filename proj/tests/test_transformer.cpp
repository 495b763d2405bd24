#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>

#include "leukodetr/detector.hpp"
#include "test_util.hpp"

using namespace leukodetr;
using namespace leukodetr::testutil;

namespace {

TransformerConfig small_cfg(int enc, int dec) {
  TransformerConfig cfg;
  cfg.d_model = 32;
  cfg.ffn_dim = 64;
  cfg.heads = 4;
  cfg.points = 2;
  cfg.levels = 4;
  cfg.enc_layers = enc;
  cfg.dec_layers = dec;
  cfg.num_queries = 12;
  cfg.num_classes = 3;
  cfg.dropout = 0.0;
  return cfg;
}

template <class T>
std::pair<std::vector<Var<T>>, std::vector<TensorB>> pyramid_slices(
    const TransformerConfig& cfg, const std::vector<LevelSpec>& levels, std::mt19937_64& gen,
    double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  std::vector<Var<T>> maps;
  std::vector<TensorB> masks;
  for (const auto& l : levels) {
    Tensor<T> t({cfg.d_model, l.h, l.w});
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = T(d(gen));
    maps.push_back(Var<T>(t, false));
    masks.push_back(TensorB::zeros({l.h, l.w}));
  }
  return {maps, masks};
}

}  // namespace

TEST_CASE("token count follows the level grids") {
  TransformerConfig cfg = small_cfg(0, 1);
  cfg.d_model = 32;
  SeedTree seeds(1);
  Transformer<double> tr(cfg, seeds);
  std::mt19937_64 gen(2);
  auto [maps, masks] = pyramid_slices<double>(cfg, {{32, 32}, {16, 16}, {8, 8}, {4, 4}}, gen);
  auto img = tr.tokenize(maps, masks);
  CHECK(img.tokens.size(0) == 1024 + 256 + 64 + 16);
  CHECK(img.tokens.size(1) == 32);

  // zero encoder layers leave the tokens untouched
  ForwardCtx ctx;
  VarD memory = tr.encode(img, ctx);
  for (int64_t i = 0; i < memory.numel(); ++i)
    CHECK(memory.val()[i] == img.tokens.val()[i]);
}

TEST_CASE("reference points sit at cell centers replicated across levels") {
  TransformerConfig cfg = small_cfg(0, 1);
  SeedTree seeds(3);
  Transformer<double> tr(cfg, seeds);
  std::mt19937_64 gen(4);
  auto [maps, masks] = pyramid_slices<double>(cfg, {{6, 5}, {3, 3}, {2, 2}, {1, 1}}, gen);
  auto img = tr.tokenize(maps, masks);
  // token for cell (2, 3) of the 6x5 level
  int64_t t = 2 * 5 + 3;
  for (int l = 0; l < 4; ++l) {
    CHECK(img.ref_centers.at(t, l, 0) == doctest::Approx((3 + 0.5) / 5.0));
    CHECK(img.ref_centers.at(t, l, 1) == doctest::Approx((2 + 0.5) / 6.0));
  }
}

TEST_CASE("sine embeddings are distinct per position up to 64x64") {
  TensorD pe = sine_position_embedding<double>(64, 64, 64, 64, 64);
  std::set<std::vector<double>> rows;
  for (int64_t i = 0; i < 64 * 64; ++i) {
    std::vector<double> row(pe.data() + i * 64, pe.data() + (i + 1) * 64);
    rows.insert(row);
  }
  CHECK(rows.size() == 64 * 64);
  // deterministic given the same geometry
  TensorD again = sine_position_embedding<double>(64, 64, 64, 64, 64);
  for (int64_t i = 0; i < pe.numel(); ++i) CHECK(pe[i] == again[i]);
}

TEST_CASE("scale encoding separates coincident normalized positions") {
  // cell (1,1) of a 6x6 grid and cell (0,0) of a 2x2 grid share the center
  // (0.25, 0.25); only the scale embedding tells them apart.
  auto run = [&](ScalePeKind scale) {
    TransformerConfig cfg = small_cfg(0, 1);
    cfg.scale_pe = scale;
    SeedTree seeds(5);
    Transformer<double> tr(cfg, seeds);
    std::mt19937_64 gen(6);
    std::vector<LevelSpec> levels = {{6, 6}, {2, 2}, {1, 1}, {1, 1}};
    std::vector<Var<double>> maps;
    std::vector<TensorB> masks;
    for (const auto& l : levels) {
      maps.push_back(VarD(TensorD::zeros({cfg.d_model, l.h, l.w}), false));
      masks.push_back(TensorB::zeros({l.h, l.w}));
    }
    auto img = tr.tokenize(maps, masks);
    int64_t t1 = 1 * 6 + 1;       // (1,1) in the 6x6 level
    int64_t t2 = 36 + 0;          // (0,0) in the 2x2 level
    double diff = 0;
    for (int64_t c = 0; c < cfg.d_model; ++c)
      diff = std::max(diff,
                      std::abs(img.tokens.val().at(t1, c) - img.tokens.val().at(t2, c)));
    return diff;
  };
  CHECK(run(ScalePeKind::kNone) < 1e-12);
  CHECK(run(ScalePeKind::kLearned) > 1e-3);
}

TEST_CASE("pe variants all run") {
  std::mt19937_64 gen(7);
  for (SpatialPeKind sp : {SpatialPeKind::kSin, SpatialPeKind::kLearned, SpatialPeKind::kNone})
    for (ScalePeKind sc : {ScalePeKind::kLearned, ScalePeKind::kNone}) {
      CAPTURE(to_string(sp));
      CAPTURE(to_string(sc));
      TransformerConfig cfg = small_cfg(1, 1);
      cfg.spatial_pe = sp;
      cfg.scale_pe = sc;
      SeedTree seeds(8);
      Transformer<double> tr(cfg, seeds);
      auto [maps, masks] = pyramid_slices<double>(cfg, {{8, 8}, {4, 4}, {2, 2}, {1, 1}}, gen);
      ForwardCtx ctx;
      auto img = tr.tokenize(maps, masks);
      auto preds = tr.decode(tr.encode(img, ctx), img, ctx);
      CHECK(preds.size() == 1);
    }
}

TEST_CASE("decoder emits one prediction set per layer with bounded boxes") {
  std::mt19937_64 gen(9);
  for (int trial = 0; trial < 25; ++trial) {
    TransformerConfig cfg = small_cfg(1, 3);
    SeedTree seeds(100 + trial);
    Transformer<double> tr(cfg, seeds);
    // randomize every parameter to probe the sigmoid bound
    std::mt19937_64 pgen(200 + trial);
    for (auto& p : tr.named_parameters())
      init::normal_(p.var->node()->value, 0.0, 1.0, pgen);
    auto [maps, masks] = pyramid_slices<double>(cfg, {{8, 8}, {4, 4}, {2, 2}, {1, 1}}, gen, 2.0);
    ForwardCtx ctx;
    auto img = tr.tokenize(maps, masks);
    auto preds = tr.decode(tr.encode(img, ctx), img, ctx);
    REQUIRE(preds.size() == 3);
    for (const auto& p : preds) {
      CHECK(p.logits.shape() == std::vector<int64_t>({12, 3}));
      CHECK(p.boxes.shape() == std::vector<int64_t>({12, 4}));
      for (int64_t i = 0; i < p.boxes.numel(); ++i) {
        CHECK(p.boxes.val()[i] > 0.0);
        CHECK(p.boxes.val()[i] < 1.0);
      }
    }
  }
}

TEST_CASE("encoder and decoder depth grid instantiates and runs") {
  std::mt19937_64 gen(10);
  for (int e : {0, 1, 3, 6})
    for (int d : {1, 3, 6}) {
      CAPTURE(e);
      CAPTURE(d);
      TransformerConfig cfg = small_cfg(e, d);
      SeedTree seeds(11);
      Transformer<double> tr(cfg, seeds);
      auto [maps, masks] = pyramid_slices<double>(cfg, {{4, 4}, {2, 2}, {1, 1}, {1, 1}}, gen);
      ForwardCtx ctx;
      auto img = tr.tokenize(maps, masks);
      auto preds = tr.decode(tr.encode(img, ctx), img, ctx);
      CHECK((int)preds.size() == d);
    }
}

TEST_CASE("add-norm keeps activations finite with sane per-token variance") {
  TransformerConfig cfg = small_cfg(3, 1);
  SeedTree seeds(12);
  Transformer<double> tr(cfg, seeds);
  std::mt19937_64 gen(13);
  auto [maps, masks] = pyramid_slices<double>(cfg, {{8, 8}, {4, 4}, {2, 2}, {1, 1}}, gen, 1.0);
  ForwardCtx ctx;
  auto img = tr.tokenize(maps, masks);
  VarD memory = tr.encode(img, ctx);
  for (int64_t t = 0; t < memory.size(0); ++t) {
    double mean = 0, var = 0;
    for (int64_t c = 0; c < cfg.d_model; ++c) mean += memory.val().at(t, c);
    mean /= cfg.d_model;
    for (int64_t c = 0; c < cfg.d_model; ++c) {
      double v = memory.val().at(t, c) - mean;
      CHECK(std::isfinite(v));
      var += v * v;
    }
    var /= cfg.d_model;
    CHECK(var > 0.1);
    CHECK(var < 10.0);
  }
}

TEST_CASE("permuting query embeddings permutes outputs identically") {
  TransformerConfig cfg = small_cfg(1, 2);
  SeedTree seeds(14);
  Transformer<double> tr(cfg, seeds);
  std::mt19937_64 gen(15);
  auto [maps, masks] = pyramid_slices<double>(cfg, {{6, 6}, {3, 3}, {2, 2}, {1, 1}}, gen);
  ForwardCtx ctx;
  auto img = tr.tokenize(maps, masks);
  VarD memory = tr.encode(img, ctx);
  auto base = tr.decode(memory, img, ctx);

  std::vector<int64_t> perm = {7, 3, 11, 0, 5, 9, 1, 10, 4, 8, 2, 6};
  TensorD& qe = tr.query_embed.weight.node()->value;
  TensorD orig = qe.clone();
  for (size_t i = 0; i < perm.size(); ++i)
    for (int64_t c = 0; c < qe.size(1); ++c) qe.at((int64_t)i, c) = orig.at(perm[i], c);
  auto shuffled = tr.decode(memory, img, ctx);

  for (size_t li = 0; li < base.size(); ++li)
    for (size_t i = 0; i < perm.size(); ++i)
      for (int64_t c = 0; c < 3; ++c)
        CHECK(shuffled[li].logits.val().at((int64_t)i, c) ==
              doctest::Approx(base[li].logits.val().at(perm[i], c)).epsilon(1e-9));
}

TEST_CASE("ffn identity construction reproduces positive inputs") {
  SeedTree seeds(16);
  TransformerConfig cfg = small_cfg(1, 1);
  EncoderLayer<double> layer(cfg, seeds);
  // ffn1 = [I; 0], ffn2 = [I 0], zero biases: relu passes positives through
  layer.ffn1.weight.node()->value.zero_();
  layer.ffn1.bias.node()->value.zero_();
  layer.ffn2.weight.node()->value.zero_();
  layer.ffn2.bias.node()->value.zero_();
  for (int64_t i = 0; i < cfg.d_model; ++i) {
    layer.ffn1.weight.node()->value.at(i, i) = 1.0;
    layer.ffn2.weight.node()->value.at(i, i) = 1.0;
  }
  std::mt19937_64 gen(17);
  VarD x(urand({5, cfg.d_model}, gen, 0.1, 2.0), false);
  VarD h = layer.ffn2.forward(ag::relu(layer.ffn1.forward(x)));
  for (int64_t i = 0; i < x.numel(); ++i)
    CHECK(h.val()[i] == doctest::Approx(x.val()[i]).epsilon(1e-12));

  // zero input and zero biases give zero output regardless of weights
  std::mt19937_64 g2(18);
  init::normal_(layer.ffn1.weight.node()->value, 0.0, 1.0, g2);
  init::normal_(layer.ffn2.weight.node()->value, 0.0, 1.0, g2);
  VarD zero(TensorD::zeros({4, cfg.d_model}), false);
  VarD hz = layer.ffn2.forward(ag::relu(layer.ffn1.forward(zero)));
  for (int64_t i = 0; i < hz.numel(); ++i) CHECK(hz.val()[i] == 0.0);
}

TEST_CASE("full detector forward produces per-layer batched predictions") {
  ModelConfig mc;
  mc.transformer = small_cfg(1, 2);
  mc.transformer.d_model = 256;  // pyramid channels are fixed at 256
  mc.transformer.heads = 8;
  LeukoDetector<float> model(mc, 99);
  std::mt19937_64 gen(19);
  std::normal_distribution<double> d(0, 1);
  TensorF px({2, 3, 64, 96});
  for (int64_t i = 0; i < px.numel(); ++i) px[i] = (float)d(gen);
  TensorB mask = TensorB::zeros({2, 64, 96});
  for (int64_t j = 0; j < 96; ++j) mask[1 * 64 * 96 + 50 * 96 + j] = 1;  // padding in image 1
  ForwardCtx ctx;
  auto out = model.forward(px, mask, ctx);
  REQUIRE(out.size() == 2);       // decoder layers
  REQUIRE(out[0].size() == 2);    // batch
  CHECK(out[1][0].logits.shape() == std::vector<int64_t>({12, 3}));
  CHECK(out[1][1].boxes.shape() == std::vector<int64_t>({12, 4}));

  auto dets = extract_detections(out[1][0], 64, 96, 0.0);
  CHECK(dets.size() <= 12);
  for (const auto& dt : dets) {
    CHECK(dt.x2 > dt.x1);
    CHECK(dt.y2 > dt.y1);
    CHECK(dt.x2 <= 96.0);
    CHECK(dt.confidence > 0.0);
    CHECK(dt.confidence < 1.0);
  }
}

TEST_CASE("training mode dropout is rng-driven and reproducible") {
  TransformerConfig cfg = small_cfg(1, 1);
  cfg.dropout = 0.2;
  SeedTree seeds(20);
  Transformer<double> tr(cfg, seeds);
  std::mt19937_64 gen(21);
  auto [maps, masks] = pyramid_slices<double>(cfg, {{4, 4}, {2, 2}, {1, 1}, {1, 1}}, gen);
  auto img = tr.tokenize(maps, masks);

  std::mt19937_64 r1(5), r2(5), r3(6);
  ForwardCtx c1{true, &r1}, c2{true, &r2}, c3{true, &r3};
  VarD a = tr.encode(img, c1);
  VarD b = tr.encode(img, c2);
  VarD c = tr.encode(img, c3);
  double same = 0, diff = 0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    same = std::max(same, std::abs(a.val()[i] - b.val()[i]));
    diff = std::max(diff, std::abs(a.val()[i] - c.val()[i]));
  }
  CHECK(same == 0.0);
  CHECK(diff > 1e-6);
}
