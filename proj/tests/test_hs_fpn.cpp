#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "leukodetr/hs_fpn.hpp"
#include "test_util.hpp"

using namespace leukodetr;
using namespace leukodetr::testutil;

namespace {

// A fake 4-level backbone output with the production channel plan.
template <class T>
BackboneOutput<T> fake_backbone(int64_t b, int64_t base, std::mt19937_64& gen) {
  BackboneOutput<T> out;
  out.strides = {8, 16, 32, 64};
  const int64_t chans[4] = {512, 1024, 2048, 2048};
  std::normal_distribution<double> d(0.0, 1.0);
  for (int l = 0; l < 4; ++l) {
    int64_t s = std::max<int64_t>(base >> l, 1);
    Tensor<T> t({b, chans[l], s, s});
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = T(d(gen));
    out.levels.push_back(Var<T>(t, false));
    out.masks.push_back(TensorB::zeros({b, s, s}));
  }
  return out;
}

}  // namespace

TEST_CASE("channel attention with identity transform matches hand computation") {
  SeedTree seeds(1);
  ChannelAttention<double> ca(2, 1, seeds);  // reduction 1: hidden size = 2
  // force T to the identity on positive inputs
  ca.fc1.weight.node()->value = TensorD::from({2, 2}, {1, 0, 0, 1});
  ca.fc1.bias.node()->value.zero_();
  ca.fc2.weight.node()->value = TensorD::from({2, 2}, {1, 0, 0, 1});
  ca.fc2.bias.node()->value.zero_();

  // 2-channel 2x2 map with known positive values
  TensorD x = TensorD::from({1, 2, 2, 2}, {1.0, 2.0, 3.0, 4.0, 0.5, 0.25, 0.75, 0.5});
  VarD w = ca.weights(VarD(x, false), TensorB::zeros({1, 2, 2}));
  auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  CHECK(w.val().at(0, 0) == doctest::Approx(sig(2.5 + 4.0)).epsilon(1e-12));   // avg + max
  CHECK(w.val().at(0, 1) == doctest::Approx(sig(0.5 + 0.75)).epsilon(1e-12));
}

TEST_CASE("constant map pools to the constant and weights stay in (0,1)") {
  SeedTree seeds(2);
  ChannelAttention<double> ca(4, 4, seeds);
  TensorD x({2, 4, 3, 3});
  for (int64_t n = 0; n < 2; ++n)
    for (int64_t c = 0; c < 4; ++c)
      for (int64_t i = 0; i < 9; ++i) x[(n * 4 + c) * 9 + i] = 0.3 * (c + 1) * (n + 1);
  TensorB mask = TensorB::zeros({2, 3, 3});
  // avg == max for a constant map, so the two branches coincide
  VarD avg = ag::masked_avgpool(VarD(x, false), mask);
  VarD mx = ag::masked_maxpool(VarD(x, false), mask);
  for (int64_t i = 0; i < avg.numel(); ++i)
    CHECK(avg.val()[i] == doctest::Approx(mx.val()[i]).epsilon(1e-12));

  std::mt19937_64 gen(3);
  TensorD noisy = randn({2, 4, 5, 5}, gen, 30.0);
  VarD w = ca.weights(VarD(noisy, false), TensorB::zeros({2, 5, 5}));
  for (int64_t i = 0; i < w.numel(); ++i) {
    CHECK(w.val()[i] > 0.0);
    CHECK(w.val()[i] < 1.0);
  }

  TensorB all_masked = TensorB::full({2, 5, 5}, 1);
  CHECK_THROWS_AS((void)ca.weights(VarD(noisy, false), all_masked), std::invalid_argument);
}

TEST_CASE("dimension match reduces channels and rejects unexpected counts") {
  SeedTree seeds(3);
  std::mt19937_64 gen(4);
  DimensionMatch<double> dm1024(1024, seeds.child("a"));
  VarD y = dm1024.forward(VarD(randn({1, 1024, 16, 16}, gen), false));
  CHECK(y.shape() == std::vector<int64_t>({1, 256, 16, 16}));

  DimensionMatch<double> dm512(512, seeds.child("b"));
  VarD z = dm512.forward(VarD(randn({1, 512, 32, 32}, gen), false));
  CHECK(z.shape() == std::vector<int64_t>({1, 256, 32, 32}));

  CHECK_THROWS_AS(DimensionMatch<double>(300, seeds.child("c")), std::invalid_argument);
  CHECK_THROWS_AS(dm512.forward(VarD(randn({1, 1024, 4, 4}, gen), false)),
                  std::invalid_argument);

  // identity-configured 256 -> 256 is a no-op
  DimensionMatch<double> dm256(256, seeds.child("d"));
  dm256.conv.weight.node()->value.zero_();
  for (int64_t c = 0; c < 256; ++c) dm256.conv.weight.node()->value.at(c, c, 0, 0) = 1.0;
  dm256.conv.bias.node()->value.zero_();
  TensorD x = randn({1, 256, 4, 4}, gen);
  VarD same = dm256.forward(VarD(x, false));
  for (int64_t i = 0; i < x.numel(); ++i)
    CHECK(same.val()[i] == doctest::Approx(x[i]).epsilon(1e-12));
}

TEST_CASE("sff fusion degenerate and saturated cases") {
  std::mt19937_64 gen(5);
  for (FpnMode mode : {FpnMode::kBilinear, FpnMode::kTconvBilinear}) {
    CAPTURE(to_string(mode));
    SeedTree seeds(6 + (int)mode);
    SffFusion<double> sff(mode, seeds);
    TensorD high = randn({1, 256, 8, 8}, gen);
    TensorB mask16 = TensorB::zeros({1, 16, 16});

    // f_low = 0 -> f_out = f_att exactly
    VarD zero_low(TensorD::zeros({1, 256, 16, 16}), false);
    VarD f_att = sff.attention_input(VarD(high, false), 16, 16);
    CHECK(f_att.shape() == std::vector<int64_t>({1, 256, 16, 16}));
    VarD fused = sff.forward(VarD(high, false), zero_low, mask16);
    for (int64_t i = 0; i < fused.numel(); ++i)
      CHECK(fused.val()[i] == doctest::Approx(f_att.val()[i]).epsilon(1e-12));

    // saturate the gate toward 1: f_out ~ f_low + f_att
    sff.ca.fc1.weight.node()->value.zero_();
    sff.ca.fc1.bias.node()->value.zero_();
    sff.ca.fc2.weight.node()->value.zero_();
    sff.ca.fc2.bias.node()->value.fill(20.0);
    TensorD low = randn({1, 256, 16, 16}, gen);
    VarD open = sff.forward(VarD(high, false), VarD(low, false), mask16);
    VarD att2 = sff.attention_input(VarD(high, false), 16, 16);
    double worst = 0;
    for (int64_t i = 0; i < open.numel(); ++i)
      worst = std::max(worst,
                       std::abs(open.val()[i] - (low[i] + att2.val()[i])));
    CHECK(worst < 1e-4);

    // gate toward 0: the low path disappears
    sff.ca.fc2.bias.node()->value.fill(-20.0);
    VarD closed = sff.forward(VarD(high, false), VarD(low, false), mask16);
    worst = 0;
    for (int64_t i = 0; i < closed.numel(); ++i)
      worst = std::max(worst, std::abs(closed.val()[i] - att2.val()[i]));
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("sff output snaps to odd low-level grids") {
  SeedTree seeds(8);
  std::mt19937_64 gen(6);
  SffFusion<double> sff(FpnMode::kTconvBilinear, seeds);
  VarD high(randn({1, 256, 8, 8}, gen), false);
  VarD low(randn({1, 256, 15, 17}, gen), false);
  VarD out = sff.forward(high, low, TensorB::zeros({1, 15, 17}));
  CHECK(out.shape() == std::vector<int64_t>({1, 256, 15, 17}));
}

TEST_CASE("eq-2 reconstruction: f_out - f_att == f_low * CA(f_att)") {
  SeedTree seeds(9);
  std::mt19937_64 gen(7);
  SffFusion<double> sff(FpnMode::kTconvBilinear, seeds);
  TensorD high = randn({2, 256, 4, 4}, gen);
  TensorD low = randn({2, 256, 8, 8}, gen);
  TensorB mask = TensorB::zeros({2, 8, 8});
  VarD f_att = sff.attention_input(VarD(high, false), 8, 8);
  VarD gates = sff.ca.weights(f_att, mask);
  VarD fused = sff.forward(VarD(high, false), VarD(low, false), mask);
  for (int64_t n = 0; n < 2; ++n)
    for (int64_t c = 0; c < 256; ++c)
      for (int64_t i = 0; i < 64; ++i) {
        double lhs = fused.val()[(n * 256 + c) * 64 + i] - f_att.val()[(n * 256 + c) * 64 + i];
        double rhs = low[(n * 256 + c) * 64 + i] * gates.val().at(n, c);
        CHECK(lhs == doctest::Approx(rhs).epsilon(1e-10));
      }
}

TEST_CASE("pyramid fuses four levels at 256 channels with preserved grids") {
  std::mt19937_64 gen(8);
  for (FpnVariant variant : {FpnVariant::kHsFpn, FpnVariant::kFpn}) {
    CAPTURE(to_string(variant));
    SeedTree seeds(10 + (int)variant);
    HsFpn<float> fpn(FpnMode::kTconvBilinear, variant, seeds);
    auto bb = fake_backbone<float>(2, 32, gen);
    auto out = fpn.forward(bb);
    REQUIRE(out.levels.size() == 4);
    for (int l = 0; l < 4; ++l) {
      CHECK(out.levels[l].size(1) == 256);
      CHECK(out.levels[l].size(2) == bb.levels[l].size(2));  // scale closure
      CHECK(out.levels[l].size(3) == bb.levels[l].size(3));
      for (int64_t i = 0; i < out.levels[l].numel(); ++i)
        CHECK(std::isfinite(out.levels[l].val()[i]));
    }
  }
}

TEST_CASE("bl and tconv_bl modes produce different pyramids") {
  std::mt19937_64 gen(9);
  SeedTree seeds(77);  // same seed: shared weights wherever shapes allow
  HsFpn<float> a(FpnMode::kBilinear, FpnVariant::kHsFpn, seeds);
  HsFpn<float> b(FpnMode::kTconvBilinear, FpnVariant::kHsFpn, seeds);
  auto bb = fake_backbone<float>(1, 16, gen);
  auto pa = a.forward(bb);
  auto pb = b.forward(bb);
  double diff = 0;
  for (int64_t i = 0; i < pa.levels[0].numel(); ++i)
    diff = std::max(diff, std::abs((double)pa.levels[0].val()[i] - pb.levels[0].val()[i]));
  CHECK(diff > 1e-3);
}

TEST_CASE("unimplemented variants are rejected at construction") {
  SeedTree seeds(11);
  CHECK_THROWS_AS(HsFpn<float>(FpnMode::kBilinear, FpnVariant::kBiFpn, seeds),
                  std::invalid_argument);
  CHECK_THROWS_AS(HsFpn<float>(FpnMode::kBilinear, FpnVariant::kPaFpn, seeds),
                  std::invalid_argument);
  CHECK_THROWS_AS(HsFpn<float>(FpnMode::kBilinear, FpnVariant::kFaPn, seeds),
                  std::invalid_argument);
}
