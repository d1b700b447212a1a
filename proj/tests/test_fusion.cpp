#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "stf/fusion.hpp"
#include "test_util.hpp"

using namespace stf;

namespace {

struct Fixture {
  Fusion<double> fusion;
  ParamStore<double> store;

  Fixture(std::vector<int> level_channels, FusionConfig cfg, std::uint64_t seed = 41) {
    fusion.level_channels = std::move(level_channels);
    fusion.cfg = cfg;
    std::mt19937_64 rng(seed);
    fusion.register_params(store, rng);
  }

  Tensor<double> run(const std::vector<Tensor<double>>& o, const std::vector<Tensor<double>>& s) {
    Tape<double> tp;
    VarMap<double> vm = VarMap<double>::bind(tp, store);
    std::vector<Var> vo, vs;
    for (const auto& t : o) vo.push_back(tp.leaf(t));
    for (const auto& t : s) vs.push_back(tp.leaf(t));
    return tp.val(fusion.forward(tp, vm, vo, vs));
  }
};

std::vector<Tensor<double>> random_pyramid(std::mt19937_64& rng, const std::vector<int>& channels,
                                           int h0, int w0) {
  std::vector<Tensor<double>> pyr;
  for (size_t l = 0; l < channels.size(); ++l) {
    pyr.push_back(stf::test::randn({1, channels[l], h0 >> l, w0 >> l}, rng));
  }
  return pyr;
}

}  // namespace

TEST_CASE("zero pyramids map to zero for every strategy") {
  for (FusionStrategy s : {FusionStrategy::kDual, FusionStrategy::kConcat, FusionStrategy::kMedian,
                           FusionStrategy::kMean, FusionStrategy::kMax}) {
    FusionConfig cfg;
    cfg.channels = 4;
    cfg.num_sweeps = 1;
    cfg.strategy = s;
    Fixture f({3, 4}, cfg);
    std::vector<Tensor<double>> zo = {Tensor<double>({1, 3, 8, 8}), Tensor<double>({1, 4, 4, 4})};
    CHECK(f.run(zo, zo).max_abs() == 0.0);
  }
}

TEST_CASE("output is always at the finest resolution and fused width") {
  std::mt19937_64 rng(1);
  for (FusionStrategy s : {FusionStrategy::kDual, FusionStrategy::kConcat, FusionStrategy::kMedian,
                           FusionStrategy::kMean, FusionStrategy::kMax}) {
    FusionConfig cfg;
    cfg.channels = 5;
    cfg.num_sweeps = 2;
    cfg.strategy = s;
    Fixture f({3, 4, 2}, cfg);
    auto o = random_pyramid(rng, {3, 4, 2}, 16, 16);
    auto sp = random_pyramid(rng, {3, 4, 2}, 16, 16);
    Tensor<double> out = f.run(o, sp);
    CHECK(out.same_shape(Tensor<double>({1, 5, 16, 16})));
  }
}

TEST_CASE("mismatched pyramid level counts are rejected") {
  FusionConfig cfg;
  cfg.channels = 4;
  Fixture f({3, 4}, cfg);
  std::mt19937_64 rng(2);
  auto o = random_pyramid(rng, {3, 4}, 8, 8);
  Tape<double> tp;
  VarMap<double> vm = VarMap<double>::bind(tp, f.store);
  std::vector<Var> vo = {tp.leaf(o[0]), tp.leaf(o[1])};
  std::vector<Var> vshort = {tp.leaf(o[0])};
  CHECK_THROWS_AS(f.fusion.forward(tp, vm, vo, vshort), std::invalid_argument);
}

TEST_CASE("offset group count must divide the fused width") {
  FusionConfig cfg;
  cfg.channels = 4;
  cfg.deform_groups = 3;
  Fusion<double> fusion;
  fusion.level_channels = {3, 4};
  fusion.cfg = cfg;
  ParamStore<double> store;
  std::mt19937_64 rng(3);
  CHECK_THROWS_AS(fusion.register_params(store, rng), std::invalid_argument);
}

TEST_CASE("one learned sweep over two levels matches a hand-built recomposition") {
  FusionConfig cfg;
  cfg.channels = 4;
  cfg.num_sweeps = 1;
  cfg.strategy = FusionStrategy::kDual;
  Fixture f({3, 4}, cfg, 43);
  std::mt19937_64 rng(4);
  // Perturb the offset predictor too, so the deformable path is non-trivial.
  for (auto& e : f.store.entries())
    for (auto& v : e.value.data) v += 0.05 * std::uniform_real_distribution<double>(-1, 1)(rng);
  auto o = random_pyramid(rng, {3, 4}, 8, 8);
  auto s = random_pyramid(rng, {3, 4}, 8, 8);
  Tensor<double> got = f.run(o, s);

  // Recompose the same computation step by step from the public ops.
  Tape<double> tp;
  VarMap<double> vm = VarMap<double>::bind(tp, f.store);
  auto align = [&](const std::string& w, const std::string& b, const Tensor<double>& x) {
    return conv2d(tp, tp.leaf(x), vm(w), vm(b));
  };
  Var m0 = add(tp, align("fusion.level0.align_o.w", "fusion.level0.align_o.b", o[0]),
               align("fusion.level0.align_s.w", "fusion.level0.align_s.b", s[0]));
  Var m1 = add(tp, align("fusion.level1.align_o.w", "fusion.level1.align_o.b", o[1]),
               align("fusion.level1.align_s.w", "fusion.level1.align_s.b", s[1]));
  Var up = adaptive_pool(tp, m1, 8, 8);
  Var t = add(tp, conv2d(tp, up, vm("fusion.sweep0.step0.align.w"),
                         vm("fusion.sweep0.step0.align.b")),
              m0);
  Var offs =
      conv2d(tp, t, vm("fusion.sweep0.step0.offset.w"), vm("fusion.sweep0.step0.offset.b"));
  Var d = deform_conv2d(tp, t, vm("fusion.sweep0.step0.deform.w"),
                        vm("fusion.sweep0.step0.deform.b"), offs, 1);
  Tensor<double> want = tp.val(conv2d(tp, d, vm("fusion.out.w"), vm("fusion.out.b")));
  CHECK(max_abs_diff(got, want) < 1e-9);
}

TEST_CASE("zero-initialized offsets make every sweep a plain convolution") {
  FusionConfig cfg;
  cfg.channels = 4;
  cfg.num_sweeps = 2;
  cfg.strategy = FusionStrategy::kDual;
  Fixture f({3, 4}, cfg, 47);  // offset predictors stay at their zero init
  std::mt19937_64 rng(5);
  auto o = random_pyramid(rng, {3, 4}, 8, 8);
  auto s = random_pyramid(rng, {3, 4}, 8, 8);
  Tensor<double> got = f.run(o, s);

  // Twin computation with ordinary convolutions in place of the deformable
  // ones. Equality to near machine precision shows the offsets are inert.
  Tape<double> tp;
  VarMap<double> vm = VarMap<double>::bind(tp, f.store);
  auto align = [&](int l, const char* which, const Tensor<double>& x) {
    const std::string p = "fusion.level" + std::to_string(l) + "." + which;
    return conv2d(tp, tp.leaf(x), vm(p + ".w"), vm(p + ".b"));
  };
  std::vector<Var> cur = {add(tp, align(0, "align_o", o[0]), align(0, "align_s", s[0])),
                          add(tp, align(1, "align_o", o[1]), align(1, "align_s", s[1]))};
  for (int sw = 0; sw < 2; ++sw) {
    const std::string p = "fusion.sweep" + std::to_string(sw) + ".step0.";
    Var up = adaptive_pool(tp, cur[1], 8, 8);
    Var t = add(tp, conv2d(tp, up, vm(p + "align.w"), vm(p + "align.b")), cur[0]);
    cur[0] = conv2d(tp, t, vm(p + "deform.w"), vm(p + "deform.b"));
  }
  Tensor<double> want = tp.val(conv2d(tp, cur[0], vm("fusion.out.w"), vm("fusion.out.b")));
  CHECK(max_abs_diff(got, want) < 1e-9);
}

TEST_CASE("mean fusion of identical aligned pyramids is that pyramid") {
  // With align_s cloned from align_o and identical streams, all eight pooled
  // maps coincide, so their mean equals any one of them (up to the final 1x1).
  FusionConfig cfg;
  cfg.channels = 4;
  cfg.strategy = FusionStrategy::kMean;
  Fixture f({3, 3}, cfg, 53);
  for (int l = 0; l < 2; ++l) {
    const std::string p = "fusion.level" + std::to_string(l) + ".";
    f.store.value(p + "align_s.w") = f.store.value(p + "align_o.w");
    f.store.value(p + "align_s.b") = f.store.value(p + "align_o.b");
  }
  std::mt19937_64 rng(6);
  // A constant pyramid survives adaptive pooling exactly at every level.
  std::vector<Tensor<double>> pyr = {Tensor<double>::full({1, 3, 8, 8}, 0.3),
                                     Tensor<double>::full({1, 3, 4, 4}, 0.3)};
  Tensor<double> got = f.run(pyr, pyr);

  Tape<double> tp;
  VarMap<double> vm = VarMap<double>::bind(tp, f.store);
  Var a0 = conv2d(tp, tp.leaf(pyr[0]), vm("fusion.level0.align_o.w"), vm("fusion.level0.align_o.b"));
  Var a1 = conv2d(tp, tp.leaf(pyr[1]), vm("fusion.level1.align_o.w"), vm("fusion.level1.align_o.b"));
  // mean of {2*a0 maps, 2*pooled a1 maps} = (a0 + pooled a1) / 2; constant
  // input makes pooled a1 spatially constant so everything is exact.
  Var mixed = mul_scalar(tp, add(tp, a0, adaptive_pool(tp, a1, 8, 8)), 0.5);
  Tensor<double> want = tp.val(conv2d(tp, mixed, vm("fusion.out.w"), vm("fusion.out.b")));
  CHECK(max_abs_diff(got, want) < 1e-12);
}

TEST_CASE("median of the two-map case equals the mean") {
  // With a single level there are exactly two pooled maps; the median of two
  // values is their midpoint.
  FusionConfig med, mean;
  med.channels = 4;
  mean.channels = 4;
  med.strategy = FusionStrategy::kMedian;
  mean.strategy = FusionStrategy::kMean;
  Fixture fm({3}, med, 59), fa({3}, mean, 59);
  std::mt19937_64 rng(7);
  std::vector<Tensor<double>> o = {stf::test::randn({1, 3, 6, 6}, rng)};
  std::vector<Tensor<double>> s = {stf::test::randn({1, 3, 6, 6}, rng)};
  Tensor<double> a = fm.run(o, s), b = fa.run(o, s);
  CHECK(max_abs_diff(a, b) < 1e-12);
}

TEST_CASE("max fusion dominates mean fusion before the output projection") {
  // Checked on the raw combined maps: elementwise max of the pooled maps is
  // pointwise >= their mean.
  FusionConfig cfg;
  cfg.channels = 4;
  cfg.strategy = FusionStrategy::kMax;
  Fixture f({3, 4}, cfg, 61);
  std::mt19937_64 rng(8);
  auto o = random_pyramid(rng, {3, 4}, 8, 8);
  auto s = random_pyramid(rng, {3, 4}, 8, 8);
  Tape<double> tp;
  VarMap<double> vm = VarMap<double>::bind(tp, f.store);
  std::vector<Var> maps;
  for (int l = 0; l < 2; ++l) {
    const std::string p = "fusion.level" + std::to_string(l) + ".";
    maps.push_back(adaptive_pool(
        tp, conv2d(tp, tp.leaf(o[static_cast<size_t>(l)]), vm(p + "align_o.w"), vm(p + "align_o.b")), 8, 8));
    maps.push_back(adaptive_pool(
        tp, conv2d(tp, tp.leaf(s[static_cast<size_t>(l)]), vm(p + "align_s.w"), vm(p + "align_s.b")), 8, 8));
  }
  Tensor<double> mx = tp.val(elem_max(tp, maps));
  Var acc = maps[0];
  for (size_t i = 1; i < maps.size(); ++i) acc = add(tp, acc, maps[i]);
  Tensor<double> mean = tp.val(mul_scalar(tp, acc, 0.25));
  for (std::int64_t i = 0; i < mx.numel(); ++i) CHECK(mx[i] >= mean[i] - 1e-12);
}

TEST_CASE("grouped offsets change the result once offsets are nonzero") {
  // Same weights, one vs two offset groups: with a nonzero offset predictor
  // the group structure must matter; at zero offsets it must not.
  auto build = [&](int groups) {
    FusionConfig cfg;
    cfg.channels = 4;
    cfg.num_sweeps = 1;
    cfg.deform_groups = groups;
    cfg.strategy = FusionStrategy::kDual;
    return cfg;
  };
  Fixture f1({3, 4}, build(1), 67), f2({3, 4}, build(2), 67);
  // Align/deform weights coincide (same seed); copy f1's offset predictor
  // into both halves of f2's grouped predictor so group 0 and 1 disagree only
  // through the input channels they sample.
  std::mt19937_64 rng(9);
  Tensor<double> ow = stf::test::randn({18, 4, 3, 3}, rng, -0.1, 0.1);
  f1.store.value("fusion.sweep0.step0.offset.w") = ow;
  Tensor<double>& ow2 = f2.store.value("fusion.sweep0.step0.offset.w");
  std::copy_n(ow.ptr(), ow.numel(), ow2.ptr());
  // Second group gets a different field.
  for (std::int64_t i = 0; i < ow.numel(); ++i) ow2[ow.numel() + i] = -ow[i];
  auto o = random_pyramid(rng, {3, 4}, 8, 8);
  auto s = random_pyramid(rng, {3, 4}, 8, 8);
  Tensor<double> a = f1.run(o, s), b = f2.run(o, s);
  CHECK(max_abs_diff(a, b) > 1e-6);
}
