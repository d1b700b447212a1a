#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "stf/mfa.hpp"
#include "test_util.hpp"

using namespace stf;

namespace {

struct LevelFixture {
  MfaLevel<double> level;
  ParamStore<double> store;

  explicit LevelFixture(int channels, MfaConfig cfg = {}, std::uint64_t seed = 11) {
    level.channels = channels;
    level.cfg = cfg;
    level.prefix = "mfa.level0.";
    std::mt19937_64 rng(seed);
    level.register_params(store, rng);
  }

  template <typename F>
  Tensor<double> eval(F&& body) {
    Tape<double> tp;
    VarMap<double> vm = VarMap<double>::bind(tp, store);
    return tp.val(body(tp, vm));
  }
};

}  // namespace

TEST_CASE("spatio-temporal descriptor is the mean of the two per-frame descriptors") {
  std::mt19937_64 rng(1);
  Tensor<double> past = test::randn({2, 3, 4, 4}, rng);
  Tensor<double> cur = test::randn({2, 3, 4, 4}, rng);
  Tape<double> tp;
  StackedPair x{tp.leaf(past), tp.leaf(cur)};
  PairVec s = MfaLevel<double>::gap_spatial(tp, x);
  Tensor<double> t = tp.val(MfaLevel<double>::gap_spatiotemporal(tp, x));
  const Tensor<double>&sp = tp.val(s.past), &sc = tp.val(s.current);
  for (std::int64_t i = 0; i < t.numel(); ++i)
    CHECK(t[i] == doctest::Approx(0.5 * (sp[i] + sc[i])).epsilon(1e-12));
  // And the per-frame descriptor really is the spatial mean.
  double m = 0;
  for (int h = 0; h < 4; ++h)
    for (int w = 0; w < 4; ++w) m += past.at(0, 0, h, w);
  CHECK(sp.at(0, 0) == doctest::Approx(m / 16).epsilon(1e-12));
}

TEST_CASE("bottleneck computes expand(relu(reduce(s + t))) exactly") {
  LevelFixture f(4, MfaConfig{2, false, 3});
  // Hand-set weights: reduce [2,4], expand [4,2].
  Tensor<double>& rw = f.store.value("mfa.level0.bnb.reduce.w");
  Tensor<double>& rb = f.store.value("mfa.level0.bnb.reduce.b");
  Tensor<double>& ew = f.store.value("mfa.level0.bnb.expand.w");
  Tensor<double>& eb = f.store.value("mfa.level0.bnb.expand.b");
  rw.data = {0.5, -1, 0.25, 0, 1, 1, -0.5, 2};
  rb.data = {0.1, -0.2};
  ew.data = {1, 2, -1, 0.5, 3, -2, 0, 1};
  eb.data = {0.01, 0.02, 0.03, 0.04};
  const std::vector<double> s = {1, 2, -1, 0.5}, t = {0.5, -0.5, 1, 1};
  Tensor<double> out = f.eval([&](auto& tp, auto& vm) {
    PairVec sv{tp.leaf(Tensor<double>({1, 4}, s)), tp.leaf(Tensor<double>({1, 4}, s))};
    return f.level.local_weights(tp, vm, sv, tp.leaf(Tensor<double>({1, 4}, t))).current;
  });
  // Manual forward in plain arithmetic.
  std::vector<double> v(4), h(2), y(4);
  for (int i = 0; i < 4; ++i) v[static_cast<size_t>(i)] = s[static_cast<size_t>(i)] + t[static_cast<size_t>(i)];
  for (int o = 0; o < 2; ++o) {
    double acc = rb[o];
    for (int i = 0; i < 4; ++i) acc += rw[o * 4 + i] * v[static_cast<size_t>(i)];
    h[static_cast<size_t>(o)] = std::max(acc, 0.0);
  }
  for (int o = 0; o < 4; ++o) {
    double acc = eb[o];
    for (int i = 0; i < 2; ++i) acc += ew[o * 2 + i] * h[static_cast<size_t>(i)];
    y[static_cast<size_t>(o)] = acc;
  }
  for (int o = 0; o < 4; ++o) CHECK(out[o] == doctest::Approx(y[static_cast<size_t>(o)]).epsilon(1e-12));
}

TEST_CASE("calibration weights are exactly zero at initialization") {
  LevelFixture f(4);
  std::mt19937_64 rng(2);
  Tensor<double> past = test::randn({2, 4, 6, 6}, rng), cur = test::randn({2, 4, 6, 6}, rng);
  Tensor<double> w = f.eval([&](auto& tp, auto& vm) {
    StackedPair x{tp.leaf(past), tp.leaf(cur)};
    PairVec s = MfaLevel<double>::gap_spatial(tp, x);
    Var t = MfaLevel<double>::gap_spatiotemporal(tp, x);
    return f.level.local_weights(tp, vm, s, t).current;
  });
  CHECK(w.max_abs() == 0.0);
}

TEST_CASE("zero calibration reduces the adaptive conv to a plain conv plus bias") {
  LevelFixture f(3, MfaConfig{1, false, 3});
  std::mt19937_64 rng(3);
  // Nonzero bias so the bias path is exercised too.
  for (auto& v : f.store.value("mfa.level0.wp.b").data) v = 0.3;
  Tensor<double> cur = test::randn({2, 3, 8, 8}, rng);
  Tensor<double> got = f.eval([&](auto& tp, auto& vm) {
    return f.level.adaptive_conv(tp, vm, tp.leaf(cur), tp.leaf(Tensor<double>({2, 3})));
  });
  Tensor<double> want = [&] {
    Tape<double> tp;
    VarMap<double> vm = VarMap<double>::bind(tp, f.store);
    return tp.val(conv2d(tp, tp.leaf(cur), vm("mfa.level0.wp.w"), vm("mfa.level0.wp.b"), 1, 1));
  }();
  CHECK(max_abs_diff(got, want) < 1e-9);
}

TEST_CASE("calibration of minus one suppresses the kernel entirely") {
  LevelFixture f(3, MfaConfig{1, false, 3});
  for (auto& v : f.store.value("mfa.level0.wp.b").data) v = 0.7;
  std::mt19937_64 rng(4);
  Tensor<double> cur = test::randn({1, 3, 5, 5}, rng);
  Tensor<double> got = f.eval([&](auto& tp, auto& vm) {
    return f.level.adaptive_conv(tp, vm, tp.leaf(cur), tp.leaf(Tensor<double>::full({1, 3}, -1.0)));
  });
  for (std::int64_t i = 0; i < got.numel(); ++i) CHECK(got[i] == doctest::Approx(0.7).epsilon(1e-12));
}

TEST_CASE("literal calibration multiplies by w instead of one plus w") {
  MfaConfig literal;
  literal.reduction_ratio = 1;
  literal.literal_eq3 = true;
  // Same seed, so both fixtures hold identical weights.
  LevelFixture lit(3, literal), res(3, MfaConfig{1, false, 3});
  std::mt19937_64 rng(5);
  Tensor<double> cur = test::randn({1, 3, 6, 6}, rng);
  Tensor<double> w = test::randn({1, 3}, rng);
  Tensor<double> w_shift = w;
  for (auto& v : w_shift.data) v += 1.0;  // literal(w + 1) == residual(w)
  Tensor<double> a = lit.eval([&](auto& tp, auto& vm) {
    return lit.level.adaptive_conv(tp, vm, tp.leaf(cur), tp.leaf(w_shift));
  });
  Tensor<double> b = res.eval([&](auto& tp, auto& vm) {
    return res.level.adaptive_conv(tp, vm, tp.leaf(cur), tp.leaf(w));
  });
  CHECK(max_abs_diff(a, b) < 1e-12);
}

TEST_CASE("calibration equals convolving with a per-sample rescaled kernel") {
  MfaConfig cfg;
  cfg.kernel_size = 5;
  cfg.reduction_ratio = 1;
  LevelFixture f(2, cfg, 13);
  std::mt19937_64 rng(6);
  Tensor<double> cur = test::randn({2, 2, 7, 7}, rng);
  Tensor<double> w = test::randn({2, 2}, rng);
  Tensor<double> got = f.eval([&](auto& tp, auto& vm) {
    return f.level.adaptive_conv(tp, vm, tp.leaf(cur), tp.leaf(w));
  });
  const Tensor<double>& wp = f.store.value("mfa.level0.wp.w");
  const Tensor<double>& bias = f.store.value("mfa.level0.wp.b");
  for (int b = 0; b < 2; ++b) {
    // Materialize this sample's kernel: every tap of output channel co is
    // scaled by (1 + w[b, co]).
    Tensor<double> kb = wp;
    for (int co = 0; co < 2; ++co)
      for (std::int64_t i = 0; i < 2 * 5 * 5; ++i) kb[co * 2 * 5 * 5 + i] *= 1.0 + w.at(b, co);
    Tensor<double> xb({1, 2, 7, 7});
    std::copy_n(cur.ptr() + b * 2 * 7 * 7, 2 * 7 * 7, xb.ptr());
    Tape<double> tp;
    Tensor<double> want = tp.val(conv2d(tp, tp.leaf(xb), tp.leaf(kb), tp.leaf(bias), 1, 2));
    Tensor<double> gotb({1, 2, 7, 7});
    std::copy_n(got.ptr() + b * 2 * 7 * 7, 2 * 7 * 7, gotb.ptr());
    CHECK(max_abs_diff(gotb, want) < 1e-9);
  }
}

TEST_CASE("integrator is the identity at initialization") {
  LevelFixture f(3, MfaConfig{1, false, 3});
  std::mt19937_64 rng(7);
  Tensor<double> xhat = test::randn({2, 3, 6, 6}, rng);
  Tensor<double> out = f.eval(
      [&](auto& tp, auto& vm) { return f.level.multi_scale_integrate(tp, vm, tp.leaf(xhat)); });
  CHECK(out.data == xhat.data);
}

TEST_CASE("integrator with unit coarse gain doubles a constant field") {
  LevelFixture f(3, MfaConfig{1, false, 3});
  for (auto& v : f.store.value("mfa.level0.gamma.scale").data) v = 1.0;
  Tensor<double> xhat = Tensor<double>::full({1, 3, 8, 8}, 2.5);
  Tensor<double> out = f.eval(
      [&](auto& tp, auto& vm) { return f.level.multi_scale_integrate(tp, vm, tp.leaf(xhat)); });
  for (std::int64_t i = 0; i < out.numel(); ++i)
    CHECK(out[i] == doctest::Approx(5.0).epsilon(1e-12));
}

TEST_CASE("full level at initialization reduces to conv, bias, and nothing else") {
  LevelFixture f(3, MfaConfig{1, false, 3});
  for (auto& v : f.store.value("mfa.level0.wp.b").data) v = -0.2;
  std::mt19937_64 rng(8);
  Tensor<double> past = test::randn({2, 3, 8, 8}, rng);
  Tensor<double> cur = test::randn({2, 3, 8, 8}, rng);
  Tensor<double> got = f.eval([&](auto& tp, auto& vm) {
    return f.level.forward(tp, vm, StackedPair{tp.leaf(past), tp.leaf(cur)});
  });
  Tensor<double> want = [&] {
    Tape<double> tp;
    VarMap<double> vm = VarMap<double>::bind(tp, f.store);
    return tp.val(conv2d(tp, tp.leaf(cur), vm("mfa.level0.wp.w"), vm("mfa.level0.wp.b"), 1, 1));
  }();
  CHECK(max_abs_diff(got, want) < 1e-9);
}

TEST_CASE("the past frame cannot influence a freshly initialized level") {
  LevelFixture f(3, MfaConfig{1, false, 3});
  std::mt19937_64 rng(9);
  Tensor<double> cur = test::randn({1, 3, 8, 8}, rng);
  Tensor<double> past_a = test::randn({1, 3, 8, 8}, rng);
  Tensor<double> past_b = test::randn({1, 3, 8, 8}, rng);
  Tensor<double> a = f.eval([&](auto& tp, auto& vm) {
    return f.level.forward(tp, vm, StackedPair{tp.leaf(past_a), tp.leaf(cur)});
  });
  Tensor<double> b = f.eval([&](auto& tp, auto& vm) {
    return f.level.forward(tp, vm, StackedPair{tp.leaf(past_b), tp.leaf(cur)});
  });
  CHECK(a.data == b.data);
}

TEST_CASE("a repeated frame yields identical weights for both temporal slices") {
  LevelFixture f(4, MfaConfig{2, false, 3});
  std::mt19937_64 rng(10);
  // Perturb the bottleneck so the weights are nonzero.
  for (auto& e : f.store.entries())
    for (auto& v : e.value.data) v += 0.1 * std::uniform_real_distribution<double>(-1, 1)(rng);
  Tensor<double> frame = test::randn({2, 4, 6, 6}, rng);
  Tape<double> tp;
  VarMap<double> vm = VarMap<double>::bind(tp, f.store);
  StackedPair x{tp.leaf(frame), tp.leaf(frame)};
  PairVec s = MfaLevel<double>::gap_spatial(tp, x);
  PairVec w = f.level.local_weights(tp, vm, s, MfaLevel<double>::gap_spatiotemporal(tp, x));
  CHECK(tp.val(w.past).data == tp.val(w.current).data);
  CHECK(tp.val(w.current).max_abs() > 0.0);
}

TEST_CASE("the module preserves every pyramid level's shape") {
  Mfa<double> mfa;
  mfa.channels = {3, 4};
  mfa.cfg.reduction_ratio = 1;
  ParamStore<double> store;
  std::mt19937_64 r(12);
  mfa.register_params(store, r);
  std::mt19937_64 rng(13);
  Tensor<double> p0 = test::randn({2, 3, 8, 8}, rng), p1 = test::randn({2, 4, 4, 4}, rng);
  Tensor<double> c0 = test::randn({2, 3, 8, 8}, rng), c1 = test::randn({2, 4, 4, 4}, rng);
  Tape<double> tp;
  VarMap<double> vm = VarMap<double>::bind(tp, store);
  std::vector<Var> out = mfa.forward(tp, vm, {tp.leaf(p0), tp.leaf(p1)}, {tp.leaf(c0), tp.leaf(c1)});
  REQUIRE(out.size() == 2);
  CHECK(tp.val(out[0]).same_shape(c0));
  CHECK(tp.val(out[1]).same_shape(c1));
  CHECK_THROWS_AS(mfa.forward(tp, vm, {tp.leaf(p0)}, {tp.leaf(c0), tp.leaf(c1)}),
                  std::invalid_argument);
}

TEST_CASE("invalid configurations are rejected at registration") {
  {
    MfaLevel<double> lvl{3, MfaConfig{2, false, 3}, "mfa.level0."};  // 2 does not divide 3
    ParamStore<double> store;
    std::mt19937_64 rng(1);
    CHECK_THROWS_AS(lvl.register_params(store, rng), std::invalid_argument);
  }
  {
    MfaLevel<double> lvl{4, MfaConfig{2, false, 4}, "mfa.level0."};  // even kernel
    ParamStore<double> store;
    std::mt19937_64 rng(1);
    CHECK_THROWS_AS(lvl.register_params(store, rng), std::invalid_argument);
  }
}
