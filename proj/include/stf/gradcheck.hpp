#pragma once

#include <cmath>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "stf/backbone.hpp"
#include "stf/fusion.hpp"
#include "stf/head.hpp"
#include "stf/mfa.hpp"
#include "stf/model.hpp"
#include "stf/ops.hpp"
#include "stf/sfa.hpp"

namespace stf {

// Central finite differences against the tape's analytic gradients, in double
// precision. build_loss must be a pure function of the store's current values.
// Elements are sampled with a deterministic stride when tensors are large.
template <typename BuildLoss>
double max_param_grad_error(ParamStore<double>& store, BuildLoss&& build_loss, double eps = 1e-5,
                            std::int64_t max_elems_per_tensor = 24) {
  auto eval = [&]() {
    Tape<double> tp;
    VarMap<double> vm = VarMap<double>::bind(tp, store);
    Var loss = build_loss(tp, vm);
    return tp.val(loss)[0];
  };

  std::unordered_map<std::string, Tensor<double>> analytic;
  {
    Tape<double> tp;
    VarMap<double> vm = VarMap<double>::bind(tp, store);
    Var loss = build_loss(tp, vm);
    tp.backward(loss);
    for (auto& e : store.entries()) {
      Var v = vm(e.name);
      analytic[e.name] =
          tp.has_grad(v) ? tp.grad(v) : Tensor<double>::zeros_like(e.value);
    }
  }

  double worst = 0;
  for (auto& e : store.entries()) {
    const std::int64_t n = e.value.numel();
    const std::int64_t stride = std::max<std::int64_t>(1, n / max_elems_per_tensor);
    for (std::int64_t i = 0; i < n; i += stride) {
      const double orig = e.value[i];
      e.value[i] = orig + eps;
      const double lp = eval();
      e.value[i] = orig - eps;
      const double lm = eval();
      e.value[i] = orig;
      const double numeric = (lp - lm) / (2 * eps);
      const double a = analytic[e.name][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-3});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Per-module checks on tiny shapes
// ---------------------------------------------------------------------------

struct GradCheckResult {
  std::string module;
  double max_rel_error = 0;
};

namespace gradcheck_detail {

inline Tensor<double> random_tensor(std::vector<int> shape, std::mt19937_64& rng, double lo = -1,
                                    double hi = 1) {
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor<double> t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = d(rng);
  return t;
}

// Sum of scalar sums over a pyramid, weighted so levels cannot cancel.
inline Var pyramid_loss(Tape<double>& tp, const std::vector<Var>& pyr) {
  Var acc = sum_all(tp, pyr[0]);
  for (size_t l = 1; l < pyr.size(); ++l)
    acc = add(tp, acc, mul_scalar(tp, sum_all(tp, pyr[l]), 1.0 + 0.5 * static_cast<double>(l)));
  return acc;
}

}  // namespace gradcheck_detail

// Every trainable module on shapes no larger than [1,4,8,8].
inline std::vector<GradCheckResult> run_gradient_suite(std::uint64_t seed = 7) {
  using gradcheck_detail::pyramid_loss;
  using gradcheck_detail::random_tensor;
  std::vector<GradCheckResult> results;
  std::mt19937_64 rng(seed);

  {  // backbone (tiny widths, 32x32 input so all four strides exist)
    Backbone<double> bb;
    bb.channels = {2, 3, 3, 4};
    ParamStore<double> store;
    std::mt19937_64 r(seed + 1);
    bb.register_params(store, r);
    Tensor<double> x = random_tensor({1, 3, 32, 32}, rng, 0, 1);
    results.push_back({"backbone", max_param_grad_error(store, [&](auto& tp, auto& vm) {
                         return pyramid_loss(tp, bb.forward(tp, vm, tp.leaf(x)));
                       })});
  }

  {  // multi-frame attention, two levels
    Mfa<double> mfa;
    mfa.channels = {3, 4};
    mfa.cfg.reduction_ratio = 1;
    ParamStore<double> store;
    std::mt19937_64 r(seed + 2);
    mfa.register_params(store, r);
    // Perturb away from the identity-calibrated init so every path is active.
    for (auto& e : store.entries())
      for (std::int64_t i = 0; i < e.value.numel(); ++i)
        e.value[i] += 0.05 * std::uniform_real_distribution<double>(-1, 1)(rng);
    std::vector<Tensor<double>> past = {random_tensor({1, 3, 8, 8}, rng),
                                        random_tensor({1, 4, 4, 4}, rng)};
    std::vector<Tensor<double>> cur = {random_tensor({1, 3, 8, 8}, rng),
                                       random_tensor({1, 4, 4, 4}, rng)};
    results.push_back({"mfa", max_param_grad_error(store, [&](auto& tp, auto& vm) {
                         std::vector<Var> p = {tp.leaf(past[0]), tp.leaf(past[1])};
                         std::vector<Var> c = {tp.leaf(cur[0]), tp.leaf(cur[1])};
                         return pyramid_loss(tp, mfa.forward(tp, vm, p, c));
                       })});
  }

  {  // single-frame attention, two levels
    Sfa<double> sfa;
    sfa.channels = {3, 4};
    sfa.cfg.reduction_ratio = 1;
    ParamStore<double> store;
    std::mt19937_64 r(seed + 3);
    sfa.register_params(store, r);
    for (auto& e : store.entries())
      for (std::int64_t i = 0; i < e.value.numel(); ++i)
        e.value[i] += 0.05 * std::uniform_real_distribution<double>(-1, 1)(rng);
    std::vector<Tensor<double>> x = {random_tensor({1, 3, 8, 8}, rng),
                                     random_tensor({1, 4, 4, 4}, rng)};
    results.push_back({"sfa", max_param_grad_error(store, [&](auto& tp, auto& vm) {
                         std::vector<Var> p = {tp.leaf(x[0]), tp.leaf(x[1])};
                         return pyramid_loss(tp, sfa.forward(tp, vm, p));
                       })});
  }

  {  // fusion with learned deformable offsets
    Fusion<double> fusion;
    fusion.level_channels = {3, 4};
    fusion.cfg.channels = 4;
    fusion.cfg.num_sweeps = 1;
    fusion.cfg.strategy = FusionStrategy::kDual;
    ParamStore<double> store;
    std::mt19937_64 r(seed + 4);
    fusion.register_params(store, r);
    for (auto& e : store.entries())
      for (std::int64_t i = 0; i < e.value.numel(); ++i)
        e.value[i] += 0.05 * std::uniform_real_distribution<double>(-1, 1)(rng);
    std::vector<Tensor<double>> xo = {random_tensor({1, 3, 8, 8}, rng),
                                      random_tensor({1, 4, 4, 4}, rng)};
    std::vector<Tensor<double>> xs = {random_tensor({1, 3, 8, 8}, rng),
                                      random_tensor({1, 4, 4, 4}, rng)};
    results.push_back({"fusion", max_param_grad_error(store, [&](auto& tp, auto& vm) {
                         std::vector<Var> o = {tp.leaf(xo[0]), tp.leaf(xo[1])};
                         std::vector<Var> s = {tp.leaf(xs[0]), tp.leaf(xs[1])};
                         return sum_all(tp, fusion.forward(tp, vm, o, s));
                       })});
  }

  {  // fusion with grouped offset fields (one field per channel group)
    Fusion<double> fusion;
    fusion.level_channels = {3, 4};
    fusion.cfg.channels = 4;
    fusion.cfg.num_sweeps = 1;
    fusion.cfg.deform_groups = 2;
    fusion.cfg.strategy = FusionStrategy::kDual;
    ParamStore<double> store;
    std::mt19937_64 r(seed + 6);
    fusion.register_params(store, r);
    for (auto& e : store.entries())
      for (std::int64_t i = 0; i < e.value.numel(); ++i)
        e.value[i] += 0.05 * std::uniform_real_distribution<double>(-1, 1)(rng);
    std::vector<Tensor<double>> xo = {random_tensor({1, 3, 8, 8}, rng),
                                      random_tensor({1, 4, 4, 4}, rng)};
    std::vector<Tensor<double>> xs = {random_tensor({1, 3, 8, 8}, rng),
                                      random_tensor({1, 4, 4, 4}, rng)};
    results.push_back({"fusion_grouped", max_param_grad_error(store, [&](auto& tp, auto& vm) {
                         std::vector<Var> o = {tp.leaf(xo[0]), tp.leaf(xo[1])};
                         std::vector<Var> s = {tp.leaf(xs[0]), tp.leaf(xs[1])};
                         return sum_all(tp, fusion.forward(tp, vm, o, s));
                       })});
  }

  {  // head + losses against a real target encoding
    Head<double> head;
    head.cfg.num_classes = 2;
    head.cfg.hidden_channels = 4;
    head.fused_channels = 4;
    head.single_frame_channels = 3;
    ParamStore<double> store;
    std::mt19937_64 r(seed + 5);
    head.register_params(store, r);
    Tensor<double> fused = random_tensor({1, 4, 8, 8}, rng);
    Tensor<double> single = random_tensor({1, 3, 8, 8}, rng);
    Annotation ann;
    ann.boxes = {{5, 6, 19, 21, 0}, {12, 14, 29, 30, 1}};
    ann.occlusion_fraction = {0, 0};
    ann.blur_magnitude = {0, 0};
    HeatmapTargets<double> tg = encode_targets<double>({ann}, 32, 32, 2);
    LossWeights w;
    results.push_back({"head", max_param_grad_error(store, [&](auto& tp, auto& vm) {
                         HeadOutputs<double> out =
                             head.predict(tp, vm, tp.leaf(fused), tp.leaf(single));
                         Var lh = heatmap_focal_loss(tp, out.heatmap, tg.heatmap, tg.num_centers,
                                                     w.epsilon, w.zeta);
                         Var lo = offset_loss(tp, out.offset, tg);
                         Var ls = size_loss(tp, out.size, tg);
                         return total_loss(tp, lh, ls, lo, w);
                       })});
  }

  return results;
}

}  // namespace stf
