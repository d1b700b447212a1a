#pragma once

#include <random>
#include <string>
#include <vector>

#include "stf/conv.hpp"
#include "stf/ops.hpp"
#include "stf/params.hpp"

namespace stf {

// Past/current features of one pyramid level, the T=2 temporal stack.
struct StackedPair {
  Var past, current;  // each [B,C,H,W]
};

// One value per frame of the stack, e.g. descriptors [B,C] or weights [B,C].
struct PairVec {
  Var past, current;
};

struct MfaConfig {
  int reduction_ratio = 4;
  bool literal_eq3 = false;  // scale kernel by w instead of (1 + w)
  int kernel_size = 3;
};

// Multi-frame attention for one pyramid level: pooled two-frame descriptors
// drive a bottleneck that calibrates the shared conv kernel, followed by the
// multi-scale integrator.
template <typename T>
struct MfaLevel {
  int channels = 0;
  MfaConfig cfg;
  std::string prefix;  // e.g. "mfa.level0."

  void register_params(ParamStore<T>& store, std::mt19937_64& rng) const {
    const int c = channels, r = cfg.reduction_ratio, k = cfg.kernel_size;
    if (r <= 0 || c % r != 0)
      throw std::invalid_argument("mfa: reduction ratio must divide channels");
    if (k % 2 == 0) throw std::invalid_argument("mfa: kernel size must be odd");
    store.add(prefix + "wp.w", he_uniform<T>({c, c, k, k}, rng));
    store.add(prefix + "wp.b", Tensor<T>({c}));
    store.add(prefix + "bnb.reduce.w", he_uniform<T>({c / r, c}, rng));
    store.add(prefix + "bnb.reduce.b", Tensor<T>({c / r}));
    // Expand side starts at zero so the calibration weights are exactly 0.
    store.add(prefix + "bnb.expand.w", Tensor<T>({c, c / r}));
    store.add(prefix + "bnb.expand.b", Tensor<T>({c}));
    store.add(prefix + "lambda.scale", Tensor<T>::full({c}, T(1)));
    store.add(prefix + "lambda.shift", Tensor<T>({c}));
    store.add(prefix + "gamma.scale", Tensor<T>({c}));
    store.add(prefix + "gamma.shift", Tensor<T>({c}));
  }

  // Per-frame spatial GAP descriptors S_n.
  static PairVec gap_spatial(Tape<T>& tp, const StackedPair& x) {
    return PairVec{gap_hw(tp, x.past), gap_hw(tp, x.current)};
  }

  // Spatio-temporal descriptor: mean over both frames and all pixels, [B,C].
  static Var gap_spatiotemporal(Tape<T>& tp, const StackedPair& x) {
    Var s = add(tp, gap_hw(tp, x.past), gap_hw(tp, x.current));
    return mul_scalar(tp, s, T(0.5));
  }

  // Bottleneck over (S_n + T_n), applied to each temporal slice.
  PairVec local_weights(Tape<T>& tp, const VarMap<T>& vm, const PairVec& s, Var t) const {
    auto bnb = [&](Var v) {
      Var h = relu(tp, dense(tp, v, vm(prefix + "bnb.reduce.w"), vm(prefix + "bnb.reduce.b")));
      return dense(tp, h, vm(prefix + "bnb.expand.w"), vm(prefix + "bnb.expand.b"));
    };
    return PairVec{bnb(add(tp, s.past, t)), bnb(add(tp, s.current, t))};
  }

  // Convolution with the per-sample calibrated kernel. The calibration scales
  // each output channel of W_p, which commutes with the convolution, so the
  // scaling is applied to the unbiased conv output instead of materializing
  // per-sample kernels.
  Var adaptive_conv(Tape<T>& tp, const VarMap<T>& vm, Var x_current, Var w_current) const {
    Var y = conv2d(tp, x_current, vm(prefix + "wp.w"), Var{}, 1, cfg.kernel_size / 2);
    Var scale = cfg.literal_eq3 ? w_current : add_scalar(tp, w_current, T(1));
    y = mul_channel(tp, y, scale);
    return add_bias(tp, y, vm(prefix + "wp.b"));
  }

  Var multi_scale_integrate(Tape<T>& tp, const VarMap<T>& vm, Var xhat) const {
    const Tensor<T>& xv = tp.val(xhat);
    const int H = xv.dim(2), W = xv.dim(3);
    Var lam = channel_affine(tp, xhat, vm(prefix + "lambda.scale"), vm(prefix + "lambda.shift"));
    Var pooled = upsample_nearest(tp, avg_pool_3x3_s2(tp, xhat), H, W);
    Var gam = channel_affine(tp, pooled, vm(prefix + "gamma.scale"), vm(prefix + "gamma.shift"));
    return add(tp, lam, gam);
  }

  Var forward(Tape<T>& tp, const VarMap<T>& vm, const StackedPair& x) const {
    PairVec s = gap_spatial(tp, x);
    Var t = gap_spatiotemporal(tp, x);
    PairVec w = local_weights(tp, vm, s, t);
    Var xhat = adaptive_conv(tp, vm, x.current, w.current);
    return multi_scale_integrate(tp, vm, xhat);
  }
};

// All four pyramid levels, each with its own parameters.
template <typename T>
struct Mfa {
  std::vector<int> channels;
  MfaConfig cfg;

  void register_params(ParamStore<T>& store, std::mt19937_64& rng) const {
    for (size_t l = 0; l < channels.size(); ++l)
      level(static_cast<int>(l)).register_params(store, rng);
  }

  MfaLevel<T> level(int l) const {
    return MfaLevel<T>{channels[static_cast<size_t>(l)], cfg,
                       "mfa.level" + std::to_string(l) + "."};
  }

  std::vector<Var> forward(Tape<T>& tp, const VarMap<T>& vm, const std::vector<Var>& pyr_past,
                           const std::vector<Var>& pyr_current) const {
    if (pyr_past.size() != channels.size() || pyr_current.size() != channels.size())
      throw std::invalid_argument("mfa: pyramid level count mismatch");
    std::vector<Var> out;
    for (size_t l = 0; l < channels.size(); ++l)
      out.push_back(level(static_cast<int>(l))
                        .forward(tp, vm, StackedPair{pyr_past[l], pyr_current[l]}));
    return out;
  }
};

}  // namespace stf
