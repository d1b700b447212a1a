#pragma once

#include <random>
#include <string>
#include <vector>

#include "stf/conv.hpp"
#include "stf/ops.hpp"
#include "stf/params.hpp"

namespace stf {

struct SfaConfig {
  int reduction_ratio = 4;
  bool literal_eq5 = false;  // 1x1 path only on the average-pool branch
};

// Single-frame attention for one pyramid level: channel gate, spatial gate,
// then concatenation of the gated copies with the input and a 1x1 projection
// back to C channels. The projection is initialized to select the raw input
// block, making the whole module the identity at start.
template <typename T>
struct SfaLevel {
  int channels = 0;
  SfaConfig cfg;
  std::string prefix;  // e.g. "sfa.level0."

  void register_params(ParamStore<T>& store, std::mt19937_64& rng) const {
    const int c = channels, r = cfg.reduction_ratio;
    if (r <= 0 || c % r != 0)
      throw std::invalid_argument("sfa: reduction ratio must divide channels");
    store.add(prefix + "ch.reduce.w", he_uniform<T>({c / r, c}, rng));
    store.add(prefix + "ch.reduce.b", Tensor<T>({c / r}));
    store.add(prefix + "ch.expand.w", he_uniform<T>({c, c / r}, rng));
    store.add(prefix + "ch.expand.b", Tensor<T>({c}));
    store.add(prefix + "sp.conv1.w", he_uniform<T>({1, 1, 1, 1}, rng));
    store.add(prefix + "sp.conv1.b", Tensor<T>({1}));
    store.add(prefix + "sp.conv5.w", he_uniform<T>({1, 1, 5, 5}, rng));
    store.add(prefix + "sp.conv5.b", Tensor<T>({1}));
    Tensor<T> proj({c, 3 * c, 1, 1});
    for (int i = 0; i < c; ++i) proj.at(i, 2 * c + i, 0, 0) = T(1);
    store.add(prefix + "proj.w", std::move(proj));
    store.add(prefix + "proj.b", Tensor<T>({c}));
  }

  // A_c in (0,1)^{B x C}.
  Var channel_attention(Tape<T>& tp, const VarMap<T>& vm, Var x) const {
    auto mlp = [&](Var v) {
      Var h = relu(tp, dense(tp, v, vm(prefix + "ch.reduce.w"), vm(prefix + "ch.reduce.b")));
      return dense(tp, h, vm(prefix + "ch.expand.w"), vm(prefix + "ch.expand.b"));
    };
    Var ap = gap_hw(tp, x);
    Var mp = gmp_hw(tp, x);
    Var pre = cfg.literal_eq5 ? add(tp, mlp(ap), mp) : add(tp, mlp(ap), mlp(mp));
    return sigmoid(tp, pre);
  }

  // A_s in (0,1)^{B x 1 x H x W}, computed over the channel-gated features.
  Var spatial_attention(Tape<T>& tp, const VarMap<T>& vm, Var x, Var a_c) const {
    Var gated = mul_channel(tp, x, a_c);
    Var avg = channel_mean(tp, gated);
    Var mx = channel_max(tp, gated);
    Var comb = add(tp, conv2d(tp, avg, vm(prefix + "sp.conv1.w"), vm(prefix + "sp.conv1.b")), mx);
    return sigmoid(tp, conv2d(tp, comb, vm(prefix + "sp.conv5.w"), vm(prefix + "sp.conv5.b")));
  }

  Var forward(Tape<T>& tp, const VarMap<T>& vm, Var x) const {
    Var a_c = channel_attention(tp, vm, x);
    Var a_s = spatial_attention(tp, vm, x, a_c);
    Var g_c = mul_channel(tp, x, a_c);
    Var g_s = mul_spatial(tp, x, a_s);
    Var cat = concat_channels(tp, {g_c, g_s, x});
    return conv2d(tp, cat, vm(prefix + "proj.w"), vm(prefix + "proj.b"));
  }
};

template <typename T>
struct Sfa {
  std::vector<int> channels;
  SfaConfig cfg;

  void register_params(ParamStore<T>& store, std::mt19937_64& rng) const {
    for (size_t l = 0; l < channels.size(); ++l)
      level(static_cast<int>(l)).register_params(store, rng);
  }

  SfaLevel<T> level(int l) const {
    return SfaLevel<T>{channels[static_cast<size_t>(l)], cfg,
                       "sfa.level" + std::to_string(l) + "."};
  }

  std::vector<Var> forward(Tape<T>& tp, const VarMap<T>& vm,
                           const std::vector<Var>& pyramid) const {
    if (pyramid.size() != channels.size())
      throw std::invalid_argument("sfa: pyramid level count mismatch");
    std::vector<Var> out;
    for (size_t l = 0; l < channels.size(); ++l)
      out.push_back(level(static_cast<int>(l)).forward(tp, vm, pyramid[l]));
    return out;
  }
};

}  // namespace stf
