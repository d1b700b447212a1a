#pragma once

#include <random>
#include <string>
#include <vector>

#include "stf/conv.hpp"
#include "stf/ops.hpp"
#include "stf/params.hpp"

namespace stf {

// Multi-resolution trunk emitting the 4-level feature pyramid with strides
// {4, 8, 16, 32}. Stage l = strided 3x3 conv + one residual block; the stem
// conv (stride 2) is counted as part of stage 0 for freezing purposes.
template <typename T>
struct Backbone {
  std::vector<int> channels = {32, 64, 128, 256};

  void register_params(ParamStore<T>& store, std::mt19937_64& rng) const {
    if (channels.size() != 4) throw std::invalid_argument("backbone: need 4 channel widths");
    store.add("backbone.stage0.stem.w", he_uniform<T>({channels[0], 3, 3, 3}, rng));
    store.add("backbone.stage0.stem.b", Tensor<T>({channels[0]}));
    int cin = channels[0];
    for (int s = 0; s < 4; ++s) {
      const std::string p = "backbone.stage" + std::to_string(s) + ".";
      const int c = channels[static_cast<size_t>(s)];
      store.add(p + "down.w", he_uniform<T>({c, cin, 3, 3}, rng));
      store.add(p + "down.b", Tensor<T>({c}));
      store.add(p + "res1.w", he_uniform<T>({c, c, 3, 3}, rng));
      store.add(p + "res1.b", Tensor<T>({c}));
      store.add(p + "res2.w", he_uniform<T>({c, c, 3, 3}, rng));
      store.add(p + "res2.b", Tensor<T>({c}));
      cin = c;
    }
  }

  // frames: [B,3,H,W], H and W divisible by 32. Returns the 4 pyramid levels.
  std::vector<Var> forward(Tape<T>& tp, const VarMap<T>& vm, Var frames) const {
    const Tensor<T>& fv = tp.val(frames);
    if (fv.ndim() != 4 || fv.dim(1) != 3)
      throw std::invalid_argument("backbone: frames must be [B,3,H,W]");
    if (fv.dim(2) % 32 != 0 || fv.dim(3) % 32 != 0)
      throw std::invalid_argument("backbone: image dims must be divisible by 32");
    Var x = relu(tp, conv2d(tp, frames, vm("backbone.stage0.stem.w"),
                            vm("backbone.stage0.stem.b"), 2, 1));
    std::vector<Var> levels;
    for (int s = 0; s < 4; ++s) {
      const std::string p = "backbone.stage" + std::to_string(s) + ".";
      x = relu(tp, conv2d(tp, x, vm(p + "down.w"), vm(p + "down.b"), 2, 1));
      Var r = relu(tp, conv2d(tp, x, vm(p + "res1.w"), vm(p + "res1.b"), 1, 1));
      r = conv2d(tp, r, vm(p + "res2.w"), vm(p + "res2.b"), 1, 1);
      x = relu(tp, add(tp, x, r));
      levels.push_back(x);
    }
    return levels;
  }
};

// Suppresses (or re-enables) parameter updates for one backbone stage.
// Activations are still computed; the optimizer skips frozen tensors.
template <typename T>
void set_stage_frozen(ParamStore<T>& store, int stage, bool frozen) {
  if (stage < 0 || stage > 3) throw std::out_of_range("backbone: stage must be in [0,3]");
  store.set_frozen_prefix("backbone.stage" + std::to_string(stage) + ".", frozen);
}

}  // namespace stf
