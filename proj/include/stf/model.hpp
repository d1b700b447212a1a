#pragma once

#include <random>
#include <vector>

#include "stf/backbone.hpp"
#include "stf/fusion.hpp"
#include "stf/head.hpp"
#include "stf/mfa.hpp"
#include "stf/params.hpp"
#include "stf/sfa.hpp"

namespace stf {

struct ModelConfig {
  std::vector<int> backbone_channels = {32, 64, 128, 256};
  bool use_mfa = true;
  bool use_sfa = true;
  MfaConfig mfa;
  SfaConfig sfa;
  FusionConfig fusion;
  HeadConfig head;
  LossWeights loss;
};

// The full two-frame detector. Disabled attention modules pass the raw
// pyramid through, so the baseline is a genuine single-frame model (the past
// frame is never run through the backbone when MFA is off).
template <typename T>
struct Model {
  ModelConfig cfg;
  Backbone<T> backbone;
  Mfa<T> mfa;
  Sfa<T> sfa;
  Fusion<T> fusion;
  Head<T> head;

  explicit Model(ModelConfig c) : cfg(std::move(c)) {
    backbone.channels = cfg.backbone_channels;
    mfa.channels = cfg.backbone_channels;
    mfa.cfg = cfg.mfa;
    sfa.channels = cfg.backbone_channels;
    sfa.cfg = cfg.sfa;
    fusion.level_channels = cfg.backbone_channels;
    fusion.cfg = cfg.fusion;
    head.cfg = cfg.head;
    head.fused_channels = cfg.fusion.channels;
    head.single_frame_channels = cfg.backbone_channels[0];
  }

  // Every module draws from its own seeded stream, so toggling one module on
  // or off never shifts another module's initialization.
  void register_params(ParamStore<T>& store, std::uint64_t seed) const {
    std::mt19937_64 r1(seed + 1), r2(seed + 2), r3(seed + 3), r4(seed + 4), r5(seed + 5);
    backbone.register_params(store, r1);
    if (cfg.use_mfa) mfa.register_params(store, r2);
    if (cfg.use_sfa) sfa.register_params(store, r3);
    fusion.register_params(store, r4);
    head.register_params(store, r5);
  }

  struct Forward {
    HeadOutputs<T> outputs;
    Var fused;
    std::vector<Var> pyramid_current;
  };

  // past may be invalid when MFA is disabled.
  Forward forward(Tape<T>& tp, const VarMap<T>& vm, Var past, Var current) const {
    std::vector<Var> pyr_cur = backbone.forward(tp, vm, current);
    std::vector<Var> x_o = pyr_cur;
    if (cfg.use_mfa) {
      std::vector<Var> pyr_past = backbone.forward(tp, vm, past);
      x_o = mfa.forward(tp, vm, pyr_past, pyr_cur);
    }
    std::vector<Var> x_s = cfg.use_sfa ? sfa.forward(tp, vm, pyr_cur) : pyr_cur;
    Forward f;
    f.fused = fusion.forward(tp, vm, x_o, x_s);
    f.outputs = head.predict(tp, vm, f.fused, x_s[0]);
    f.pyramid_current = std::move(pyr_cur);
    return f;
  }
};

}  // namespace stf
