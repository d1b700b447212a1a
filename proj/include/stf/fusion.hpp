#pragma once

#include <random>
#include <string>
#include <vector>

#include "stf/conv.hpp"
#include "stf/ops.hpp"
#include "stf/params.hpp"

namespace stf {

enum class FusionStrategy { kDual, kConcat, kMedian, kMean, kMax };

inline FusionStrategy fusion_strategy_from_string(const std::string& s) {
  if (s == "dual") return FusionStrategy::kDual;
  if (s == "concat") return FusionStrategy::kConcat;
  if (s == "median") return FusionStrategy::kMedian;
  if (s == "mean") return FusionStrategy::kMean;
  if (s == "max") return FusionStrategy::kMax;
  throw std::invalid_argument("unknown fusion strategy: " + s);
}

inline std::string to_string(FusionStrategy s) {
  switch (s) {
    case FusionStrategy::kDual: return "dual";
    case FusionStrategy::kConcat: return "concat";
    case FusionStrategy::kMedian: return "median";
    case FusionStrategy::kMean: return "mean";
    case FusionStrategy::kMax: return "max";
  }
  return "?";
}

struct FusionConfig {
  int channels = 64;  // C_fused
  int num_sweeps = 2;
  int deform_groups = 1;  // channel groups sharing one predicted offset field
  FusionStrategy strategy = FusionStrategy::kDual;
};

// Dual-frame fusion across the 4-scale pyramids. Per level the MFA and SFA
// streams are 1x1-aligned to C_fused and summed, then coarse-to-fine sweeps
// (upsample via adaptive pooling, 1x1 align, pixel-wise sum, deformable conv)
// refine down to the stride-4 map. Offset predictors start at zero, so at
// init every deformable conv equals its plain counterpart.
//
// The fixed strategies used by the ablation runner (concat/median/mean/max)
// replace the learned sweeps: all eight aligned per-level maps are brought to
// the finest resolution and combined elementwise (concat adds a 1x1 mixer).
template <typename T>
struct Fusion {
  std::vector<int> level_channels;  // input channels per pyramid level
  FusionConfig cfg;

  void register_params(ParamStore<T>& store, std::mt19937_64& rng) const {
    const int cf = cfg.channels;
    if (cfg.deform_groups < 1 || cf % cfg.deform_groups != 0)
      throw std::invalid_argument("fusion: deform_groups must divide channels");
    for (size_t l = 0; l < level_channels.size(); ++l) {
      const std::string p = "fusion.level" + std::to_string(l) + ".";
      const int c = level_channels[l];
      store.add(p + "align_o.w", he_uniform<T>({cf, c, 1, 1}, rng));
      store.add(p + "align_o.b", Tensor<T>({cf}));
      store.add(p + "align_s.w", he_uniform<T>({cf, c, 1, 1}, rng));
      store.add(p + "align_s.b", Tensor<T>({cf}));
    }
    if (cfg.strategy == FusionStrategy::kDual) {
      for (int s = 0; s < cfg.num_sweeps; ++s)
        for (int l = static_cast<int>(level_channels.size()) - 2; l >= 0; --l) {
          const std::string p =
              "fusion.sweep" + std::to_string(s) + ".step" + std::to_string(l) + ".";
          store.add(p + "align.w", he_uniform<T>({cf, cf, 1, 1}, rng));
          store.add(p + "align.b", Tensor<T>({cf}));
          store.add(p + "deform.w", he_uniform<T>({cf, cf, 3, 3}, rng));
          store.add(p + "deform.b", Tensor<T>({cf}));
          store.add(p + "offset.w",
                    Tensor<T>({cfg.deform_groups * 18, cf, 3, 3}));  // zero-initialized offsets
          store.add(p + "offset.b", Tensor<T>({cfg.deform_groups * 18}));
        }
    } else if (cfg.strategy == FusionStrategy::kConcat) {
      store.add("fusion.concat.w",
                he_uniform<T>({cf, cf * 2 * static_cast<int>(level_channels.size()), 1, 1}, rng));
      store.add("fusion.concat.b", Tensor<T>({cf}));
    }
    store.add("fusion.out.w", he_uniform<T>({cf, cf, 1, 1}, rng));
    store.add("fusion.out.b", Tensor<T>({cf}));
  }

  Var deform_step(Tape<T>& tp, const VarMap<T>& vm, const std::string& p, Var x) const {
    Var offs = conv2d(tp, x, vm(p + "offset.w"), vm(p + "offset.b"));
    return deform_conv2d(tp, x, vm(p + "deform.w"), vm(p + "deform.b"), offs, cfg.deform_groups);
  }

  // pyr_o = MFA stream, pyr_s = SFA stream; returns [B,C_fused,H/4,W/4].
  Var forward(Tape<T>& tp, const VarMap<T>& vm, const std::vector<Var>& pyr_o,
              const std::vector<Var>& pyr_s) const {
    const size_t L = level_channels.size();
    if (pyr_o.size() != L || pyr_s.size() != L)
      throw std::invalid_argument("fusion: pyramid level count mismatch");
    std::vector<Var> aligned_o(L), aligned_s(L), merged(L);
    for (size_t l = 0; l < L; ++l) {
      const std::string p = "fusion.level" + std::to_string(l) + ".";
      aligned_o[l] = conv2d(tp, pyr_o[l], vm(p + "align_o.w"), vm(p + "align_o.b"));
      aligned_s[l] = conv2d(tp, pyr_s[l], vm(p + "align_s.w"), vm(p + "align_s.b"));
      merged[l] = add(tp, aligned_o[l], aligned_s[l]);
    }
    const int H0 = tp.val(merged[0]).dim(2), W0 = tp.val(merged[0]).dim(3);

    Var fused;
    if (cfg.strategy == FusionStrategy::kDual) {
      std::vector<Var> cur = merged;
      for (int s = 0; s < cfg.num_sweeps; ++s) {
        std::vector<Var> next(L);
        next[L - 1] = cur[L - 1];
        for (int l = static_cast<int>(L) - 2; l >= 0; --l) {
          const std::string p =
              "fusion.sweep" + std::to_string(s) + ".step" + std::to_string(l) + ".";
          const Tensor<T>& lv = tp.val(cur[static_cast<size_t>(l)]);
          Var up = adaptive_pool(tp, next[static_cast<size_t>(l) + 1], lv.dim(2), lv.dim(3));
          Var t = add(tp, conv2d(tp, up, vm(p + "align.w"), vm(p + "align.b")),
                      cur[static_cast<size_t>(l)]);
          next[static_cast<size_t>(l)] = deform_step(tp, vm, p, t);
        }
        cur = next;
      }
      fused = cur[0];
    } else {
      std::vector<Var> maps;
      for (size_t l = 0; l < L; ++l) {
        maps.push_back(adaptive_pool(tp, aligned_o[l], H0, W0));
        maps.push_back(adaptive_pool(tp, aligned_s[l], H0, W0));
      }
      switch (cfg.strategy) {
        case FusionStrategy::kConcat:
          fused = conv2d(tp, concat_channels(tp, maps), vm("fusion.concat.w"),
                         vm("fusion.concat.b"));
          break;
        case FusionStrategy::kMedian:
          fused = elem_median(tp, maps);
          break;
        case FusionStrategy::kMean: {
          Var acc = maps[0];
          for (size_t i = 1; i < maps.size(); ++i) acc = add(tp, acc, maps[i]);
          fused = mul_scalar(tp, acc, T(1) / static_cast<T>(maps.size()));
          break;
        }
        case FusionStrategy::kMax:
          fused = elem_max(tp, maps);
          break;
        default:
          throw std::logic_error("fusion: unreachable");
      }
    }
    return conv2d(tp, fused, vm("fusion.out.w"), vm("fusion.out.b"));
  }
};

}  // namespace stf
