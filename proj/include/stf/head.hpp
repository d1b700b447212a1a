#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "stf/conv.hpp"
#include "stf/ops.hpp"
#include "stf/params.hpp"
#include "stf/types.hpp"

namespace stf {

constexpr int kOutputStride = 4;

struct HeadConfig {
  int num_classes = 3;
  int hidden_channels = 64;
  int top_k = 64;
  double score_threshold = 0.1;
};

struct LossWeights {
  double epsilon = 2.0;   // focal exponent on the prediction
  double zeta = 4.0;      // focal exponent on the soft negatives
  double lambda_dim = 0.1;
  double lambda_pos = 1.0;
};

template <typename T>
struct HeadOutputs {
  Var heatmap;  // [B,K,H/4,W/4], sigmoid applied
  Var offset;   // [B,2,H/4,W/4], channel 0 = x, 1 = y
  Var size;     // [B,2,H/4,W/4], channel 0 = w, 1 = h, stride-4 grid units
};

template <typename T>
struct HeatmapTargets {
  Tensor<T> heatmap;  // [B,K,Hs,Ws], gaussian splats, exact 1 at centers
  Tensor<T> offset;   // [B,2,Hs,Ws]
  Tensor<T> size;     // [B,2,Hs,Ws]
  Tensor<T> mask;     // [B,1,Hs,Ws], 1 on center cells
  int num_centers = 0;  // M, counts every box even on center-cell collisions
  int num_boxes = 0;    // J
};

// CenterNet-style head. The heatmap branch reads the fused map; offset and
// size branches read the finest single-frame (SFA) level.
template <typename T>
struct Head {
  HeadConfig cfg;
  int fused_channels = 64;
  int single_frame_channels = 32;

  void register_params(ParamStore<T>& store, std::mt19937_64& rng) const {
    const int h = cfg.hidden_channels;
    // Final 1x1 kernels start near zero so the initial heatmap sits at the
    // bias prior (0.1 everywhere) instead of saturating the focal loss.
    auto small = [&](std::vector<int> shape) {
      Tensor<T> w = he_uniform<T>(std::move(shape), rng);
      for (std::int64_t i = 0; i < w.numel(); ++i) w[i] *= T(0.01);
      return w;
    };
    store.add("head.heat.conv1.w", he_uniform<T>({h, fused_channels, 3, 3}, rng));
    store.add("head.heat.conv1.b", Tensor<T>({h}));
    store.add("head.heat.conv2.w", small({cfg.num_classes, h, 1, 1}));
    store.add("head.heat.conv2.b",
              Tensor<T>::full({cfg.num_classes}, static_cast<T>(std::log(0.1 / 0.9))));
    // Regression branches also start at priors: the expected fractional
    // offset is 0.5, and a mid-range box is ~32 px = 8 grid units. Starting
    // there keeps the initial L1 residuals small enough for the short
    // schedule to close.
    for (const char* br : {"off", "size"}) {
      const std::string p = std::string("head.") + br + ".";
      store.add(p + "conv1.w", he_uniform<T>({h, single_frame_channels, 3, 3}, rng));
      store.add(p + "conv1.b", Tensor<T>({h}));
      store.add(p + "conv2.w", small({2, h, 1, 1}));
      store.add(p + "conv2.b",
                Tensor<T>::full({2}, br == std::string("off") ? T(0.5) : T(8)));
    }
  }

  HeadOutputs<T> predict(Tape<T>& tp, const VarMap<T>& vm, Var fused,
                         Var single_frame_finest) const {
    const Tensor<T>& fv = tp.val(fused);
    const Tensor<T>& sv = tp.val(single_frame_finest);
    if (fv.dim(2) != sv.dim(2) || fv.dim(3) != sv.dim(3))
      throw std::invalid_argument("head: fused and single-frame spatial dims differ");
    auto branch = [&](const std::string& p, Var x) {
      Var y = relu(tp, conv2d(tp, x, vm(p + "conv1.w"), vm(p + "conv1.b")));
      return conv2d(tp, y, vm(p + "conv2.w"), vm(p + "conv2.b"));
    };
    HeadOutputs<T> out;
    out.heatmap = sigmoid(tp, branch("head.heat.", fused));
    out.offset = branch("head.off.", single_frame_finest);
    out.size = branch("head.size.", single_frame_finest);
    return out;
  }
};

// ---------------------------------------------------------------------------
// Target encoding
// ---------------------------------------------------------------------------

namespace detail {

// Object-size-adaptive gaussian radius (minimum IoU 0.7 criterion).
inline double gaussian_radius(double height, double width, double min_overlap = 0.7) {
  const double b1 = height + width;
  const double c1 = width * height * (1 - min_overlap) / (1 + min_overlap);
  const double r1 = (b1 + std::sqrt(std::max(0.0, b1 * b1 - 4 * c1))) / 2;

  const double a2 = 4, b2 = 2 * (height + width), c2 = (1 - min_overlap) * width * height;
  const double r2 = (b2 + std::sqrt(std::max(0.0, b2 * b2 - 4 * a2 * c2))) / 2;

  const double a3 = 4 * min_overlap, b3 = -2 * min_overlap * (height + width);
  const double c3 = (min_overlap - 1) * width * height;
  const double r3 = (b3 + std::sqrt(std::max(0.0, b3 * b3 - 4 * a3 * c3))) / 2;
  return std::min({r1, r2, r3});
}

}  // namespace detail

template <typename T>
HeatmapTargets<T> encode_targets(const std::vector<Annotation>& annotations, int img_w, int img_h,
                                 int num_classes) {
  const int Ws = img_w / kOutputStride, Hs = img_h / kOutputStride;
  const int B = static_cast<int>(annotations.size());
  HeatmapTargets<T> tg;
  tg.heatmap = Tensor<T>({B, num_classes, Hs, Ws});
  tg.offset = Tensor<T>({B, 2, Hs, Ws});
  tg.size = Tensor<T>({B, 2, Hs, Ws});
  tg.mask = Tensor<T>({B, 1, Hs, Ws});
  for (int b = 0; b < B; ++b) {
    annotations[static_cast<size_t>(b)].check_consistent();
    for (const Box& box : annotations[static_cast<size_t>(b)].boxes) {
      box.validate(img_w, img_h);
      if (box.class_id >= num_classes)
        throw std::invalid_argument("encode_targets: class id out of range");
      const double cx = box.cx(), cy = box.cy();
      if (cx < 0 || cx >= img_w || cy < 0 || cy >= img_h)
        throw std::invalid_argument("encode_targets: box center outside image");
      const double lx = cx / kOutputStride, ly = cy / kOutputStride;
      const int qx = static_cast<int>(std::floor(lx)), qy = static_cast<int>(std::floor(ly));
      tg.offset.at(b, 0, qy, qx) = static_cast<T>(lx - qx);
      tg.offset.at(b, 1, qy, qx) = static_cast<T>(ly - qy);
      tg.size.at(b, 0, qy, qx) = static_cast<T>(box.width() / kOutputStride);
      tg.size.at(b, 1, qy, qx) = static_cast<T>(box.height() / kOutputStride);
      tg.mask.at(b, 0, qy, qx) = T(1);
      tg.num_centers += 1;
      tg.num_boxes += 1;

      const int radius = std::max(
          0, static_cast<int>(detail::gaussian_radius(box.height() / kOutputStride,
                                                      box.width() / kOutputStride)));
      const double sigma = (2.0 * radius + 1.0) / 6.0;
      for (int dy = -radius; dy <= radius; ++dy)
        for (int dx = -radius; dx <= radius; ++dx) {
          const int y = qy + dy, x = qx + dx;
          if (y < 0 || y >= Hs || x < 0 || x >= Ws) continue;
          const T v =
              static_cast<T>(std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma)));
          T& q = tg.heatmap.at(b, box.class_id, y, x);
          q = std::max(q, v);
        }
      tg.heatmap.at(b, box.class_id, qy, qx) = T(1);
    }
  }
  return tg;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

constexpr double kLogClamp = 1e-7;

// Focal heatmap loss over predictions in (0,1); Q == 1 marks center cells.
// Predictions are clamped to [delta, 1-delta] before the logs; the clamp's
// gradient is zero outside the interior.
template <typename T>
Var heatmap_focal_loss(Tape<T>& tp, Var qhat, const Tensor<T>& q, int num_centers, T epsilon,
                       T zeta) {
  const Tensor<T>& pv = tp.val(qhat);
  if (!pv.same_shape(q)) throw std::invalid_argument("focal loss: shape mismatch");
  const T lo = static_cast<T>(kLogClamp), hi = T(1) - static_cast<T>(kLogClamp);
  const T inv_m = T(1) / static_cast<T>(std::max(num_centers, 1));
  T loss = 0;
  for (std::int64_t i = 0; i < pv.numel(); ++i) {
    const T p = std::clamp(pv[i], lo, hi);
    if (q[i] == T(1))
      loss -= std::pow(T(1) - p, epsilon) * std::log(p);
    else
      loss -= std::pow(T(1) - q[i], zeta) * std::pow(p, epsilon) * std::log(T(1) - p);
  }
  loss *= inv_m;
  auto qcopy = std::make_shared<Tensor<T>>(q);
  return tp.push(Tensor<T>({1}, {loss}),
                 [qhat, qcopy, inv_m, lo, hi, epsilon, zeta](Tape<T>& t, Var self) {
                   const T g = t.grad(self)[0] * inv_m;
                   const Tensor<T>& pv2 = t.val(qhat);
                   Tensor<T>& gp = t.grad(qhat);
                   for (std::int64_t i = 0; i < pv2.numel(); ++i) {
                     if (pv2[i] <= lo || pv2[i] >= hi) continue;
                     const T p = pv2[i];
                     T d;
                     if ((*qcopy)[i] == T(1)) {
                       d = epsilon * std::pow(T(1) - p, epsilon - 1) * std::log(p) -
                           std::pow(T(1) - p, epsilon) / p;
                     } else {
                       d = -std::pow(T(1) - (*qcopy)[i], zeta) *
                           (epsilon * std::pow(p, epsilon - 1) * std::log(T(1) - p) -
                            std::pow(p, epsilon) / (T(1) - p));
                     }
                     gp[i] += g * d;
                   }
                 });
}

// L1 over the 2 channels at masked cells, divided by max(denom, 1).
template <typename T>
Var masked_l1_loss(Tape<T>& tp, Var pred, const Tensor<T>& target, const Tensor<T>& mask,
                   int denom) {
  const Tensor<T>& pv = tp.val(pred);
  if (!pv.same_shape(target)) throw std::invalid_argument("masked l1: shape mismatch");
  const int B = pv.dim(0), C = pv.dim(1), H = pv.dim(2), W = pv.dim(3);
  if (mask.shape != std::vector<int>{B, 1, H, W})
    throw std::invalid_argument("masked l1: bad mask shape");
  const T inv = T(1) / static_cast<T>(std::max(denom, 1));
  T loss = 0;
  for (int b = 0; b < B; ++b)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        if (mask.at(b, 0, y, x) == T(0)) continue;
        for (int c = 0; c < C; ++c)
          loss += std::abs(pv.at(b, c, y, x) - target.at(b, c, y, x));
      }
  loss *= inv;
  auto tcopy = std::make_shared<Tensor<T>>(target);
  auto mcopy = std::make_shared<Tensor<T>>(mask);
  return tp.push(Tensor<T>({1}, {loss}),
                 [pred, tcopy, mcopy, inv, B, C, H, W](Tape<T>& t, Var self) {
                   const T g = t.grad(self)[0] * inv;
                   const Tensor<T>& pv2 = t.val(pred);
                   Tensor<T>& gp = t.grad(pred);
                   for (int b = 0; b < B; ++b)
                     for (int y = 0; y < H; ++y)
                       for (int x = 0; x < W; ++x) {
                         if (mcopy->at(b, 0, y, x) == T(0)) continue;
                         for (int c = 0; c < C; ++c) {
                           const T r = pv2.at(b, c, y, x) - tcopy->at(b, c, y, x);
                           gp.at(b, c, y, x) += g * (r > T(0) ? T(1) : (r < T(0) ? T(-1) : T(0)));
                         }
                       }
                 });
}

template <typename T>
Var offset_loss(Tape<T>& tp, Var pred, const HeatmapTargets<T>& tg) {
  return masked_l1_loss(tp, pred, tg.offset, tg.mask, tg.num_centers);
}

template <typename T>
Var size_loss(Tape<T>& tp, Var pred, const HeatmapTargets<T>& tg) {
  return masked_l1_loss(tp, pred, tg.size, tg.mask, tg.num_boxes);
}

template <typename T>
Var total_loss(Tape<T>& tp, Var heat_loss, Var sz_loss, Var off_loss, const LossWeights& w) {
  Var x = mul_scalar(tp, sz_loss, static_cast<T>(w.lambda_dim));
  Var y = mul_scalar(tp, off_loss, static_cast<T>(w.lambda_pos));
  return add(tp, heat_loss, add(tp, x, y));
}

// ---------------------------------------------------------------------------
// Decoding
// ---------------------------------------------------------------------------

// Peaks of the heatmap via 3x3 max-filter equality, top_k by score at or above
// the threshold. Ordering is deterministic: score desc, then row-major
// position, then class.
template <typename T>
DetectionSet decode(const Tensor<T>& heatmap, const Tensor<T>& offset, const Tensor<T>& size,
                    int top_k, double score_threshold, int img_w, int img_h) {
  if (top_k < 1) throw std::invalid_argument("decode: top_k must be >= 1");
  const int B = heatmap.dim(0), K = heatmap.dim(1), H = heatmap.dim(2), W = heatmap.dim(3);
  DetectionSet out;
  out.per_image.resize(static_cast<size_t>(B));
  for (int b = 0; b < B; ++b) {
    struct Peak {
      double score;
      int y, x, cls;
    };
    std::vector<Peak> peaks;
    for (int c = 0; c < K; ++c)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          const T v = heatmap.at(b, c, y, x);
          if (static_cast<double>(v) < score_threshold) continue;
          bool is_peak = true;
          for (int dy = -1; dy <= 1 && is_peak; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              const int yy = y + dy, xx = x + dx;
              if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
              if (heatmap.at(b, c, yy, xx) > v) {
                is_peak = false;
                break;
              }
            }
          if (is_peak) peaks.push_back({static_cast<double>(v), y, x, c});
        }
    std::sort(peaks.begin(), peaks.end(), [W](const Peak& a, const Peak& b2) {
      if (a.score != b2.score) return a.score > b2.score;
      if (a.y * W + a.x != b2.y * W + b2.x) return a.y * W + a.x < b2.y * W + b2.x;
      return a.cls < b2.cls;
    });
    if (static_cast<int>(peaks.size()) > top_k) peaks.resize(static_cast<size_t>(top_k));
    for (const Peak& p : peaks) {
      const double cx = (p.x + static_cast<double>(offset.at(b, 0, p.y, p.x))) * kOutputStride;
      const double cy = (p.y + static_cast<double>(offset.at(b, 1, p.y, p.x))) * kOutputStride;
      const double bw = static_cast<double>(size.at(b, 0, p.y, p.x)) * kOutputStride;
      const double bh = static_cast<double>(size.at(b, 1, p.y, p.x)) * kOutputStride;
      Box box;
      box.x_min = std::max(0.0, cx - bw / 2);
      box.y_min = std::max(0.0, cy - bh / 2);
      box.x_max = std::min(static_cast<double>(img_w), cx + bw / 2);
      box.y_max = std::min(static_cast<double>(img_h), cy + bh / 2);
      box.class_id = p.cls;
      if (box.x_min < box.x_max && box.y_min < box.y_max)
        out.per_image[static_cast<size_t>(b)].push_back({box, p.score});
    }
  }
  return out;
}

}  // namespace stf
