#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "stf/tensor.hpp"
#include "stf/types.hpp"

namespace stf {

// One video frame: RGB pixels in [0,1] (quantized to the 8-bit grid so PNG
// round trips are bit-exact).
struct Frame {
  Tensor<float> pixels;  // [3,H,W]
  int index = 0;
  std::string sequence_id;

  int height() const { return pixels.dim(1); }
  int width() const { return pixels.dim(2); }
};

struct GeneratorConfig {
  int width = 256, height = 256;  // divisible by 32
  int num_frames = 8;
  int objects_min = 2, objects_max = 5;
  double size_min = 16, size_max = 48;     // object extent in pixels
  double speed_min = 1, speed_max = 5;     // pixels per frame
  double jitter = 0.4;                     // per-frame positional jitter
  double occluder_density = 1.5;           // expected occluder count
  bool blur = false;
  int blur_substeps = 8;                   // K sub-positions along the velocity
  int num_classes = 3;

  void validate() const {
    if (width % 32 != 0 || height % 32 != 0)
      throw std::invalid_argument("generator: dims must be divisible by 32");
    if (num_frames < 2)
      throw std::invalid_argument("generator: need at least 2 frames (two-frame method)");
    if (size_max > width || size_max > height)
      throw std::invalid_argument("generator: object size larger than image");
    if (objects_min < 0 || objects_max < objects_min)
      throw std::invalid_argument("generator: bad object count range");
    if (num_classes < 1 || num_classes > 3)
      throw std::invalid_argument("generator: supports 1..3 shape classes");
  }
};

namespace gen_detail {

// Shape support mask for one class within a box, on the pixel grid.
// class 0: rectangle, 1: ellipse, 2: upward triangle. The support never
// leaves the box rectangle.
inline bool shape_covers(int class_id, const Box& b, double px, double py) {
  if (px < b.x_min || px >= b.x_max || py < b.y_min || py >= b.y_max) return false;
  const double u = (px - b.x_min) / b.width();   // [0,1)
  const double v = (py - b.y_min) / b.height();
  switch (class_id) {
    case 0: return true;
    case 1: {
      const double dx = 2 * u - 1, dy = 2 * v - 1;
      return dx * dx + dy * dy <= 1.0;
    }
    case 2: return std::abs(2 * u - 1) <= v;
    default: return false;
  }
}

struct MovingObject {
  int class_id = 0;
  double w = 0, h = 0;
  double x0 = 0, y0 = 0;    // top-left at t = 0
  double vx = 0, vy = 0;
  float color[3] = {0, 0, 0};
};

struct Occluder {
  double w = 0, h = 0, x0 = 0, y0 = 0, vx = 0, vy = 0;
  float shade = 0.5f;
};

}  // namespace gen_detail

// Deterministic synthetic sequence of textured shapes moving with constant
// velocity plus per-frame jitter, with opaque rectangular occluders and
// optional motion blur. Annotations carry full (amodal) extents.
inline std::pair<std::vector<Frame>, std::vector<Annotation>> generate_sequence(
    const GeneratorConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  auto uni = [&](double a, double b) {
    return std::uniform_real_distribution<double>(a, b)(rng);
  };
  const int W = cfg.width, H = cfg.height, F = cfg.num_frames;

  // Static background: soft gray base with frozen per-pixel noise.
  Tensor<float> background({3, H, W});
  {
    const float base[3] = {static_cast<float>(uni(0.28, 0.4)), static_cast<float>(uni(0.28, 0.4)),
                           static_cast<float>(uni(0.28, 0.4))};
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
          background.at(c, y, x) = base[c] + static_cast<float>(uni(-0.03, 0.03));
  }

  // Objects with trajectories that stay inside the image for the whole clip.
  std::vector<gen_detail::MovingObject> objects;
  const int count = std::uniform_int_distribution<int>(cfg.objects_min, cfg.objects_max)(rng);
  for (int i = 0; i < count; ++i) {
    gen_detail::MovingObject o;
    o.class_id = std::uniform_int_distribution<int>(0, cfg.num_classes - 1)(rng);
    o.w = uni(cfg.size_min, cfg.size_max);
    o.h = uni(cfg.size_min, cfg.size_max);
    double speed = uni(cfg.speed_min, cfg.speed_max);
    const double ang = uni(0, 2 * M_PI);
    o.vx = speed * std::cos(ang);
    o.vy = speed * std::sin(ang);
    // Shrink the velocity until a feasible start position exists.
    const double margin = cfg.jitter + 1.0;
    for (;;) {
      const double tx = o.vx * (F - 1), ty = o.vy * (F - 1);
      const double x_lo = margin + std::max(0.0, -tx), x_hi = W - o.w - margin - std::max(0.0, tx);
      const double y_lo = margin + std::max(0.0, -ty), y_hi = H - o.h - margin - std::max(0.0, ty);
      if (x_lo < x_hi && y_lo < y_hi) {
        o.x0 = uni(x_lo, x_hi);
        o.y0 = uni(y_lo, y_hi);
        break;
      }
      o.vx *= 0.5;
      o.vy *= 0.5;
    }
    // Class-keyed hue so classification is learnable.
    const float base_hue[3][3] = {{0.85f, 0.25f, 0.2f}, {0.2f, 0.8f, 0.3f}, {0.25f, 0.35f, 0.9f}};
    for (int c = 0; c < 3; ++c)
      o.color[c] =
          std::clamp(base_hue[o.class_id][c] + static_cast<float>(uni(-0.08, 0.08)), 0.f, 1.f);
    objects.push_back(o);
  }

  std::vector<gen_detail::Occluder> occluders;
  {
    int n = static_cast<int>(std::floor(cfg.occluder_density));
    if (uni(0, 1) < cfg.occluder_density - n) ++n;
    for (int i = 0; i < n; ++i) {
      gen_detail::Occluder oc;
      oc.w = uni(0.15, 0.3) * W;
      oc.h = uni(0.15, 0.3) * H;
      oc.x0 = uni(-oc.w / 2, W - oc.w / 2);
      oc.y0 = uni(-oc.h / 2, H - oc.h / 2);
      const double speed = uni(cfg.speed_min, cfg.speed_max);
      const double ang = uni(0, 2 * M_PI);
      oc.vx = speed * std::cos(ang);
      oc.vy = speed * std::sin(ang);
      oc.shade = static_cast<float>(uni(0.45, 0.7));
      occluders.push_back(oc);
    }
  }

  // Per-frame, per-object jitter drawn up-front so positions do not depend on
  // render order.
  std::vector<std::vector<std::pair<double, double>>> jitters(
      static_cast<size_t>(F), std::vector<std::pair<double, double>>(objects.size()));
  for (int t = 0; t < F; ++t)
    for (size_t i = 0; i < objects.size(); ++i)
      jitters[static_cast<size_t>(t)][i] = {uni(-cfg.jitter, cfg.jitter),
                                            uni(-cfg.jitter, cfg.jitter)};

  std::vector<Frame> frames;
  std::vector<Annotation> annotations;
  for (int t = 0; t < F; ++t) {
    Tensor<float> img = background;
    Annotation ann;

    for (size_t i = 0; i < objects.size(); ++i) {
      const auto& o = objects[i];
      const auto [jx, jy] = jitters[static_cast<size_t>(t)][i];
      const double x = o.x0 + o.vx * t + jx, y = o.y0 + o.vy * t + jy;
      Box box{x, y, x + o.w, y + o.h, o.class_id};

      const double speed = std::hypot(o.vx, o.vy);
      const bool blurred = cfg.blur && speed > 0;
      const int K = blurred ? cfg.blur_substeps : 1;
      const float alpha = 1.0f / static_cast<float>(K);
      for (int s = 0; s < K; ++s) {
        // Trailing streak behind the nominal position.
        Box sb = box;
        sb.x_min -= o.vx * s / K;
        sb.x_max -= o.vx * s / K;
        sb.y_min -= o.vy * s / K;
        sb.y_max -= o.vy * s / K;
        const int py0 = std::max(0, static_cast<int>(std::floor(sb.y_min)));
        const int py1 = std::min(H - 1, static_cast<int>(std::ceil(sb.y_max)));
        const int px0 = std::max(0, static_cast<int>(std::floor(sb.x_min)));
        const int px1 = std::min(W - 1, static_cast<int>(std::ceil(sb.x_max)));
        for (int py = py0; py <= py1; ++py)
          for (int px = px0; px <= px1; ++px) {
            if (!gen_detail::shape_covers(o.class_id, sb, px + 0.5, py + 0.5)) continue;
            // Two-tone stripe texture in object-local coordinates.
            const int stripe =
                (static_cast<int>(std::floor((px - sb.x_min) / 4.0)) +
                 static_cast<int>(std::floor((py - sb.y_min) / 4.0))) % 2;
            for (int c = 0; c < 3; ++c) {
              const float col = stripe ? o.color[c] * 0.6f : o.color[c];
              float& dst = img.at(c, py, px);
              dst = dst * (1 - alpha) + col * alpha;
            }
          }
      }

      ann.boxes.push_back(box);
      ann.blur_magnitude.push_back(blurred ? speed : 0.0);
      ann.occlusion_fraction.push_back(0.0);  // filled in after occluders
    }

    // Occluders on top.
    std::vector<Box> occ_rects;
    for (const auto& oc : occluders) {
      const double x = oc.x0 + oc.vx * t, y = oc.y0 + oc.vy * t;
      Box r{x, y, x + oc.w, y + oc.h, -1};
      occ_rects.push_back(r);
      const int py0 = std::max(0, static_cast<int>(std::floor(r.y_min)));
      const int py1 = std::min(H - 1, static_cast<int>(std::ceil(r.y_max)) - 1);
      const int px0 = std::max(0, static_cast<int>(std::floor(r.x_min)));
      const int px1 = std::min(W - 1, static_cast<int>(std::ceil(r.x_max)) - 1);
      for (int py = py0; py <= py1; ++py)
        for (int px = px0; px <= px1; ++px)
          for (int c = 0; c < 3; ++c) img.at(c, py, px) = oc.shade;
    }

    // occlusion_fraction = covered box area / box area, on the pixel grid.
    for (size_t i = 0; i < ann.boxes.size(); ++i) {
      const Box& b = ann.boxes[i];
      std::int64_t total = 0, covered = 0;
      const int py0 = static_cast<int>(std::floor(b.y_min)),
                py1 = static_cast<int>(std::ceil(b.y_max)) - 1;
      const int px0 = static_cast<int>(std::floor(b.x_min)),
                px1 = static_cast<int>(std::ceil(b.x_max)) - 1;
      for (int py = py0; py <= py1; ++py)
        for (int px = px0; px <= px1; ++px) {
          ++total;
          for (const Box& r : occ_rects)
            if (px + 0.5 >= r.x_min && px + 0.5 < r.x_max && py + 0.5 >= r.y_min &&
                py + 0.5 < r.y_max) {
              ++covered;
              break;
            }
        }
      ann.occlusion_fraction[i] = total ? static_cast<double>(covered) / total : 0.0;
    }

    // Clamp and snap to the 8-bit grid.
    for (std::int64_t i = 0; i < img.numel(); ++i) {
      const float v = std::clamp(img[i], 0.0f, 1.0f);
      img[i] = std::round(v * 255.0f) / 255.0f;
    }

    Frame f;
    f.pixels = std::move(img);
    f.index = t;
    frames.push_back(std::move(f));
    ann.check_consistent();
    annotations.push_back(std::move(ann));
  }
  return {std::move(frames), std::move(annotations)};
}

}  // namespace stf
