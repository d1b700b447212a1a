#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "stf/types.hpp"

namespace stf {

inline double iou(const Box& a, const Box& b) {
  const double ix = std::max(0.0, std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min));
  const double iy = std::max(0.0, std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min));
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

struct EvalConfig {
  double occlusion_threshold = 0.3;  // occluded slice: occlusion_fraction > this
  double blur_threshold = 2.0;       // blurred slice: blur_magnitude > this (pixels)
};

// All values in [0,1]; NaN marks an undefined bucket (no ground truth).
struct EvalReport {
  double map = std::numeric_limits<double>::quiet_NaN();
  double ap50 = std::numeric_limits<double>::quiet_NaN();
  double ap75 = std::numeric_limits<double>::quiet_NaN();
  double ap_small = std::numeric_limits<double>::quiet_NaN();
  double ap_medium = std::numeric_limits<double>::quiet_NaN();
  double ap_large = std::numeric_limits<double>::quiet_NaN();
  double ap_occluded = std::numeric_limits<double>::quiet_NaN();
  double ap_blurred = std::numeric_limits<double>::quiet_NaN();
  double ap_clear = std::numeric_limits<double>::quiet_NaN();
};

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j;
  auto put = [&](const char* key, double v) {
    if (!std::isnan(v)) j[key] = v;
  };
  put("mAP", r.map);
  put("AP50", r.ap50);
  put("AP75", r.ap75);
  put("AP_S", r.ap_small);
  put("AP_M", r.ap_medium);
  put("AP_L", r.ap_large);
  put("AP_occluded", r.ap_occluded);
  put("AP_blurred", r.ap_blurred);
  put("AP_clear", r.ap_clear);
  return j;
}

namespace eval_detail {

// active(gts[img], box_index): whether that ground-truth box counts for this
// evaluation. Inactive boxes still absorb otherwise-unmatched detections so
// out-of-slice objects do not create false positives.
inline std::optional<double> class_ap(
    const std::vector<std::vector<Detection>>& dets, const std::vector<Annotation>& gts,
    int class_id, double thr,
    const std::function<bool(const Annotation&, size_t)>& active) {
  struct DetRef {
    double score;
    size_t img, idx;
  };
  std::vector<DetRef> order;
  for (size_t img = 0; img < dets.size(); ++img)
    for (size_t i = 0; i < dets[img].size(); ++i)
      if (dets[img][i].box.class_id == class_id) order.push_back({dets[img][i].score, img, i});
  std::sort(order.begin(), order.end(), [](const DetRef& a, const DetRef& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.img != b.img) return a.img < b.img;
    return a.idx < b.idx;
  });

  int npos = 0;
  std::vector<std::vector<char>> used(gts.size());
  for (size_t img = 0; img < gts.size(); ++img) {
    used[img].assign(gts[img].boxes.size(), 0);
    for (size_t k = 0; k < gts[img].boxes.size(); ++k)
      if (gts[img].boxes[k].class_id == class_id && active(gts[img], k)) ++npos;
  }
  if (npos == 0) return std::nullopt;

  std::vector<char> is_tp;
  for (const DetRef& d : order) {
    const Box& db = dets[d.img][d.idx].box;
    int best = -1;
    double best_iou = 0;
    for (size_t k = 0; k < gts[d.img].boxes.size(); ++k) {
      const Box& gb = gts[d.img].boxes[k];
      if (gb.class_id != class_id || used[d.img][k] || !active(gts[d.img], k)) continue;
      const double v = iou(db, gb);
      if (v >= thr && v > best_iou) {
        best_iou = v;
        best = static_cast<int>(k);
      }
    }
    if (best >= 0) {
      used[d.img][static_cast<size_t>(best)] = 1;
      is_tp.push_back(1);
      continue;
    }
    // Ignore detections that only overlap inactive ground truth.
    bool ignored = false;
    for (size_t k = 0; k < gts[d.img].boxes.size(); ++k) {
      const Box& gb = gts[d.img].boxes[k];
      if (gb.class_id == class_id && !active(gts[d.img], k) && iou(db, gb) >= thr) {
        ignored = true;
        break;
      }
    }
    if (!ignored) is_tp.push_back(0);
  }

  // 101-point interpolated area under the precision-recall curve.
  std::vector<double> precision, recall;
  int tp = 0, fp = 0;
  for (char t : is_tp) {
    t ? ++tp : ++fp;
    precision.push_back(static_cast<double>(tp) / (tp + fp));
    recall.push_back(static_cast<double>(tp) / npos);
  }
  for (int i = static_cast<int>(precision.size()) - 2; i >= 0; --i)
    precision[static_cast<size_t>(i)] =
        std::max(precision[static_cast<size_t>(i)], precision[static_cast<size_t>(i) + 1]);
  double ap = 0;
  size_t j = 0;
  for (int r = 0; r <= 100; ++r) {
    const double rt = r / 100.0;
    while (j < recall.size() && recall[j] < rt) ++j;
    ap += (j < precision.size()) ? precision[j] : 0.0;
  }
  return ap / 101.0;
}

inline std::optional<double> mean_ap(
    const std::vector<std::vector<Detection>>& dets, const std::vector<Annotation>& gts,
    const std::vector<double>& thresholds,
    const std::function<bool(const Annotation&, size_t)>& active) {
  int max_class = -1;
  for (const Annotation& a : gts)
    for (const Box& b : a.boxes) max_class = std::max(max_class, b.class_id);
  double sum = 0;
  int count = 0;
  for (int c = 0; c <= max_class; ++c)
    for (double thr : thresholds) {
      auto ap = class_ap(dets, gts, c, thr, active);
      if (ap) {
        sum += *ap;
        ++count;
      }
    }
  if (count == 0) return std::nullopt;
  return sum / count;
}

}  // namespace eval_detail

// Single-class, single-threshold AP; every ground-truth box counts.
inline std::optional<double> average_precision(const std::vector<std::vector<Detection>>& dets,
                                               const std::vector<Annotation>& gts,
                                               double iou_threshold, int class_id) {
  return eval_detail::class_ap(dets, gts, class_id, iou_threshold,
                               [](const Annotation&, size_t) { return true; });
}

inline EvalReport evaluate(const std::vector<std::vector<Detection>>& dets,
                           const std::vector<Annotation>& gts, const EvalConfig& cfg = {}) {
  if (dets.size() != gts.size())
    throw std::invalid_argument("evaluate: detection/ground-truth image count mismatch");
  std::vector<double> coco_thresholds;
  for (int i = 0; i < 10; ++i) coco_thresholds.push_back(0.5 + 0.05 * i);

  auto all = [](const Annotation&, size_t) { return true; };
  auto opt = [](std::optional<double> v) {
    return v ? *v : std::numeric_limits<double>::quiet_NaN();
  };

  EvalReport r;
  r.map = opt(eval_detail::mean_ap(dets, gts, coco_thresholds, all));
  r.ap50 = opt(eval_detail::mean_ap(dets, gts, {0.5}, all));
  r.ap75 = opt(eval_detail::mean_ap(dets, gts, {0.75}, all));

  auto area_slice = [&](double lo, double hi) {
    return [lo, hi](const Annotation& a, size_t k) {
      const double area = a.boxes[k].area();
      return area >= lo && area < hi;
    };
  };
  r.ap_small = opt(eval_detail::mean_ap(dets, gts, coco_thresholds, area_slice(0, 32.0 * 32.0)));
  r.ap_medium =
      opt(eval_detail::mean_ap(dets, gts, coco_thresholds, area_slice(32.0 * 32.0, 96.0 * 96.0)));
  r.ap_large = opt(eval_detail::mean_ap(
      dets, gts, coco_thresholds, area_slice(96.0 * 96.0, std::numeric_limits<double>::max())));

  const double ot = cfg.occlusion_threshold, bt = cfg.blur_threshold;
  r.ap_occluded = opt(eval_detail::mean_ap(
      dets, gts, {0.5},
      [ot](const Annotation& a, size_t k) { return a.occlusion_fraction[k] > ot; }));
  r.ap_blurred = opt(eval_detail::mean_ap(
      dets, gts, {0.5}, [bt](const Annotation& a, size_t k) { return a.blur_magnitude[k] > bt; }));
  r.ap_clear = opt(eval_detail::mean_ap(dets, gts, {0.5}, [ot, bt](const Annotation& a, size_t k) {
    return a.occlusion_fraction[k] <= ot && a.blur_magnitude[k] <= bt;
  }));
  return r;
}

// Detection dump, one JSONL record per detection.
inline void write_detections(const std::string& path,
                             const std::vector<std::vector<Detection>>& dets) {
  std::ofstream out(path);
  for (size_t img = 0; img < dets.size(); ++img)
    for (const Detection& d : dets[img])
      out << nlohmann::json{{"image", img},
                            {"box", {d.box.x_min, d.box.y_min, d.box.x_max, d.box.y_max}},
                            {"score", d.score},
                            {"class_id", d.box.class_id}}
                 .dump()
          << "\n";
}

}  // namespace stf
