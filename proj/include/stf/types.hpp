#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace stf {

// Axis-aligned box in input-pixel units.
struct Box {
  double x_min = 0, y_min = 0, x_max = 0, y_max = 0;
  int class_id = 0;

  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  double area() const { return width() * height(); }
  double cx() const { return (x_min + x_max) / 2; }
  double cy() const { return (y_min + y_max) / 2; }

  void validate(int img_w, int img_h) const {
    if (!(x_min < x_max && y_min < y_max)) throw std::invalid_argument("box: degenerate extent");
    if (x_max <= 0 || y_max <= 0 || x_min >= img_w || y_min >= img_h)
      throw std::invalid_argument("box: does not intersect the image");
    if (class_id < 0) throw std::invalid_argument("box: negative class id");
  }
};

// Per-frame ground truth. occlusion_fraction and blur_magnitude are parallel
// to boxes (0 when not applicable).
struct Annotation {
  std::vector<Box> boxes;
  std::vector<double> occlusion_fraction;
  std::vector<double> blur_magnitude;

  void check_consistent() const {
    if (boxes.size() != occlusion_fraction.size() || boxes.size() != blur_magnitude.size())
      throw std::invalid_argument("annotation: per-box fields out of sync");
  }
};

struct Detection {
  Box box;
  double score = 0;
};

// Decoded detections for a batch of images, indexed per image.
struct DetectionSet {
  std::vector<std::vector<Detection>> per_image;
};

}  // namespace stf
