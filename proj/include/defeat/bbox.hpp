#pragma once

#include <array>
#include <cmath>
#include <algorithm>

namespace defeat {

/// Axis-aligned box in pixel coordinates, origin top-left.
struct BBox {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }
  bool valid() const { return x2 > x1 && y2 > y1; }
  bool inside_image(double width_px, double height_px) const {
    return x1 >= 0 && y1 >= 0 && x2 <= width_px && y2 <= height_px;
  }
  friend bool operator==(const BBox&, const BBox&) = default;
};

inline double iou(const BBox& a, const BBox& b) {
  const double ix = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double iy = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (ix <= 0 || iy <= 0) return 0.0;
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

inline BBox clip_box(const BBox& b, double width_px, double height_px) {
  return {std::clamp(b.x1, 0.0, width_px), std::clamp(b.y1, 0.0, height_px),
          std::clamp(b.x2, 0.0, width_px), std::clamp(b.y2, 0.0, height_px)};
}

// Standard (dx, dy, dw, dh) parameterisation relative to a reference box.
inline constexpr double kMaxLogScale = 4.135166556742356;  // log(1000 / 16)

inline std::array<double, 4> encode_box(const BBox& ref, const BBox& target) {
  const double rw = ref.width(), rh = ref.height();
  return {(target.cx() - ref.cx()) / rw, (target.cy() - ref.cy()) / rh,
          std::log(target.width() / rw), std::log(target.height() / rh)};
}

inline BBox decode_box(const BBox& ref, const double* d) {
  const double rw = ref.width(), rh = ref.height();
  const double cx = ref.cx() + d[0] * rw;
  const double cy = ref.cy() + d[1] * rh;
  const double w = rw * std::exp(std::min(d[2], kMaxLogScale));
  const double h = rh * std::exp(std::min(d[3], kMaxLogScale));
  return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

}  // namespace defeat
