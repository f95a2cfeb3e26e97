#pragma once

#include <algorithm>
#include <array>
#include <compare>

namespace manipshield {

// Axis-aligned box in normalized image coordinates.
struct Box {
  double x0 = 0.0;
  double y0 = 0.0;
  double x1 = 0.0;
  double y1 = 0.0;

  bool is_canonical() const { return x0 <= x1 && y0 <= y1; }

  Box canonical() const {
    return {std::min(x0, x1), std::min(y0, y1), std::max(x0, x1), std::max(y0, y1)};
  }

  double area() const { return (x1 - x0) * (y1 - y0); }

  std::array<double, 4> coords() const { return {x0, y0, x1, y1}; }

  friend bool operator==(const Box&, const Box&) = default;
  friend auto operator<=>(const Box&, const Box&) = default;
};

// Intersection over union; non-canonical inputs are canonicalized first and a
// zero union gives 0.
inline double box_iou(const Box& a_in, const Box& b_in) {
  const Box a = a_in.canonical();
  const Box b = b_in.canonical();
  const double iw = std::max(0.0, std::min(a.x1, b.x1) - std::max(a.x0, b.x0));
  const double ih = std::max(0.0, std::min(a.y1, b.y1) - std::max(a.y0, b.y0));
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  if (!(uni > 0.0)) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

}  // namespace manipshield
