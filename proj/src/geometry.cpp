#include "ddpls/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <tuple>

namespace ddpls {

double wrap_half_pi(double theta) {
  if (theta >= -kHalfPi && theta < kHalfPi) return theta;
  double t = std::fmod(theta + kHalfPi, kPi);
  if (t < 0.0) t += kPi;
  double r = t - kHalfPi;
  if (r >= kHalfPi) r = -kHalfPi;
  if (r < -kHalfPi) r = -kHalfPi;
  return r;
}

OrientedBox normalized(OrientedBox box) {
  if (box.h > box.w) {
    std::swap(box.w, box.h);
    box.theta += kHalfPi;
  }
  box.theta = wrap_half_pi(box.theta);
  return box;
}

void validate(const OrientedBox& box) {
  if (!std::isfinite(box.cx) || !std::isfinite(box.cy) || !std::isfinite(box.theta)) {
    throw GeometryError("oriented box has non-finite center or angle");
  }
  if (!(box.w > kDegenerateTol) || !(box.h > kDegenerateTol) || !std::isfinite(box.w) ||
      !std::isfinite(box.h)) {
    throw GeometryError("degenerate oriented box: w=" + std::to_string(box.w) +
                        " h=" + std::to_string(box.h));
  }
}

std::array<Point, 4> corners(const OrientedBox& box) {
  const double c = std::cos(box.theta);
  const double s = std::sin(box.theta);
  const double hw = box.w / 2.0;
  const double hh = box.h / 2.0;
  auto at = [&](double a, double b) {
    return Point{box.cx + a * c - b * s, box.cy + a * s + b * c};
  };
  return {at(-hw, -hh), at(hw, -hh), at(hw, hh), at(-hw, hh)};
}

double signed_area(std::span<const Point> polygon) {
  const std::size_t n = polygon.size();
  if (n < 3) return 0.0;
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const Point& p = polygon[i];
    const Point& q = polygon[(i + 1) % n];
    acc += p.x * q.y - q.x * p.y;
  }
  return acc / 2.0;
}

namespace {

// > 0 when p lies left of the directed edge a->b.
double side(Point a, Point b, Point p) {
  return (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
}

Point segment_line_intersection(Point p, Point q, Point a, Point b) {
  const double sp = side(a, b, p);
  const double sq = side(a, b, q);
  const double t = sp / (sp - sq);
  return {p.x + t * (q.x - p.x), p.y + t * (q.y - p.y)};
}

}  // namespace

std::vector<Point> clip_convex(std::span<const Point> subject, std::span<const Point> clip) {
  std::vector<Point> output(subject.begin(), subject.end());
  const std::size_t m = clip.size();
  for (std::size_t e = 0; e < m && !output.empty(); ++e) {
    const Point a = clip[e];
    const Point b = clip[(e + 1) % m];
    std::vector<Point> input;
    input.swap(output);
    const std::size_t n = input.size();
    for (std::size_t i = 0; i < n; ++i) {
      const Point cur = input[i];
      const Point prev = input[(i + n - 1) % n];
      const bool cur_in = side(a, b, cur) >= 0.0;
      const bool prev_in = side(a, b, prev) >= 0.0;
      if (cur_in) {
        if (!prev_in) output.push_back(segment_line_intersection(prev, cur, a, b));
        output.push_back(cur);
      } else if (prev_in) {
        output.push_back(segment_line_intersection(prev, cur, a, b));
      }
    }
  }
  return output;
}

double intersection_area(const OrientedBox& a, const OrientedBox& b) {
  const auto pa = corners(a);
  const auto pb = corners(b);
  const auto clipped = clip_convex(pa, pb);
  const double area = signed_area(clipped);
  return area > kDegenerateTol ? area : 0.0;
}

double rotated_iou(const OrientedBox& a, const OrientedBox& b) {
  validate(a);
  validate(b);
  // Clip in a fixed argument order so the result is bitwise symmetric.
  const auto key = [](const OrientedBox& x) { return std::tie(x.cx, x.cy, x.w, x.h, x.theta); };
  const bool swap = key(b) < key(a);
  const OrientedBox& first = swap ? b : a;
  const OrientedBox& second = swap ? a : b;
  const double inter = intersection_area(first, second);
  if (inter <= 0.0) return 0.0;
  const double uni = first.w * first.h + second.w * second.h - inter;
  return std::clamp(inter / uni, 0.0, 1.0);
}

bool point_in_box(Point p, const OrientedBox& box) {
  constexpr double eps = 1e-9;
  const double dx = p.x - box.cx;
  const double dy = p.y - box.cy;
  const double c = std::cos(box.theta);
  const double s = std::sin(box.theta);
  const double u = dx * c + dy * s;
  const double v = -dx * s + dy * c;
  return std::abs(u) <= box.w / 2.0 + eps && std::abs(v) <= box.h / 2.0 + eps;
}

OrientedBox box_to_tile_frame(OrientedBox box, Point tile_origin) {
  box.cx -= tile_origin.x;
  box.cy -= tile_origin.y;
  return box;
}

OrientedBox tile_to_image_frame(OrientedBox box, Point tile_origin) {
  box.cx += tile_origin.x;
  box.cy += tile_origin.y;
  return box;
}

bool is_strictly_convex(std::span<const Point> polygon) {
  const std::size_t n = polygon.size();
  if (n < 3) return false;
  int sign = 0;
  double turning = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const Point a = polygon[i];
    const Point b = polygon[(i + 1) % n];
    const Point c = polygon[(i + 2) % n];
    const double cr = side(a, b, c);
    if (std::abs(cr) <= kDegenerateTol) return false;
    const int s = cr > 0 ? 1 : -1;
    if (sign == 0) sign = s;
    if (s != sign) return false;
    const double a1 = std::atan2(b.y - a.y, b.x - a.x);
    const double a2 = std::atan2(c.y - b.y, c.x - b.x);
    double d = a2 - a1;
    while (d <= -kPi) d += 2 * kPi;
    while (d > kPi) d -= 2 * kPi;
    turning += d;
  }
  // A star-shaped self-intersecting polygon turns the same way at every
  // vertex but winds more than once.
  return std::abs(std::abs(turning) - 2 * kPi) < 1e-6;
}

OrientedBox min_area_rect(std::span<const Point> polygon) {
  const std::size_t n = polygon.size();
  if (n < 3) throw GeometryError("min_area_rect needs at least 3 points");
  double best_area = std::numeric_limits<double>::infinity();
  OrientedBox best;
  for (std::size_t e = 0; e < n; ++e) {
    const Point a = polygon[e];
    const Point b = polygon[(e + 1) % n];
    const double len = std::hypot(b.x - a.x, b.y - a.y);
    if (len <= kDegenerateTol) continue;
    const double ux = (b.x - a.x) / len;
    const double uy = (b.y - a.y) / len;
    double umin = std::numeric_limits<double>::infinity();
    double umax = -umin;
    double vmin = umin;
    double vmax = -umin;
    for (const Point& p : polygon) {
      const double u = p.x * ux + p.y * uy;
      const double v = -p.x * uy + p.y * ux;
      umin = std::min(umin, u);
      umax = std::max(umax, u);
      vmin = std::min(vmin, v);
      vmax = std::max(vmax, v);
    }
    const double area = (umax - umin) * (vmax - vmin);
    if (area < best_area - 1e-12) {
      best_area = area;
      const double uc = (umin + umax) / 2.0;
      const double vc = (vmin + vmax) / 2.0;
      best.cx = uc * ux - vc * uy;
      best.cy = uc * uy + vc * ux;
      best.w = umax - umin;
      best.h = vmax - vmin;
      best.theta = std::atan2(uy, ux);
    }
  }
  if (!std::isfinite(best_area)) throw GeometryError("min_area_rect of degenerate polygon");
  return normalized(best);
}

}  // namespace ddpls
