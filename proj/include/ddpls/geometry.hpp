#pragma once

#include <array>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ddpls {

inline constexpr double kPi = std::numbers::pi;
inline constexpr double kHalfPi = std::numbers::pi / 2.0;

/// Boxes with a side at or below this length are rejected as degenerate.
inline constexpr double kDegenerateTol = 1e-9;

class GeometryError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Point {
  double x = 0.0;
  double y = 0.0;
};

/// Rotated rectangle in image pixels. Canonical form uses the long-edge
/// convention: w >= h and theta in [-pi/2, pi/2).
struct OrientedBox {
  double cx = 0.0;
  double cy = 0.0;
  double w = 1.0;
  double h = 1.0;
  double theta = 0.0;
  int class_id = 0;
  double score = 1.0;

  friend bool operator==(const OrientedBox&, const OrientedBox&) = default;
};

/// Wraps an angle into [-pi/2, pi/2). Values already in range are returned
/// unchanged, so the wrap is idempotent bit-for-bit.
double wrap_half_pi(double theta);

/// Long-edge canonical form: swaps (w, h) and rotates by pi/2 when h > w,
/// then wraps theta. Idempotent.
OrientedBox normalized(OrientedBox box);

/// Throws GeometryError when a side is not finite or <= kDegenerateTol.
void validate(const OrientedBox& box);

/// Corners in counter-clockwise order (positive shoelace area).
std::array<Point, 4> corners(const OrientedBox& box);

/// Signed shoelace area; positive for counter-clockwise polygons.
double signed_area(std::span<const Point> polygon);

/// Sutherland-Hodgman clip of `subject` against a convex CCW `clip` polygon.
std::vector<Point> clip_convex(std::span<const Point> subject, std::span<const Point> clip);

double intersection_area(const OrientedBox& a, const OrientedBox& b);

/// area(a & b) / area(a | b). Throws GeometryError on degenerate boxes.
double rotated_iou(const OrientedBox& a, const OrientedBox& b);

/// Inside-or-on-boundary test in the box frame.
bool point_in_box(Point p, const OrientedBox& box);

OrientedBox box_to_tile_frame(OrientedBox box, Point tile_origin);
OrientedBox tile_to_image_frame(OrientedBox box, Point tile_origin);

/// Minimum-area enclosing rectangle of a convex polygon (rotating calipers
/// over the polygon's own edges). Returned box is normalized.
OrientedBox min_area_rect(std::span<const Point> convex_polygon);

/// True when the polygon is simple and strictly convex (either orientation).
bool is_strictly_convex(std::span<const Point> polygon);

}  // namespace ddpls
