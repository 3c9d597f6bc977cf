#pragma once

#include "deeprhythm/media_io.hpp"

#include <span>
#include <vector>

namespace deeprhythm::geometry {

using Polygon = std::vector<Point2>;

/// Andrew's monotone chain; counter-clockwise in a y-up frame, no repeated
/// endpoint. Collinear points are dropped.
Polygon convex_hull(std::span<const Point2> points);

double signed_area(const Polygon& poly);

/// Even-odd crossing test. Points exactly on an edge may land on either side.
bool contains(const Polygon& poly, Point2 p);

/// Face contour: convex hull of the jaw and forehead landmarks.
Polygon face_contour(const Landmarks& points);

/// Eye polygons in landmark order (36..41 and 42..47).
Polygon right_eye(const Landmarks& points);
Polygon left_eye(const Landmarks& points);

Point2 centroid(const Polygon& poly);

}  // namespace deeprhythm::geometry
