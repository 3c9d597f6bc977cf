#include "deeprhythm/geometry.hpp"

#include <algorithm>
#include <cmath>

namespace deeprhythm::geometry {
namespace {

double cross(Point2 o, Point2 a, Point2 b) {
    return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

}  // namespace

Polygon convex_hull(std::span<const Point2> input) {
    Polygon pts(input.begin(), input.end());
    std::sort(pts.begin(), pts.end(), [](Point2 a, Point2 b) {
        return a.x < b.x || (a.x == b.x && a.y < b.y);
    });
    pts.erase(std::unique(pts.begin(), pts.end(),
                          [](Point2 a, Point2 b) { return a.x == b.x && a.y == b.y; }),
              pts.end());
    if (pts.size() < 3) return pts;

    Polygon hull(2 * pts.size());
    std::size_t k = 0;
    for (const Point2& p : pts) {
        while (k >= 2 && cross(hull[k - 2], hull[k - 1], p) <= 0.0) --k;
        hull[k++] = p;
    }
    for (std::size_t i = pts.size() - 1, lower = k + 1; i-- > 0;) {
        while (k >= lower && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0.0) --k;
        hull[k++] = pts[i];
    }
    hull.resize(k - 1);
    return hull;
}

double signed_area(const Polygon& poly) {
    double acc = 0.0;
    for (std::size_t i = 0, n = poly.size(); i < n; ++i) {
        const Point2& a = poly[i];
        const Point2& b = poly[(i + 1) % n];
        acc += a.x * b.y - b.x * a.y;
    }
    return acc / 2.0;
}

bool contains(const Polygon& poly, Point2 p) {
    bool inside = false;
    for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
        const Point2& a = poly[i];
        const Point2& b = poly[j];
        if ((a.y > p.y) != (b.y > p.y)) {
            const double x_cross = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
            if (p.x < x_cross) inside = !inside;
        }
    }
    return inside;
}

Polygon face_contour(const Landmarks& points) {
    using namespace landmark_index;
    std::vector<Point2> outline;
    outline.insert(outline.end(), points.begin() + kJawBegin, points.begin() + kJawEnd);
    outline.insert(outline.end(), points.begin() + kForeheadBegin, points.begin() + kForeheadEnd);
    return convex_hull(outline);
}

Polygon right_eye(const Landmarks& points) {
    using namespace landmark_index;
    return Polygon(points.begin() + kRightEyeBegin, points.begin() + kRightEyeEnd);
}

Polygon left_eye(const Landmarks& points) {
    using namespace landmark_index;
    return Polygon(points.begin() + kLeftEyeBegin, points.begin() + kLeftEyeEnd);
}

Point2 centroid(const Polygon& poly) {
    const double area = signed_area(poly);
    if (std::abs(area) < 1e-12) {
        Point2 mean{};
        for (const Point2& p : poly) {
            mean.x += p.x;
            mean.y += p.y;
        }
        mean.x /= static_cast<double>(poly.size());
        mean.y /= static_cast<double>(poly.size());
        return mean;
    }
    double cx = 0.0, cy = 0.0;
    for (std::size_t i = 0, n = poly.size(); i < n; ++i) {
        const Point2& a = poly[i];
        const Point2& b = poly[(i + 1) % n];
        const double w = a.x * b.y - b.x * a.y;
        cx += (a.x + b.x) * w;
        cy += (a.y + b.y) * w;
    }
    return {cx / (6.0 * area), cy / (6.0 * area)};
}

}  // namespace deeprhythm::geometry
