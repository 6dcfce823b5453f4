#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cmath>
#include <limits>
#include <optional>

namespace shadowray {

using Vec3 = Eigen::Vector3d;
using Vec2 = Eigen::Vector2d;
using Vec2i = Eigen::Vector2i;

struct Ray {
  Vec3 origin = Vec3::Zero();
  Vec3 dir = Vec3::UnitZ();  // unit length
  double near = 0.0;
  double far = 0.0;

  [[nodiscard]] Vec3 at(double t) const { return origin + t * dir; }
};

struct Interval {
  double t0 = 0.0;
  double t1 = 0.0;
};

/// Entry/exit parameters of a ray with the sphere |p - c| = r, if it hits.
inline std::optional<Interval> intersect_sphere(const Vec3& origin, const Vec3& dir,
                                                const Vec3& center, double radius) {
  const Vec3 oc = origin - center;
  const double b = oc.dot(dir);
  const double c = oc.squaredNorm() - radius * radius;
  const double disc = b * b - c;
  if (disc < 0.0) return std::nullopt;
  const double s = std::sqrt(disc);
  return Interval{-b - s, -b + s};
}

/// The scene lives inside the unit sphere at the origin.
inline std::optional<Interval> intersect_scene_bounds(const Vec3& origin, const Vec3& dir) {
  return intersect_sphere(origin, dir, Vec3::Zero(), 1.0);
}

/// Any vector orthogonal to n (unit input, unit output).
inline Vec3 any_orthogonal(const Vec3& n) {
  const Vec3 a = std::abs(n.x()) < 0.9 ? Vec3::UnitX() : Vec3::UnitY();
  return n.cross(a).normalized();
}

}  // namespace shadowray
