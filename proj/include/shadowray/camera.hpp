#pragma once

#include "shadowray/geometry.hpp"

#include <json.hpp>

#include <Eigen/Core>

namespace shadowray {

using Mat3 = Eigen::Matrix3d;

/// Pinhole camera, OpenCV convention: x_cam = R x_world + t, +z forward,
/// pixel (u, v) = (fx x/z + cx, fy y/z + cy). Pixel (i, j) covers
/// [i, i+1) x [j, j+1); its centre is (i + 0.5, j + 0.5).
struct CameraModel {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 1;
  int height = 1;
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static CameraModel look_at(const Vec3& eye, const Vec3& target, const Vec3& up,
                             double half_fov_y, int width, int height);

  void validate() const;

  [[nodiscard]] Vec3 center() const { return -rotation.transpose() * translation; }
  /// Unit world-space direction through continuous pixel coordinates (u, v).
  [[nodiscard]] Vec3 direction(double u, double v) const;
  [[nodiscard]] Vec3 pixel_direction(int i, int j) const { return direction(i + 0.5, j + 0.5); }
  [[nodiscard]] Vec3 to_camera(const Vec3& x) const { return rotation * x + translation; }
  /// Image coordinates of a world point (assumed in front of the camera).
  [[nodiscard]] Vec2 project(const Vec3& x) const;
  /// Angle subtended by one pixel at the image centre.
  [[nodiscard]] double pixel_angle() const { return 1.0 / fx; }

  /// The same camera at 1/factor resolution (intrinsics rescaled).
  [[nodiscard]] CameraModel downscaled(int factor) const;

  [[nodiscard]] nlohmann::json to_json() const;
  static CameraModel from_json(const nlohmann::json& j);
};

}  // namespace shadowray
