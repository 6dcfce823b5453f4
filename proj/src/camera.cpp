#include "shadowray/camera.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace shadowray {

CameraModel CameraModel::look_at(const Vec3& eye, const Vec3& target, const Vec3& up,
                                 double half_fov_y, int width, int height) {
  const Vec3 z = (target - eye).normalized();
  const Vec3 x = z.cross(up).normalized();
  const Vec3 y = z.cross(x);  // image y points down
  CameraModel c;
  c.rotation.row(0) = x.transpose();
  c.rotation.row(1) = y.transpose();
  c.rotation.row(2) = z.transpose();
  c.translation = -c.rotation * eye;
  c.width = width;
  c.height = height;
  c.fy = 0.5 * height / std::tan(half_fov_y);
  c.fx = c.fy;
  c.cx = 0.5 * width;
  c.cy = 0.5 * height;
  return c;
}

void CameraModel::validate() const {
  if (!(fx > 0.0) || !(fy > 0.0)) throw std::invalid_argument("camera: fx and fy must be positive");
  if (width < 1 || height < 1) throw std::invalid_argument("camera: resolution must be positive");
  const double err = (rotation.transpose() * rotation - Mat3::Identity()).norm();
  if (!(err < 1e-6))
    throw std::invalid_argument("camera: rotation is not orthonormal (|R^T R - I| = " +
                                std::to_string(err) + ")");
  if (!translation.allFinite()) throw std::invalid_argument("camera: translation is not finite");
}

Vec3 CameraModel::direction(double u, double v) const {
  const Vec3 d((u - cx) / fx, (v - cy) / fy, 1.0);
  return (rotation.transpose() * d).normalized();
}

Vec2 CameraModel::project(const Vec3& x) const {
  const Vec3 c = to_camera(x);
  return {fx * c.x() / c.z() + cx, fy * c.y() / c.z() + cy};
}

CameraModel CameraModel::downscaled(int factor) const {
  if (factor < 1 || width % factor != 0 || height % factor != 0)
    throw std::invalid_argument("camera: resolution not divisible by " + std::to_string(factor));
  CameraModel c = *this;
  c.fx /= factor;
  c.fy /= factor;
  c.cx /= factor;
  c.cy /= factor;
  c.width /= factor;
  c.height /= factor;
  return c;
}

nlohmann::json CameraModel::to_json() const {
  nlohmann::json r = nlohmann::json::array();
  for (int i = 0; i < 3; ++i) r.push_back({rotation(i, 0), rotation(i, 1), rotation(i, 2)});
  return {{"fx", fx},
          {"fy", fy},
          {"cx", cx},
          {"cy", cy},
          {"width", width},
          {"height", height},
          {"rotation", r},
          {"translation", {translation.x(), translation.y(), translation.z()}}};
}

CameraModel CameraModel::from_json(const nlohmann::json& j) {
  CameraModel c;
  auto need = [&](const char* k) -> const nlohmann::json& {
    if (!j.contains(k)) throw std::invalid_argument(std::string("camera: missing field '") + k + "'");
    return j.at(k);
  };
  c.fx = need("fx").get<double>();
  c.fy = need("fy").get<double>();
  c.cx = need("cx").get<double>();
  c.cy = need("cy").get<double>();
  c.width = need("width").get<int>();
  c.height = need("height").get<int>();
  const auto& r = need("rotation");
  if (!r.is_array() || r.size() != 3) throw std::invalid_argument("camera: 'rotation' must be 3x3");
  for (int i = 0; i < 3; ++i) {
    if (!r[i].is_array() || r[i].size() != 3)
      throw std::invalid_argument("camera: 'rotation' must be 3x3");
    for (int k = 0; k < 3; ++k) c.rotation(i, k) = r[i][k].get<double>();
  }
  const auto& t = need("translation");
  if (!t.is_array() || t.size() != 3) throw std::invalid_argument("camera: 'translation' must be a 3-vector");
  c.translation = Vec3(t[0].get<double>(), t[1].get<double>(), t[2].get<double>());
  c.validate();
  return c;
}

}  // namespace shadowray
