#pragma once

// RGB image formation: spherical-Gaussian specular basis, outgoing radiance
// and the photometric / total training losses.

#include "shadowray/diffengine.hpp"
#include "shadowray/geometry.hpp"

#include <array>
#include <optional>
#include <span>
#include <string>

namespace shadowray::shading {

using ad::Matrix;
using ad::Var;

inline constexpr int kBases = 9;
inline constexpr int kChannels = 3;

/// Shininess of the basis lobes: log-spaced from 1 to 512.
const std::array<double, kBases>& shininess();

/// exp(kappa ((h . n) - 1)).
double sg_basis(double kappa, const Vec3& h, const Vec3& n);

/// Unit bisector of l and -v; empty when l = v.
std::optional<Vec3> half_vector(const Vec3& l, const Vec3& v);

/// rho_s[c] = sum_k y[c * 9 + k] D_k(h, n).
Vec3 specular(const Eigen::Matrix<double, 27, 1>& y, const Vec3& h, const Vec3& n);

struct ShadingSample {
  Vec3 n = Vec3::UnitZ();
  Vec3 v = -Vec3::UnitZ();  // camera ray direction
  Vec3 l = Vec3::UnitZ();
  Vec3 albedo = Vec3::Zero();
  Eigen::Matrix<double, 27, 1> y = Eigen::Matrix<double, 27, 1>::Zero();
  double c_in = 1.0;  // includes the light intensity
};

/// (rho_d + rho_s) C_in max(l . n, 0), linear colour.
Vec3 render_outgoing(const ShadingSample& s);

/// Batched, differentiable form; rows are samples. n, l: n x 3 unit; v: n x 3
/// constant; albedo n x 3; y n x 27; c_in n x 1. Rows with l = v get no
/// specular term.
Var render_outgoing(Var n, Var l, const Matrix& v, Var albedo, Var y, Var c_in);

/// Sum over channels of |C - I|, averaged over the rows.
Var rgb_loss(Var c, const Matrix& target);
double rgb_loss(const Vec3& c, const Vec3& target);

enum class Supervision { Shadow, Rgb };

Supervision supervision_from_string(const std::string& s);
std::string to_string(Supervision s);

/// Throws std::invalid_argument unless every entry equals mode.
void require_uniform_supervision(std::span<const Supervision> batch, Supervision mode);

/// photometric + eikonal_weight * eikonal (+ pin_weight * pin when given).
Var total_loss(Var photometric, Var eikonal, double eikonal_weight, Var pin = {}, double pin_weight = 0.0);

}  // namespace shadowray::shading
