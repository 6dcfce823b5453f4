#pragma once

// Shadow rays: light models, SDF-to-opacity, incoming radiance along a
// shadow ray with hierarchical sampling, and boundary aggregation.

#include "shadowray/fields.hpp"
#include "shadowray/raycast.hpp"

#include <json.hpp>

#include <vector>

namespace shadowray::shadow {

using fields::Matrix;
using fields::ParamBinding;
using fields::SdfField;
using fields::Var;

struct LightSource {
  enum class Kind { Directional, Point };
  Kind kind = Kind::Directional;
  Vec3 direction = Vec3::UnitZ();  // toward the light, unit (directional)
  Vec3 position = Vec3::Zero();    // point lights
  double intensity = 1.0;

  static LightSource directional(const Vec3& l, double intensity = 1.0);
  static LightSource point(const Vec3& q, double intensity);

  void validate() const;
  [[nodiscard]] nlohmann::json to_json() const;
  static LightSource from_json(const nlohmann::json& j);
};

struct LightSample {
  Vec3 l = Vec3::UnitZ();
  double L = 0.0;
};

/// Direction toward and intensity of the light at x. With falloff off a
/// point light keeps its stored intensity.
LightSample light_at(const LightSource& light, const Vec3& x, bool falloff = true);

/// Per-segment opacity max(1 - Phi_s(f_next) / Phi_s(f_i), 0), Phi_s the
/// logistic sigmoid with slope s.
double alpha_from_sdf(double f_i, double f_next, double s);

struct ShadowOptions {
  int uniform_samples = 80;
  int hierarchical_samples = 64;
  bool falloff = true;
  /// Segments with s * min(f_i, f_next) above this are treated as empty.
  double prune_sharp_distance = 27.0;
  /// Samples past the point where log transmittance falls below this are dropped.
  double prune_log_transmittance = -30.0;
};

/// Non-differentiable sampling plan for one shadow ray.
struct ShadowRayPlan {
  double far = 0.0;
  std::vector<double> t;  // ascending, t[0] = 0
  std::vector<int> segments;  // i such that segment (t[i], t[i+1]) is kept
};

/// Places samples along the shadow rays from origins (rows) for the current
/// field and sharpness: uniform on [0, far] plus one importance round on the
/// coarse opacities. far is the exit of the unit scene sphere.
std::vector<ShadowRayPlan> plan_shadow_rays(const SdfField& field, double sharpness, const Matrix& origins,
                                            const std::vector<const LightSource*>& lights,
                                            const ShadowOptions& options = {});

/// Differentiable incoming radiance C_in = L prod (1 - alpha_i), n x 1, at the
/// origins (rows, typically differentiable intersections) for the planned
/// samples. sharpness is 1 x 1.
Var incoming_radiance(ad::Tape& tape, const SdfField& field, const ParamBinding* binding, Var origins,
                      Var sharpness, const std::vector<const LightSource*>& lights,
                      const std::vector<ShadowRayPlan>& plans, const ShadowOptions& options = {});

/// Plain evaluation: plan plus radiance in one go.
Eigen::VectorXd incoming_radiance_value(const SdfField& field, double sharpness, const Matrix& origins,
                                        const std::vector<const LightSource*>& lights,
                                        const ShadowOptions& options = {});

/// w C_near + (1 - w) C_far, rows are boundary pixels.
Var aggregate_boundary(Var c_near, Var c_far, Var w);
double aggregate_boundary(double c_near, double c_far, double w);

/// Mean L1 shadow loss over the rows.
Var shadow_loss(Var c_in, const Matrix& target);

}  // namespace shadowray::shadow
