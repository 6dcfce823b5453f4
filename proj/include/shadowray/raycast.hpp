#pragma once

// Camera rays against an SDF: uniform marching with secant refinement, the
// first-order differentiable intersection, and silhouette (boundary) pixels.

#include "shadowray/camera.hpp"
#include "shadowray/fields.hpp"

#include <optional>
#include <vector>

namespace shadowray::raycast {

using fields::Matrix;
using fields::ParamBinding;
using fields::SdfField;
using fields::Var;

struct MarchOptions {
  int steps = 256;
  int refine_iterations = 8;
  double tolerance = 1e-4;
};

struct Intersection {
  Vec3 x = Vec3::Zero();
  double t = 0.0;
  bool hit_ground = false;
  bool valid = false;

  [[nodiscard]] bool hit_object() const { return valid && !hit_ground; }
};

/// One camera ray to march.
struct RayQuery {
  Vec3 origin = Vec3::Zero();
  Vec3 dir = Vec3::UnitZ();
  std::optional<double> ground_t;  // known ground depth along the ray
  double ground_margin = 0.0;      // > 0 when the field itself contains the ground
};

/// March result plus the closest approach seen along the ray before the hit:
/// the smallest local minimum of f / t (distance over depth), used to spot
/// nearby silhouettes.
struct MarchTrace {
  Intersection hit;
  double graze = std::numeric_limits<double>::infinity();
  Vec3 graze_point = Vec3::Zero();
};

/// First + to - sign change of f over `steps` uniform samples inside the unit
/// scene sphere, refined by regula falsi (bisection fallback) to |f| < tol.
/// Rays with no crossing fall through to the ground.
std::vector<MarchTrace> march(const SdfField& field, const std::vector<RayQuery>& rays,
                              const MarchOptions& options = {});
Intersection ray_march(const SdfField& field, const RayQuery& ray, const MarchOptions& options = {});

/// Counts denominators clamped at |n . v| <= 1e-4.
long clamped_denominators();
void reset_clamped_denominators();

/// x_hat = x - v f(x) / (grad f(x) . v), rows are rays. Numerically equal to
/// x when f(x) = 0 but carries the parameter dependence of the surface.
Var differentiable_intersection(ad::Tape& tape, const SdfField& field, const ParamBinding* binding,
                                const Matrix& x, const Matrix& dirs);

// ---- camera-side context ---------------------------------------------------------

/// Everything needed to trace camera rays of one image.
struct RayContext {
  const SdfField* field = nullptr;
  const CameraModel* camera = nullptr;
  const fields::GroundPlane* ground = nullptr;
  MarchOptions options;
  double ground_margin = 0.02;  // only used with a ground depth raster

  [[nodiscard]] RayQuery query(double u, double v) const;
  [[nodiscard]] std::vector<MarchTrace> trace(const std::vector<Vec2>& pixels) const;
  [[nodiscard]] Intersection trace(double u, double v) const;
};

// ---- boundary pixels ------------------------------------------------------------

struct WalkOptions {
  double step = 2e-3;
  int max_steps = 16;
  double perpendicular = 0.01;
  double diverge = 1e-2;
  int bisection_steps = 6;
  /// Object-hit pixels facing the camera more than this are not probed at
  /// full resolution.
  double facing = 0.5;
};

struct SubRay {
  Vec2 pixel = Vec2::Zero();
  Vec3 dir = Vec3::UnitZ();
  Intersection hit;
};

struct BoundaryInfo {
  bool is_boundary = false;
  bool walked = false;            // the surface walk reached |n . v| < threshold
  SubRay near;
  SubRay far;
  Vec3 point = Vec3::Zero();      // boundary point on the near surface
  Vec2 image_normal = Vec2::Zero();  // unit, pointing from the near into the far region
  Vec2 pixel_center = Vec2::Zero();
};

/// Detects whether pixel (i, j) straddles a depth discontinuity. The centre
/// trace is the result of tracing the pixel centre.
BoundaryInfo detect_boundary(const RayContext& ctx, int i, int j, const MarchTrace& center,
                             const WalkOptions& options = {}, int level_factor = 1);

/// Batched detection; probe, bisection and sub-ray traces run as one batch
/// per stage.
std::vector<BoundaryInfo> detect_boundaries(const RayContext& ctx, const std::vector<Vec2i>& pixels,
                                            const std::vector<MarchTrace>& centers,
                                            const WalkOptions& options = {}, int level_factor = 1);

/// Fraction of the unit pixel box on the near side of the line through b
/// with normal m: the CDF of m . (p - c) for p uniform in the pixel.
double box_fraction(double s, const Vec2& m);

/// Differentiable near-area fraction w for boundary pixels (rows): the
/// boundary point is moved onto the current level set by one Newton step
/// on the tape, projected, and run through box_fraction.
Var area_ratio(ad::Tape& tape, const SdfField& field, const ParamBinding* binding,
               const CameraModel& camera, const std::vector<const BoundaryInfo*>& boundaries);

}  // namespace shadowray::raycast
