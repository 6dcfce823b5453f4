#pragma once

// Metrics, mesh extraction, relighting and the invisible-geometry check.

#include "shadowray/camera.hpp"
#include "shadowray/fields.hpp"
#include "shadowray/image_io.hpp"
#include "shadowray/raycast.hpp"
#include "shadowray/shadowrender.hpp"
#include "shadowray/trainer.hpp"

#include <optional>
#include <string>
#include <vector>

namespace shadowray::evaluate {

using fields::Matrix;

/// Camera-ray t per pixel; valid marks the foreground.
struct DepthMap {
  Raster t;      // 1 channel
  Raster valid;  // 1 where the value counts

  [[nodiscard]] int count() const;
};

struct GeometryRender {
  DepthMap depth;  // foreground = object hits
  Raster normals;  // 3 channels, zero off the foreground
  Raster points;   // 3 channels, first hit incl. ground, NaN on misses
  Raster hit;      // 1 where any surface (object or ground) was hit
};

/// One ray per pixel centre against the object field (the ground is
/// handled by the context's ground).
GeometryRender render_depth_normal(const fields::SdfField& object, const CameraModel& camera,
                                   const fields::GroundPlane& ground, int march_steps = 256);

/// The same from the ground-truth oracle.
GeometryRender oracle_depth_normal(const scenes::Scene& scene);

struct DepthError {
  double aligned = 0.0;    // after the least-squares scale and offset
  double unaligned = 0.0;
  double scale = 1.0;
  double offset = 0.0;
  int count = 0;
};

/// Mean |t| error over the shared mask; throws on an empty mask.
DepthError depth_l1(const DepthMap& pred, const DepthMap& gt);

/// Mean angle in degrees between unit normals over mask.
double normal_mae(const Raster& pred, const Raster& gt, const Raster& mask);

// ---- meshes -----------------------------------------------------------------------------

struct Mesh {
  Matrix vertices;                        // V x 3
  Eigen::Matrix<int, Eigen::Dynamic, 3> triangles;  // F x 3
  Matrix normals;                         // V x 3

  [[nodiscard]] bool empty() const { return triangles.rows() == 0; }
};

/// Zero level set on a resolution^3 grid over [-1, 1]^3 (marching tetrahedra,
/// six per cell, shared vertices welded along grid edges).
Mesh extract_mesh(const fields::SdfField& field, int resolution);

void write_obj(const std::string& path, const Mesh& mesh);
Mesh read_obj(const std::string& path);

/// Unsigned distance from p to the nearest triangle.
double distance_to_mesh(const Mesh& mesh, const Vec3& p);

// ---- rendering with a trained model --------------------------------------------------------

struct RenderOptions {
  int march_steps = 256;
  shadow::ShadowOptions shadow;
};

/// Full pipeline at pixel centres under the given lights: C_in (shadow
/// mode, 1 channel) or outgoing radiance (rgb mode, 3 channels).
Raster render_image(const trainer::Model& model, const CameraModel& camera, const fields::GroundPlane& ground,
                    const std::vector<shadow::LightSource>& lights, bool rgb, const RenderOptions& options = {});

/// rgb render under a novel light.
Raster relight(const trainer::Model& model, const CameraModel& camera, const fields::GroundPlane& ground,
               const shadow::LightSource& light, const RenderOptions& options = {});

/// Diffuse albedo predicted at the first hits (3 channels), NaN on misses.
Raster render_albedo(const trainer::Model& model, const CameraModel& camera, const fields::GroundPlane& ground,
                     int march_steps = 256);

/// Pixels whose 3x3 neighbourhood agrees in every given mask (used to keep
/// silhouette and shadow edges out of image comparisons).
Raster interior_mask(const std::vector<const Raster*>& masks);

/// Mean |a - b| over all channels of pixels where mask is set.
double masked_mean_abs(const Raster& a, const Raster& b, const Raster& mask);

// ---- invisible geometry ---------------------------------------------------------------------

struct Coverage {
  double fraction = 0.0;
  int occluded_samples = 0;
};

/// Samples the ground-truth object surface, keeps points the camera cannot
/// see (the scene, ground included, blocks the view) and reports the
/// fraction lying within tau of the mesh.
Coverage invisible_coverage(const Mesh& mesh, const scenes::Scene& truth, double tau, int samples = 2000,
                            std::uint64_t seed = 0);

// ---- full evaluation -----------------------------------------------------------------------

/// Fraction of masked pixels whose albedo is within rel_tol of truth in
/// every channel.
double albedo_fraction_within(const Raster& albedo, const Vec3& truth, const Raster& mask, double rel_tol);

struct EvalOptions {
  int march_steps = 256;
  int mesh_resolution = 128;  // 0: no mesh, no coverage
  double tau = 0.05;
  int coverage_samples = 2000;
  double albedo_tolerance = 0.15;
};

struct EvalReport {
  DepthError depth;
  double normal_mae = 0.0;
  double foreground_iou = 0.0;
  std::optional<Coverage> coverage;
  std::optional<double> albedo_within;  // rgb models only
  int mesh_vertices = 0;
  int mesh_triangles = 0;

  [[nodiscard]] nlohmann::json to_json() const;
};

/// Geometry against the dataset's analytic ground truth on its camera.
EvalReport evaluate_model(const trainer::Model& model, const scenes::SceneDataset& dataset,
                          const EvalOptions& options = {}, Mesh* mesh = nullptr);

/// Mean absolute error of an rgb render under `lights` against reference,
/// away from silhouettes and hard-shadow edges of the true scene.
double relight_error(const trainer::Model& model, const scenes::SceneDataset& dataset,
                     const std::vector<shadow::LightSource>& lights, const Raster& reference,
                     const RenderOptions& options = {});

// ---- gradient check -----------------------------------------------------------------------

struct GradientCheck {
  double max_relative_error = 0.0;
  int checked = 0;  // parameters compared
};

/// Analytic gradient of the total loss against central differences (one
/// Richardson step) on a three-pixel batch (object, ground and silhouette
/// pixel) of a small sphere-plane dataset written under scratch_dir.
GradientCheck gradient_check(shading::Supervision mode, std::uint64_t seed, const std::string& scratch_dir,
                             int stride = 3);

}  // namespace shadowray::evaluate
