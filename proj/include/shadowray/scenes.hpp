#pragma once

// Analytic test scenes, the brute-force oracle renderer, and datasets on
// disk (manifest + rasters).

#include "shadowray/camera.hpp"
#include "shadowray/fields.hpp"
#include "shadowray/image_io.hpp"
#include "shadowray/shading.hpp"
#include "shadowray/shadowrender.hpp"

#include <json.hpp>

#include <optional>
#include <string>
#include <vector>

namespace shadowray::scenes {

using fields::AnalyticSdf;
using fields::GroundPlane;
using shading::Supervision;
using shadow::LightSource;

using SpecularCoeffs = Eigen::Matrix<double, 27, 1>;

/// An analytic object standing on a ground, seen by one camera.
struct Scene {
  std::string name;
  AnalyticSdf object;
  GroundPlane ground;                      // calibrated base plane
  std::optional<AnalyticSdf> ground_shape;  // non-planar ground geometry
  Vec3 object_albedo = Vec3::Constant(0.7);
  Vec3 ground_albedo = Vec3::Constant(0.5);
  SpecularCoeffs object_specular = SpecularCoeffs::Zero();
  CameraModel camera;

  /// Object plus ground as one field.
  [[nodiscard]] AnalyticSdf full_sdf() const;
  [[nodiscard]] bool planar_ground() const { return !ground_shape.has_value(); }
};

std::vector<std::string> builtin_scene_names();
/// sphere-plane, two-spheres, box-plane or bumpy-ground at res x res.
Scene builtin_scene(const std::string& name, int resolution = 64);

// ---- oracle ------------------------------------------------------------------------

struct OracleHit {
  bool valid = false;
  bool object = false;  // false: ground
  double t = 0.0;
  Vec3 x = Vec3::Zero();
  Vec3 n = Vec3::UnitZ();
};

/// First intersection by 4096 uniform samples and bisection.
OracleHit oracle_trace(const Scene& scene, const Vec3& origin, const Vec3& dir);

/// Exact visibility of the light from a surface point (sphere tracing on the
/// exact analytic distance).
bool oracle_visible(const Scene& scene, const Vec3& x, const Vec3& n, const LightSource& light);

/// One ray through each pixel centre. Binary: sum over the lights of
/// intensity x visibility (lights of a binary image share an intensity of
/// 1 / count); rgb: outgoing radiance summed over the lights with hard
/// visibility. Misses are 0.
Raster oracle_render(const Scene& scene, const std::vector<LightSource>& lights, Supervision type);

/// Depth (t) and normals of the oracle's first hits, plus the foreground
/// (object) mask.
struct OracleGeometry {
  Raster depth;    // 1 channel, NaN on misses
  Raster normals;  // 3 channels
  Raster object;   // 1 where the object is hit
  Raster ground_depth;  // t of the ground alone, NaN where not hit
};
OracleGeometry oracle_geometry(const Scene& scene);

// ---- datasets ------------------------------------------------------------------------

struct DatasetImage {
  std::string file;
  std::vector<LightSource> lights;
  Raster raster;  // linear values
};

inline constexpr int kManifestVersion = 1;

struct SceneDataset {
  std::string scene;
  Supervision type = Supervision::Shadow;
  CameraModel camera;
  GroundPlane ground;
  bool falloff = true;
  std::vector<DatasetImage> images;
  nlohmann::json ground_truth;  // analytic scene description, evaluation only
};

struct GenerateOptions {
  std::string scene = "sphere-plane";
  int lights = 16;
  bool point_lights = false;
  double point_radius = 3.0;
  int lights_per_image = 1;
  Supervision type = Supervision::Shadow;
  int resolution = 64;
  std::uint64_t seed = 0;
};

/// Samples the lights, renders every image with the oracle and writes
/// dir/manifest.json and dir/images/*. Returns the dataset as written.
SceneDataset generate_dataset(const GenerateOptions& options, const std::string& dir);

/// Lights on the upper hemisphere: directions (uniform in solid angle) or
/// positions on a shell of the given radius with intensity radius^2, so the
/// scene centre receives L = 1.
std::vector<LightSource> sample_lights(int count, bool point, double radius, std::uint64_t seed);

SceneDataset load_dataset(const std::string& dir);

nlohmann::json scene_to_json(const Scene& scene);
Scene scene_from_json(const nlohmann::json& j);

}  // namespace shadowray::scenes
