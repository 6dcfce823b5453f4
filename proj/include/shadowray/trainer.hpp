#pragma once

// Optimisation loop: pixel batches, Adam, warmup + cosine schedule,
// coarse-to-fine pyramid, checkpoints.

#include "shadowray/fields.hpp"
#include "shadowray/raycast.hpp"
#include "shadowray/scenes.hpp"
#include "shadowray/shading.hpp"
#include "shadowray/shadowrender.hpp"

#include <json.hpp>

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace shadowray::trainer {

using fields::FieldParameters;
using fields::Matrix;
using fields::Var;
using scenes::SceneDataset;
using shading::Supervision;

struct TrainConfig {
  int iterations = 5000;
  int batch_images = 4;
  int pixels_per_image = 256;
  double lr_peak = 1e-3;
  int warmup_iters = 250;
  double lr_min = 5e-5;
  double photometric_weight = 1.0;
  double eikonal_weight = 0.1;
  int eikonal_samples = 512;
  double pin_weight = 1.0;  // ground pinning, non-planar grounds only
  /// Pyramid: 1/coarse_factor of the resolution for the first coarse_fraction
  /// of the run, then halving the factor after stages of doubling length.
  int coarse_factor = 8;
  double coarse_fraction = 0.1;
  double grad_clip = 10.0;
  std::uint64_t seed = 0;
  std::string precision = "f64";
  Supervision mode = Supervision::Shadow;

  // ablations
  bool boundary_sampling = true;
  bool differentiable_intersection = true;

  // sampling budgets
  int march_steps = 256;
  int shadow_uniform = 80;
  int shadow_hierarchical = 64;

  fields::SdfNetworkConfig sdf;
  fields::MaterialNetworkConfig material;

  void validate() const;
  [[nodiscard]] nlohmann::json to_json() const;
  /// Missing keys keep their defaults; unknown keys are rejected.
  static TrainConfig from_json(const nlohmann::json& j);
  /// FNV-1a of the canonical JSON.
  [[nodiscard]] std::uint64_t hash() const;
};

/// Linear warmup to lr_peak, then cosine decay to lr_min at `iterations`.
double lr_at(int step, const TrainConfig& config);

/// Downsampling factor of the pyramid level used at a step (a power of two
/// dividing the resolution).
int pyramid_factor(int step, const TrainConfig& config, int resolution);

// ---- model -----------------------------------------------------------------------------

/// Geometry network, optional material network and their shared parameters.
struct Model {
  FieldParameters params;
  fields::SdfNetwork sdf;
  std::optional<fields::MaterialNetwork> material;

  Model(const fields::SdfNetworkConfig& sdf_config, const std::optional<fields::MaterialNetworkConfig>& mat);

  void initialize(std::uint64_t seed);
};

Model make_model(const TrainConfig& config);

// ---- data ------------------------------------------------------------------------------

/// A dataset with its area-downsampled pyramid levels.
class TrainingData {
 public:
  explicit TrainingData(SceneDataset dataset);

  [[nodiscard]] const SceneDataset& dataset() const { return dataset_; }
  [[nodiscard]] int resolution() const { return dataset_.camera.width; }
  [[nodiscard]] const Raster& level(int image, int factor) const;
  [[nodiscard]] const CameraModel& camera(int factor) const;

 private:
  SceneDataset dataset_;
  mutable std::map<std::pair<int, int>, Raster> levels_;
  mutable std::map<int, CameraModel> cameras_;
};

struct PixelSample {
  int image = 0;
  Vec2i pixel = Vec2i::Zero();  // at the pyramid level
  Eigen::VectorXd target;       // 1 or 3 channels
};

/// batch_images distinct images (all when fewer) and pixels_per_image pixels
/// uniform over the level, with targets from the downsampled rasters.
std::vector<PixelSample> sample_batch(const TrainingData& data, std::mt19937_64& rng, int factor,
                                      int batch_images, int pixels_per_image);

// ---- losses ----------------------------------------------------------------------------

struct LossTerms {
  double total = 0.0;
  double photometric = 0.0;
  double eikonal = 0.0;
  double pin = 0.0;
  int boundary_pixels = 0;
};

/// Everything about a batch that is fixed before the tape is built: camera
/// traces, boundary sub-rays, shadow-ray sample plans and Eikonal points.
struct BatchPlan {
  int factor = 1;
  struct Pixel {
    int near = -1;  // surface point rows
    int far = -1;
    int boundary = -1;  // index into boundaries, -1 if none
    Eigen::VectorXd target;
  };
  std::vector<Pixel> pixels;
  Matrix points;             // surface points, N x 3
  Matrix dirs;               // camera ray directions, N x 3
  std::vector<char> object;  // row hit the object (not the ground)
  std::vector<raycast::BoundaryInfo> boundaries;
  // one shadow ray per (point, light)
  std::vector<int> ray_point;
  std::vector<const shadow::LightSource*> ray_light;
  std::vector<shadow::ShadowRayPlan> plans;
  Matrix eikonal;
};

BatchPlan plan_batch(const Model& model, const TrainingData& data, const std::vector<PixelSample>& batch,
                     int factor, const TrainConfig& config, std::mt19937_64& rng);

struct BatchLoss {
  Var total;
  LossTerms terms;
};

/// Photometric + Eikonal (+ pin) loss of a planned batch, recorded on the
/// binding's tape.
BatchLoss batch_loss(const fields::ParamBinding& binding, const Model& model, const TrainingData& data,
                     const BatchPlan& plan, const TrainConfig& config);

/// count points: half uniform in the unit ball, half jittered copies of the
/// given surface points (all uniform when there are none).
Matrix eikonal_points(std::mt19937_64& rng, int count, const Matrix& surface);

// ---- optimiser and checkpoints -------------------------------------------------------------

struct AdamState {
  Eigen::VectorXd m;
  Eigen::VectorXd v;
};

/// One Adam step (0.9, 0.999, 1e-8) with bias correction for step index t >= 1.
void adam_step(Eigen::VectorXd& theta, const Eigen::VectorXd& grad, AdamState& state, int t, double lr);

struct Checkpoint {
  TrainConfig config;
  Model model;
  AdamState adam;
  int step = 0;  // completed iterations
  std::string data_dir;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

class TrainingAborted : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LogRow {
  int step = 0;
  LossTerms terms;
  double lr = 0.0;
  double sharpness = 0.0;
  double grad_norm = 0.0;
  int factor = 1;
};

struct TrainOptions {
  std::string out_dir;                 // empty: no files
  std::optional<std::string> resume;   // checkpoint to continue from
  int stop_after = -1;                 // stop early at this step (< iterations)
  int checkpoint_every = 500;
  int log_every = 50;
  std::string data_dir;                // recorded in checkpoints
  std::function<void(const LogRow&)> on_log;
};

/// Runs (or continues) training and returns the final checkpoint. Writes
/// out_dir/checkpoint.bin and out_dir/metrics.csv; on a non-finite loss or
/// gradient writes out_dir/last_good.bin and throws TrainingAborted.
Checkpoint train(const TrainingData& data, const TrainConfig& config, const TrainOptions& options = {});

}  // namespace shadowray::trainer
