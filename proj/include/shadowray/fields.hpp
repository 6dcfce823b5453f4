#pragma once

// Signed distance fields: the neural SDF and material networks, analytic
// primitives used as oracles, normals and the Eikonal regulariser.

#include "shadowray/diffengine.hpp"
#include "shadowray/geometry.hpp"

#include <json.hpp>

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace shadowray::fields {

using ad::Matrix;
using ad::Var;

// ---- parameters -------------------------------------------------------------

struct ParamBlock {
  std::string name;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  Eigen::Index offset = 0;

  [[nodiscard]] Eigen::Index size() const { return rows * cols; }
};

/// Flat parameter vector with a named block layout. Blocks are stored
/// column-major so a block maps directly onto an Eigen matrix.
class FieldParameters {
 public:
  int add_block(std::string name, Eigen::Index rows, Eigen::Index cols);

  [[nodiscard]] const std::vector<ParamBlock>& layout() const { return layout_; }
  [[nodiscard]] Eigen::Index size() const { return values_.size(); }
  [[nodiscard]] Eigen::VectorXd& values() { return values_; }
  [[nodiscard]] const Eigen::VectorXd& values() const { return values_; }
  [[nodiscard]] int find(const std::string& name) const;

  [[nodiscard]] Eigen::Map<Matrix> block(int i);
  [[nodiscard]] Eigen::Map<const Matrix> block(int i) const;

  [[nodiscard]] bool same_layout(const FieldParameters& other) const;

 private:
  std::vector<ParamBlock> layout_;
  Eigen::VectorXd values_;
};

/// Parameter blocks placed on a tape, either as gradient-receiving leaves
/// or as constants.
class ParamBinding {
 public:
  ParamBinding(ad::Tape& tape, const FieldParameters& params, bool trainable);

  [[nodiscard]] ad::Tape& tape() const { return *tape_; }
  [[nodiscard]] Var block(int i) const { return vars_.at(static_cast<std::size_t>(i)); }
  [[nodiscard]] std::span<const Var> vars() const { return vars_; }
  [[nodiscard]] const FieldParameters& params() const { return *params_; }

  /// Runs the numeric backward pass and flattens the result into the layout.
  [[nodiscard]] Eigen::VectorXd gradient(Var loss) const;

 private:
  ad::Tape* tape_;
  const FieldParameters* params_;
  std::vector<Var> vars_;
};

// ---- encoding ---------------------------------------------------------------

/// [p, sin(2^0 pi p), cos(2^0 pi p), ..., sin(2^(F-1) pi p), cos(2^(F-1) pi p)]
Matrix positional_encode(const Matrix& points, int frequencies);
Var positional_encode(Var points, int frequencies);
inline int encoded_size(int frequencies) { return 3 + 6 * frequencies; }

// ---- field interface --------------------------------------------------------

class DegenerateNormal : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Anything that evaluates a signed distance at a batch of points (n x 3).
class SdfField {
 public:
  virtual ~SdfField() = default;

  [[nodiscard]] virtual Eigen::VectorXd eval(const Matrix& points) const = 0;
  /// Differentiable evaluation, n x 1. binding may be null when the field
  /// carries no parameters of interest.
  [[nodiscard]] virtual Var eval(const ParamBinding* binding, Var points) const = 0;

  [[nodiscard]] double eval(const Vec3& p) const;
  /// Spatial gradient, n x 3; optionally also returns the values. The default
  /// goes through a tape.
  [[nodiscard]] virtual Matrix gradient(const Matrix& points, Eigen::VectorXd* values = nullptr) const;
  [[nodiscard]] Vec3 gradient(const Vec3& p, double* value = nullptr) const;
};

// ---- analytic primitives ----------------------------------------------------

class AnalyticSdf final : public SdfField {
 public:
  enum class Kind { Sphere, Plane, Box, Union };

  static AnalyticSdf sphere(const Vec3& center, double radius);
  /// Plane n . p = offset, positive on the side n points to.
  static AnalyticSdf plane(const Vec3& normal, double offset);
  static AnalyticSdf box(const Vec3& center, const Vec3& half_extents);
  static AnalyticSdf make_union(std::vector<AnalyticSdf> children);

  [[nodiscard]] Kind kind() const { return kind_; }
  [[nodiscard]] const Vec3& center() const { return center_; }
  [[nodiscard]] double radius() const { return radius_; }
  [[nodiscard]] const Vec3& normal() const { return normal_; }
  [[nodiscard]] double offset() const { return offset_; }
  [[nodiscard]] const Vec3& half_extents() const { return half_; }
  [[nodiscard]] const std::vector<AnalyticSdf>& children() const { return children_; }

  using SdfField::eval;
  [[nodiscard]] double distance(const Vec3& p) const;
  [[nodiscard]] Eigen::VectorXd eval(const Matrix& points) const override;
  [[nodiscard]] Var eval(const ParamBinding* binding, Var points) const override;

  [[nodiscard]] nlohmann::json to_json() const;
  static AnalyticSdf from_json(const nlohmann::json& j);

 private:
  Kind kind_ = Kind::Sphere;
  Vec3 center_ = Vec3::Zero();
  double radius_ = 1.0;
  Vec3 normal_ = Vec3::UnitZ();
  double offset_ = 0.0;
  Vec3 half_ = Vec3::Ones();
  std::vector<AnalyticSdf> children_;
};

/// Known ground: the plane n . p = offset, optionally with a per-pixel depth
/// raster for non-planar grounds (NaN where the ground is not seen).
struct GroundPlane {
  Vec3 normal = Vec3::UnitZ();
  double offset = 0.0;
  std::optional<Matrix> depth;  // H x W camera-ray t values

  [[nodiscard]] double distance(const Vec3& p) const { return normal.dot(p) - offset; }
  /// t of the ray/plane hit, if in front of the origin.
  [[nodiscard]] std::optional<double> intersect(const Vec3& origin, const Vec3& dir) const;
  void validate() const;
};

// ---- networks ---------------------------------------------------------------

struct SdfNetworkConfig {
  int depth = 8;
  int width = 256;
  int frequencies = 6;
  int feature_size = 256;
  double beta = 100.0;
  double init_radius = 0.5;
  double init_log_sharpness = 0.3;  // s = exp(10 * v)

  [[nodiscard]] nlohmann::json to_json() const;
  static SdfNetworkConfig from_json(const nlohmann::json& j);
};

struct MaterialNetworkConfig {
  int depth = 4;
  int width = 256;

  [[nodiscard]] nlohmann::json to_json() const;
  static MaterialNetworkConfig from_json(const nlohmann::json& j);
};

/// Geometry MLP: positional encoding, softplus hidden layers with a skip
/// connection at depth / 2, output (signed distance, feature vector).
class SdfNetwork {
 public:
  SdfNetwork(const SdfNetworkConfig& config, FieldParameters& params);

  [[nodiscard]] const SdfNetworkConfig& config() const { return config_; }
  [[nodiscard]] int skip_layer() const { return skip_; }

  /// Sphere-like geometric initialisation of radius config.init_radius.
  void initialize(FieldParameters& params, std::mt19937_64& rng) const;

  struct Output {
    Var sdf;      // n x 1
    Var feature;  // n x feature_size, invalid when not requested
  };
  [[nodiscard]] Output forward(const ParamBinding& binding, Var points, bool with_feature) const;
  [[nodiscard]] Eigen::VectorXd sdf(const FieldParameters& params, const Matrix& points) const;
  /// Tape-free spatial gradient of the sdf output (hand-written backprop).
  [[nodiscard]] Matrix sdf_gradient(const FieldParameters& params, const Matrix& points,
                                    Eigen::VectorXd* values) const;

  [[nodiscard]] Var sharpness(const ParamBinding& binding) const;
  [[nodiscard]] double sharpness(const FieldParameters& params) const;
  [[nodiscard]] int sharpness_block() const { return log_s_; }

 private:
  SdfNetworkConfig config_;
  int skip_ = -1;
  std::vector<int> weights_;
  std::vector<int> biases_;
  int out_w_ = -1;
  int out_b_ = -1;
  int log_s_ = -1;
};

/// Material MLP: (position, normal, feature) -> (diffuse albedo, 27 specular
/// coefficients), ReLU hidden layers and softplus(beta = 100) outputs.
class MaterialNetwork {
 public:
  static constexpr int kSpecularCoefficients = 27;

  MaterialNetwork(const MaterialNetworkConfig& config, int feature_size, FieldParameters& params);

  void initialize(FieldParameters& params, std::mt19937_64& rng) const;

  struct Output {
    Var albedo;    // n x 3
    Var specular;  // n x 27, laid out [channel][basis]
  };
  [[nodiscard]] Output forward(const ParamBinding& binding, Var points, Var normals,
                               Var features) const;

  [[nodiscard]] int output_weight_block() const { return weights_.back(); }
  [[nodiscard]] int output_bias_block() const { return biases_.back(); }

 private:
  MaterialNetworkConfig config_;
  int feature_size_;
  std::vector<int> weights_;
  std::vector<int> biases_;
};

/// SdfField view of a network with a particular parameter vector.
class NeuralSdf final : public SdfField {
 public:
  NeuralSdf(const SdfNetwork& net, const FieldParameters& params) : net_(&net), params_(&params) {}

  using SdfField::eval;
  [[nodiscard]] Eigen::VectorXd eval(const Matrix& points) const override;
  [[nodiscard]] Var eval(const ParamBinding* binding, Var points) const override;
  using SdfField::gradient;
  [[nodiscard]] Matrix gradient(const Matrix& points, Eigen::VectorXd* values = nullptr) const override;

  [[nodiscard]] const SdfNetwork& network() const { return *net_; }
  [[nodiscard]] const FieldParameters& params() const { return *params_; }

 private:
  const SdfNetwork* net_;
  const FieldParameters* params_;
};

/// min(object, ground plane): the known planar ground composited with a field.
class GroundComposite final : public SdfField {
 public:
  GroundComposite(const SdfField& object, const GroundPlane& ground)
      : object_(&object), ground_(&ground) {}

  using SdfField::eval;
  [[nodiscard]] Eigen::VectorXd eval(const Matrix& points) const override;
  [[nodiscard]] Var eval(const ParamBinding* binding, Var points) const override;

  [[nodiscard]] const SdfField& object() const { return *object_; }
  [[nodiscard]] const GroundPlane& ground() const { return *ground_; }

 private:
  const SdfField* object_;
  const GroundPlane* ground_;
};

// ---- differential quantities --------------------------------------------------

struct NormalResult {
  Var unit;      // n x 3
  Var gradient;  // n x 3, raw grad f
};

/// Normals at points (a differentiable var); the gradient graph is recorded
/// so the result stays differentiable in the parameters.
/// Throws DegenerateNormal when |grad f| <= 1e-8 and strict is set.
NormalResult normal(const SdfField& field, const ParamBinding* binding, Var points,
                    bool strict = true);

/// Plain unit normals at points.
Matrix normal(const SdfField& field, const Matrix& points);

/// mean over points of (|grad f| - 1)^2.
Var eikonal_loss(const SdfField& field, const ParamBinding* binding, const Matrix& points);

// ---- parameter files ------------------------------------------------------------

/// Versioned binary container: a JSON header describing the layout and named
/// arrays, followed by the arrays as little-endian float64.
struct ParameterFile {
  nlohmann::json header;
  FieldParameters params;
  std::vector<std::pair<std::string, Eigen::VectorXd>> extra;
};

inline constexpr std::uint32_t kParameterFileVersion = 1;

void save_parameter_file(const std::string& path, const ParameterFile& file);
ParameterFile load_parameter_file(const std::string& path);

}  // namespace shadowray::fields
