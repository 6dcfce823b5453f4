#include "shadowray/fields.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

namespace shadowray::fields {

using ad::Tape;

// ---- FieldParameters ----------------------------------------------------------

int FieldParameters::add_block(std::string name, Eigen::Index rows, Eigen::Index cols) {
  if (find(name) >= 0) throw std::invalid_argument("duplicate parameter block " + name);
  ParamBlock b{std::move(name), rows, cols, values_.size()};
  values_.conservativeResize(values_.size() + b.size());
  values_.tail(b.size()).setZero();
  layout_.push_back(std::move(b));
  return static_cast<int>(layout_.size()) - 1;
}

int FieldParameters::find(const std::string& name) const {
  for (std::size_t i = 0; i < layout_.size(); ++i)
    if (layout_[i].name == name) return static_cast<int>(i);
  return -1;
}

Eigen::Map<Matrix> FieldParameters::block(int i) {
  const ParamBlock& b = layout_.at(static_cast<std::size_t>(i));
  return {values_.data() + b.offset, b.rows, b.cols};
}

Eigen::Map<const Matrix> FieldParameters::block(int i) const {
  const ParamBlock& b = layout_.at(static_cast<std::size_t>(i));
  return {values_.data() + b.offset, b.rows, b.cols};
}

bool FieldParameters::same_layout(const FieldParameters& other) const {
  if (layout_.size() != other.layout_.size()) return false;
  for (std::size_t i = 0; i < layout_.size(); ++i) {
    const auto& a = layout_[i];
    const auto& b = other.layout_[i];
    if (a.name != b.name || a.rows != b.rows || a.cols != b.cols) return false;
  }
  return true;
}

ParamBinding::ParamBinding(Tape& tape, const FieldParameters& params, bool trainable)
    : tape_(&tape), params_(&params) {
  vars_.reserve(params.layout().size());
  for (std::size_t i = 0; i < params.layout().size(); ++i) {
    Matrix m = params.block(static_cast<int>(i));
    vars_.push_back(trainable ? tape.variable(std::move(m)) : tape.constant(std::move(m)));
  }
}

Eigen::VectorXd ParamBinding::gradient(Var loss) const {
  std::vector<Matrix> g = tape_->backward(loss, vars_);
  Eigen::VectorXd out = Eigen::VectorXd::Zero(params_->size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    const ParamBlock& b = params_->layout()[i];
    out.segment(b.offset, b.size()) = g[i].reshaped();
  }
  return out;
}

// ---- encoding -------------------------------------------------------------------

// Higher octaves come from the double-angle identities; only the base
// frequency calls sin/cos.
Matrix positional_encode(const Matrix& points, int frequencies) {
  Matrix out(points.rows(), encoded_size(frequencies));
  out.leftCols(3) = points;
  if (frequencies == 0) return out;
  const Eigen::ArrayXXd arg = points.array() * std::numbers::pi;
  Eigen::ArrayXXd sn = arg.sin();
  Eigen::ArrayXXd cs = arg.cos();
  for (int k = 0; k < frequencies; ++k) {
    out.middleCols(3 + 6 * k, 3) = sn.matrix();
    out.middleCols(6 + 6 * k, 3) = cs.matrix();
    if (k + 1 < frequencies) {
      Eigen::ArrayXXd s2 = 2.0 * sn * cs;
      cs = 1.0 - 2.0 * sn.square();
      sn = std::move(s2);
    }
  }
  return out;
}

Var positional_encode(Var points, int frequencies) {
  if (frequencies == 0) return points;
  std::vector<Var> parts{points};
  Var arg = ad::scale(points, std::numbers::pi);
  Var sn = ad::sin(arg);
  Var cs = ad::cos(arg);
  for (int k = 0; k < frequencies; ++k) {
    parts.push_back(sn);
    parts.push_back(cs);
    if (k + 1 < frequencies) {
      Var s2 = ad::scale(ad::mul(sn, cs), 2.0);
      cs = 1.0 - ad::scale(ad::square(sn), 2.0);
      sn = s2;
    }
  }
  return ad::concat_cols(parts);
}

// ---- SdfField -------------------------------------------------------------------

double SdfField::eval(const Vec3& p) const {
  Matrix m(1, 3);
  m.row(0) = p.transpose();
  return eval(m)(0);
}

Matrix SdfField::gradient(const Matrix& points, Eigen::VectorXd* values) const {
  Tape t;
  Var p = t.variable(points);
  Var f = eval(nullptr, p);
  if (values) *values = f.value().col(0);
  const Var wrt[] = {p};
  return t.backward(ad::sum(f), wrt)[0];
}

Vec3 SdfField::gradient(const Vec3& p, double* value) const {
  Matrix m(1, 3);
  m.row(0) = p.transpose();
  Eigen::VectorXd v;
  Matrix g = gradient(m, value ? &v : nullptr);
  if (value) *value = v(0);
  return g.row(0).transpose();
}

// ---- AnalyticSdf ----------------------------------------------------------------

AnalyticSdf AnalyticSdf::sphere(const Vec3& center, double radius) {
  if (!(radius > 0.0)) throw std::invalid_argument("sphere radius must be positive");
  AnalyticSdf s;
  s.kind_ = Kind::Sphere;
  s.center_ = center;
  s.radius_ = radius;
  return s;
}

AnalyticSdf AnalyticSdf::plane(const Vec3& normal, double offset) {
  if (std::abs(normal.norm() - 1.0) > 1e-9) throw std::invalid_argument("plane normal must be unit");
  AnalyticSdf s;
  s.kind_ = Kind::Plane;
  s.normal_ = normal;
  s.offset_ = offset;
  return s;
}

AnalyticSdf AnalyticSdf::box(const Vec3& center, const Vec3& half_extents) {
  if ((half_extents.array() <= 0.0).any()) throw std::invalid_argument("box extents must be positive");
  AnalyticSdf s;
  s.kind_ = Kind::Box;
  s.center_ = center;
  s.half_ = half_extents;
  return s;
}

AnalyticSdf AnalyticSdf::make_union(std::vector<AnalyticSdf> children) {
  if (children.empty()) throw std::invalid_argument("union needs at least one child");
  AnalyticSdf s;
  s.kind_ = Kind::Union;
  s.children_ = std::move(children);
  return s;
}

double AnalyticSdf::distance(const Vec3& p) const {
  switch (kind_) {
    case Kind::Sphere:
      return (p - center_).norm() - radius_;
    case Kind::Plane:
      return normal_.dot(p) - offset_;
    case Kind::Box: {
      const Vec3 q = (p - center_).cwiseAbs() - half_;
      return q.cwiseMax(0.0).norm() + std::min(q.maxCoeff(), 0.0);
    }
    case Kind::Union: {
      double d = std::numeric_limits<double>::infinity();
      for (const auto& c : children_) d = std::min(d, c.distance(p));
      return d;
    }
  }
  return 0.0;
}

Eigen::VectorXd AnalyticSdf::eval(const Matrix& points) const {
  Eigen::VectorXd out(points.rows());
  switch (kind_) {
    case Kind::Sphere:
      out = (points.rowwise() - center_.transpose()).rowwise().norm().array() - radius_;
      return out;
    case Kind::Plane:
      out = (points * normal_).array() - offset_;
      return out;
    default:
      for (Eigen::Index i = 0; i < points.rows(); ++i) out(i) = distance(points.row(i).transpose());
      return out;
  }
}

Var AnalyticSdf::eval(const ParamBinding*, Var points) const {
  Tape& t = points.tape();
  switch (kind_) {
    case Kind::Sphere: {
      Var d = points - t.constant(Matrix(center_.transpose()));
      return ad::norm_rows(d) - radius_;
    }
    case Kind::Plane:
      return ad::matmul(points, t.constant(Matrix(normal_))) - offset_;
    case Kind::Box: {
      Var q = ad::abs(points - t.constant(Matrix(center_.transpose()))) -
              t.constant(Matrix(half_.transpose()));
      Var zero = t.constant(0.0);
      Var outside = ad::sqrt(ad::sum_cols(ad::square(ad::maximum(q, zero))) + 1e-24);
      Var qmax = ad::maximum(ad::maximum(ad::slice_cols(q, 0, 1), ad::slice_cols(q, 1, 1)),
                             ad::slice_cols(q, 2, 1));
      return outside + ad::minimum(qmax, zero);
    }
    case Kind::Union: {
      Var d = children_.front().eval(nullptr, points);
      for (std::size_t i = 1; i < children_.size(); ++i)
        d = ad::minimum(d, children_[i].eval(nullptr, points));
      return d;
    }
  }
  throw std::logic_error("unknown analytic kind");
}

namespace {
nlohmann::json vec_json(const Vec3& v) { return {v.x(), v.y(), v.z()}; }
Vec3 json_vec(const nlohmann::json& j, const char* field) {
  if (!j.contains(field) || !j.at(field).is_array() || j.at(field).size() != 3)
    throw std::invalid_argument(std::string("field '") + field + "' must be a 3-vector");
  return {j.at(field)[0].get<double>(), j.at(field)[1].get<double>(), j.at(field)[2].get<double>()};
}
}  // namespace

nlohmann::json AnalyticSdf::to_json() const {
  switch (kind_) {
    case Kind::Sphere:
      return {{"type", "sphere"}, {"center", vec_json(center_)}, {"radius", radius_}};
    case Kind::Plane:
      return {{"type", "plane"}, {"normal", vec_json(normal_)}, {"offset", offset_}};
    case Kind::Box:
      return {{"type", "box"}, {"center", vec_json(center_)}, {"half_extents", vec_json(half_)}};
    case Kind::Union: {
      nlohmann::json kids = nlohmann::json::array();
      for (const auto& c : children_) kids.push_back(c.to_json());
      return {{"type", "union"}, {"children", kids}};
    }
  }
  return {};
}

AnalyticSdf AnalyticSdf::from_json(const nlohmann::json& j) {
  const std::string type = j.at("type").get<std::string>();
  if (type == "sphere") return sphere(json_vec(j, "center"), j.at("radius").get<double>());
  if (type == "plane") return plane(json_vec(j, "normal"), j.at("offset").get<double>());
  if (type == "box") return box(json_vec(j, "center"), json_vec(j, "half_extents"));
  if (type == "union") {
    std::vector<AnalyticSdf> kids;
    for (const auto& c : j.at("children")) kids.push_back(from_json(c));
    return make_union(std::move(kids));
  }
  throw std::invalid_argument("unknown analytic sdf type '" + type + "'");
}

// ---- GroundPlane ------------------------------------------------------------------

std::optional<double> GroundPlane::intersect(const Vec3& origin, const Vec3& dir) const {
  const double denom = normal.dot(dir);
  if (std::abs(denom) < 1e-12) return std::nullopt;
  const double t = (offset - normal.dot(origin)) / denom;
  if (t <= 0.0) return std::nullopt;
  return t;
}

void GroundPlane::validate() const {
  if (std::abs(normal.norm() - 1.0) > 1e-6)
    throw std::invalid_argument("ground normal must be unit length");
}

// ---- network configs --------------------------------------------------------------

nlohmann::json SdfNetworkConfig::to_json() const {
  return {{"depth", depth},        {"width", width},
          {"frequencies", frequencies}, {"feature_size", feature_size},
          {"beta", beta},          {"init_radius", init_radius},
          {"init_log_sharpness", init_log_sharpness}};
}

SdfNetworkConfig SdfNetworkConfig::from_json(const nlohmann::json& j) {
  SdfNetworkConfig c;
  c.depth = j.value("depth", c.depth);
  c.width = j.value("width", c.width);
  c.frequencies = j.value("frequencies", c.frequencies);
  c.feature_size = j.value("feature_size", c.feature_size);
  c.beta = j.value("beta", c.beta);
  c.init_radius = j.value("init_radius", c.init_radius);
  c.init_log_sharpness = j.value("init_log_sharpness", c.init_log_sharpness);
  return c;
}

nlohmann::json MaterialNetworkConfig::to_json() const { return {{"depth", depth}, {"width", width}}; }

MaterialNetworkConfig MaterialNetworkConfig::from_json(const nlohmann::json& j) {
  MaterialNetworkConfig c;
  c.depth = j.value("depth", c.depth);
  c.width = j.value("width", c.width);
  return c;
}

// ---- SdfNetwork -------------------------------------------------------------------

namespace {

void fill_normal(Eigen::Ref<Matrix> m, std::mt19937_64& rng, double mean, double stddev) {
  std::normal_distribution<double> n(mean, stddev);
  for (Eigen::Index c = 0; c < m.cols(); ++c)
    for (Eigen::Index r = 0; r < m.rows(); ++r) m(r, c) = n(rng);
}

}  // namespace

SdfNetwork::SdfNetwork(const SdfNetworkConfig& config, FieldParameters& params) : config_(config) {
  if (config.depth < 1 || config.width < 1 || config.frequencies < 0 || config.feature_size < 0)
    throw std::invalid_argument("invalid sdf network configuration");
  const int d_in = encoded_size(config.frequencies);
  skip_ = (config.depth >= 4 && config.width > d_in) ? config.depth / 2 : -1;
  int in = d_in;
  for (int l = 0; l < config.depth; ++l) {
    if (l == skip_) in += d_in;
    const int out = (l + 1 == skip_) ? config.width - d_in : config.width;
    weights_.push_back(params.add_block("sdf.w" + std::to_string(l), in, out));
    biases_.push_back(params.add_block("sdf.b" + std::to_string(l), 1, out));
    in = out;
  }
  out_w_ = params.add_block("sdf.w_out", in, 1 + config.feature_size);
  out_b_ = params.add_block("sdf.b_out", 1, 1 + config.feature_size);
  log_s_ = params.add_block("sdf.log_s", 1, 1);
}

void SdfNetwork::initialize(FieldParameters& params, std::mt19937_64& rng) const {
  const int d_in = encoded_size(config_.frequencies);
  for (int l = 0; l < config_.depth; ++l) {
    auto w = params.block(weights_[l]);
    auto b = params.block(biases_[l]);
    const double sd = std::sqrt(2.0) / std::sqrt(static_cast<double>(w.cols()));
    fill_normal(w, rng, 0.0, sd);
    b.setZero();
    if (l == 0 && config_.frequencies > 0) {
      w.bottomRows(w.rows() - 3).setZero();
    } else if (l == skip_) {
      w.bottomRows(d_in - 3).setZero();
    }
  }
  auto wo = params.block(out_w_);
  auto bo = params.block(out_b_);
  fill_normal(wo, rng, std::sqrt(std::numbers::pi) / std::sqrt(static_cast<double>(wo.rows())),
              1e-4);
  bo.setConstant(-config_.init_radius);
  params.block(log_s_)(0, 0) = config_.init_log_sharpness;
  // softplus(0) = ln2 / beta accumulates through the layers and lifts f(0)
  // well above -r for wide nets; pin the centre value.
  const double centre = sdf(params, Matrix::Zero(1, 3))(0);
  params.block(out_b_)(0, 0) -= centre + config_.init_radius;
}

SdfNetwork::Output SdfNetwork::forward(const ParamBinding& binding, Var points,
                                       bool with_feature) const {
  Var enc = positional_encode(points, config_.frequencies);
  Var h = enc;
  for (int l = 0; l < config_.depth; ++l) {
    if (l == skip_) {
      const Var parts[] = {h, enc};
      h = ad::scale(ad::concat_cols(parts), 1.0 / std::numbers::sqrt2);
    }
    h = ad::softplus(ad::affine(h, binding.block(weights_[l]), binding.block(biases_[l])),
                     config_.beta);
  }
  Output out;
  if (with_feature) {
    Var y = ad::affine(h, binding.block(out_w_), binding.block(out_b_));
    out.sdf = ad::slice_cols(y, 0, 1);
    out.feature = ad::slice_cols(y, 1, config_.feature_size);
  } else {
    out.sdf = ad::affine(h, ad::slice_cols(binding.block(out_w_), 0, 1),
                         ad::slice_cols(binding.block(out_b_), 0, 1));
  }
  return out;
}

Eigen::VectorXd SdfNetwork::sdf(const FieldParameters& params, const Matrix& points) const {
  const Matrix enc = positional_encode(points, config_.frequencies);
  Matrix h = enc;
  for (int l = 0; l < config_.depth; ++l) {
    if (l == skip_) {
      Matrix cat(h.rows(), h.cols() + enc.cols());
      cat << h, enc;
      h = cat / std::numbers::sqrt2;
    }
    Matrix z = h * params.block(weights_[l]);
    z.rowwise() += params.block(biases_[l]).row(0);
    h = ad::softplus_array(z, config_.beta);
  }
  Eigen::VectorXd f = h * params.block(out_w_).col(0);
  f.array() += params.block(out_b_)(0, 0);
  return f;
}

Matrix SdfNetwork::sdf_gradient(const FieldParameters& params, const Matrix& points,
                                Eigen::VectorXd* values) const {
  const Matrix enc = positional_encode(points, config_.frequencies);
  std::vector<Matrix> pre(static_cast<std::size_t>(config_.depth));
  std::vector<Eigen::Index> carried(static_cast<std::size_t>(config_.depth), 0);
  Matrix h = enc;
  for (int l = 0; l < config_.depth; ++l) {
    if (l == skip_) {
      carried[l] = h.cols();
      Matrix cat(h.rows(), h.cols() + enc.cols());
      cat << h, enc;
      h = cat / std::numbers::sqrt2;
    }
    Matrix z = h * params.block(weights_[l]);
    z.rowwise() += params.block(biases_[l]).row(0);
    h = ad::softplus_array(z, config_.beta);
    pre[l] = std::move(z);
  }
  if (values) {
    *values = h * params.block(out_w_).col(0);
    values->array() += params.block(out_b_)(0, 0);
  }

  Matrix g = params.block(out_w_).col(0).transpose().replicate(points.rows(), 1);
  Matrix g_enc = Matrix::Zero(points.rows(), enc.cols());
  for (int l = config_.depth - 1; l >= 0; --l) {
    const Matrix gz = g.cwiseProduct(ad::sigmoid_array(pre[l], config_.beta));
    Matrix gin = gz * params.block(weights_[l]).transpose();
    if (l == skip_) {
      gin /= std::numbers::sqrt2;
      g_enc += gin.rightCols(enc.cols());
      g = gin.leftCols(carried[l]);
    } else if (l == 0) {
      g_enc += gin;
    } else {
      g = std::move(gin);
    }
  }

  // encoding Jacobian: d sin(a p)/dp = a cos(a p), d cos(a p)/dp = -a sin(a p)
  Matrix out = g_enc.leftCols(3);
  double a = std::numbers::pi;
  for (int k = 0; k < config_.frequencies; ++k) {
    const auto sn = enc.middleCols(3 + 6 * k, 3).array();
    const auto cs = enc.middleCols(6 + 6 * k, 3).array();
    out.array() += a * (g_enc.middleCols(3 + 6 * k, 3).array() * cs -
                        g_enc.middleCols(6 + 6 * k, 3).array() * sn);
    a *= 2.0;
  }
  return out;
}

Var SdfNetwork::sharpness(const ParamBinding& binding) const {
  return ad::exp(ad::scale(binding.block(log_s_), 10.0));
}

double SdfNetwork::sharpness(const FieldParameters& params) const {
  return std::exp(10.0 * params.block(log_s_)(0, 0));
}

// ---- MaterialNetwork ----------------------------------------------------------------

MaterialNetwork::MaterialNetwork(const MaterialNetworkConfig& config, int feature_size,
                                 FieldParameters& params)
    : config_(config), feature_size_(feature_size) {
  if (config.depth < 1 || config.width < 1) throw std::invalid_argument("invalid material network");
  int in = 6 + feature_size;
  for (int l = 0; l < config.depth; ++l) {
    weights_.push_back(params.add_block("mat.w" + std::to_string(l), in, config.width));
    biases_.push_back(params.add_block("mat.b" + std::to_string(l), 1, config.width));
    in = config.width;
  }
  weights_.push_back(params.add_block("mat.w_out", in, 3 + kSpecularCoefficients));
  biases_.push_back(params.add_block("mat.b_out", 1, 3 + kSpecularCoefficients));
}

void MaterialNetwork::initialize(FieldParameters& params, std::mt19937_64& rng) const {
  for (std::size_t l = 0; l + 1 < weights_.size(); ++l) {
    auto w = params.block(weights_[l]);
    fill_normal(w, rng, 0.0, std::sqrt(2.0 / static_cast<double>(w.rows())));
    params.block(biases_[l]).setZero();
  }
  auto wo = params.block(weights_.back());
  fill_normal(wo, rng, 0.0, 0.01 / std::sqrt(static_cast<double>(wo.rows())));
  auto bo = params.block(biases_.back());
  bo.leftCols(3).setConstant(0.5);
  bo.rightCols(kSpecularCoefficients).setConstant(-0.05);
}

MaterialNetwork::Output MaterialNetwork::forward(const ParamBinding& binding, Var points,
                                                 Var normals, Var features) const {
  const Var parts[] = {points, normals, features};
  Var h = ad::concat_cols(parts);
  for (std::size_t l = 0; l + 1 < weights_.size(); ++l)
    h = ad::relu(ad::affine(h, binding.block(weights_[l]), binding.block(biases_[l])));
  Var y = ad::softplus(ad::affine(h, binding.block(weights_.back()), binding.block(biases_.back())),
                       100.0);
  return {ad::slice_cols(y, 0, 3), ad::slice_cols(y, 3, kSpecularCoefficients)};
}

// ---- NeuralSdf / GroundComposite ----------------------------------------------------

Eigen::VectorXd NeuralSdf::eval(const Matrix& points) const { return net_->sdf(*params_, points); }

Var NeuralSdf::eval(const ParamBinding* binding, Var points) const {
  if (binding) return net_->forward(*binding, points, false).sdf;
  ParamBinding local(points.tape(), *params_, false);
  return net_->forward(local, points, false).sdf;
}

Matrix NeuralSdf::gradient(const Matrix& points, Eigen::VectorXd* values) const {
  return net_->sdf_gradient(*params_, points, values);
}

Eigen::VectorXd GroundComposite::eval(const Matrix& points) const {
  Eigen::VectorXd g = (points * ground_->normal).array() - ground_->offset;
  return object_->eval(points).cwiseMin(g);
}

Var GroundComposite::eval(const ParamBinding* binding, Var points) const {
  Tape& t = points.tape();
  Var g = ad::matmul(points, t.constant(Matrix(ground_->normal))) - ground_->offset;
  return ad::minimum(object_->eval(binding, points), g);
}

// ---- differential quantities ----------------------------------------------------------

NormalResult normal(const SdfField& field, const ParamBinding* binding, Var points, bool strict) {
  Tape& t = points.tape();
  Var q = points.requires_grad() ? points : t.variable(points.value());
  Var f = field.eval(binding, q);
  const Var wrt[] = {q};
  Var g = t.grad(ad::sum(f), wrt)[0];
  const Eigen::VectorXd len = g.value().rowwise().norm();
  if (strict && len.size() > 0 && !(len.minCoeff() > 1e-8))
    throw DegenerateNormal("vanishing sdf gradient: |grad f| = " + std::to_string(len.minCoeff()));
  return {g / ad::norm_rows(g, 1e-24), g};
}

Matrix normal(const SdfField& field, const Matrix& points) {
  Matrix g = field.gradient(points);
  for (Eigen::Index i = 0; i < g.rows(); ++i) {
    const double n = g.row(i).norm();
    if (!(n > 1e-8)) throw DegenerateNormal("vanishing sdf gradient at row " + std::to_string(i));
    g.row(i) /= n;
  }
  return g;
}

Var eikonal_loss(const SdfField& field, const ParamBinding* binding, const Matrix& points) {
  if (points.rows() < 1) throw std::invalid_argument("eikonal_loss needs at least one point");
  Tape& t = binding ? binding->tape() : throw std::invalid_argument("eikonal_loss needs a tape");
  Var q = t.variable(points);
  Var f = field.eval(binding, q);
  const Var wrt[] = {q};
  Var g = t.grad(ad::sum(f), wrt)[0];
  return ad::mean(ad::square(ad::norm_rows(g, 1e-12) - 1.0));
}

// ---- parameter files --------------------------------------------------------------------

namespace {

constexpr char kMagic[] = "SHADOWRAY-PARAMS\n";

template <typename T>
void write_raw(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::istream& is, const std::string& path) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error(path + ": truncated parameter file");
  return v;
}

void write_array(std::ostream& os, const Eigen::VectorXd& v) {
  os.write(reinterpret_cast<const char*>(v.data()),
           static_cast<std::streamsize>(v.size() * sizeof(double)));
}

Eigen::VectorXd read_array(std::istream& is, std::size_t n, const std::string& path) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(n));
  is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
  if (!is) throw std::runtime_error(path + ": truncated parameter file");
  return v;
}

}  // namespace

void save_parameter_file(const std::string& path, const ParameterFile& file) {
  nlohmann::json header = file.header;
  nlohmann::json layout = nlohmann::json::array();
  for (const auto& b : file.params.layout())
    layout.push_back({{"name", b.name}, {"rows", b.rows}, {"cols", b.cols}});
  header["layout"] = layout;
  nlohmann::json arrays = nlohmann::json::array();
  arrays.push_back({{"name", "params"}, {"size", file.params.size()}});
  for (const auto& [name, v] : file.extra) arrays.push_back({{"name", name}, {"size", v.size()}});
  header["arrays"] = arrays;
  const std::string text = header.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  os.write(kMagic, sizeof(kMagic) - 1);
  write_raw<std::uint32_t>(os, kParameterFileVersion);
  write_raw<std::uint64_t>(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  write_array(os, file.params.values());
  for (const auto& [name, v] : file.extra) write_array(os, v);
  if (!os) throw std::runtime_error("failed writing " + path);
}

ParameterFile load_parameter_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  char magic[sizeof(kMagic) - 1];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(magic)) != 0)
    throw std::runtime_error(path + ": not a shadowray parameter file");
  const auto version = read_raw<std::uint32_t>(is, path);
  if (version != kParameterFileVersion)
    throw std::runtime_error(path + ": unsupported parameter file version " + std::to_string(version));
  const auto len = read_raw<std::uint64_t>(is, path);
  std::string text(len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(len));
  if (!is) throw std::runtime_error(path + ": truncated header");

  ParameterFile file;
  file.header = nlohmann::json::parse(text);
  for (const auto& b : file.header.at("layout"))
    file.params.add_block(b.at("name").get<std::string>(), b.at("rows").get<Eigen::Index>(),
                          b.at("cols").get<Eigen::Index>());
  const auto& arrays = file.header.at("arrays");
  for (std::size_t i = 0; i < arrays.size(); ++i) {
    const auto n = arrays[i].at("size").get<std::size_t>();
    Eigen::VectorXd v = read_array(is, n, path);
    if (i == 0) {
      if (v.size() != file.params.size())
        throw std::runtime_error(path + ": parameter count does not match layout");
      file.params.values() = std::move(v);
    } else {
      file.extra.emplace_back(arrays[i].at("name").get<std::string>(), std::move(v));
    }
  }
  file.header.erase("layout");
  file.header.erase("arrays");
  return file;
}

}  // namespace shadowray::fields
