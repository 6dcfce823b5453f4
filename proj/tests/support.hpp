#pragma once

// Fixtures shared by the module tests.

#include "shadowray/camera.hpp"
#include "shadowray/fields.hpp"

#include <random>

namespace testing {

using namespace shadowray;
using fields::Matrix;
using fields::ParamBinding;
using fields::Var;

inline Matrix random_matrix(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

/// Camera 3 units from the origin at 30 degrees elevation, 40 degree field of view.
inline CameraModel test_camera(int res = 64) {
  const double el = 30.0 * 3.14159265358979323846 / 180.0;
  const Vec3 eye(0.0, -3.0 * std::cos(el), 3.0 * std::sin(el));
  return CameraModel::look_at(eye, Vec3(0, 0, -0.1), Vec3::UnitZ(), 20.0 * 3.14159265358979323846 / 180.0,
                              res, res);
}

inline fields::GroundPlane test_ground() {
  fields::GroundPlane g;
  g.offset = -0.4;
  return g;
}

/// Sphere whose centre and radius are trainable: one 1 x 4 block (cx, cy, cz, r).
class ParamSphere final : public fields::SdfField {
 public:
  explicit ParamSphere(fields::FieldParameters& params) : params_(&params) {
    block_ = params.add_block("sphere", 1, 4);
  }
  void set(const Vec3& c, double r) {
    auto b = params_->block(block_);
    b << c.x(), c.y(), c.z(), r;
  }
  [[nodiscard]] int block() const { return block_; }

  using fields::SdfField::eval;
  Eigen::VectorXd eval(const Matrix& p) const override {
    auto b = params_->block(block_);
    const Eigen::RowVector3d c = b.leftCols(3);
    return (p.rowwise() - c).rowwise().norm().array() - b(0, 3);
  }
  Var eval(const ParamBinding* binding, Var p) const override {
    Var blk = binding ? binding->block(block_) : p.tape().constant(Matrix(params_->block(block_)));
    Var c = ad::slice_cols(blk, 0, 3);
    Var r = ad::slice_cols(blk, 3, 1);
    return ad::norm_rows(p - c) - r;
  }

 private:
  fields::FieldParameters* params_;
  int block_ = -1;
};

}  // namespace testing
