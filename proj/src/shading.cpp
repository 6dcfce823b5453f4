#include "shadowray/shading.hpp"

#include <cmath>
#include <stdexcept>

namespace shadowray::shading {

const std::array<double, kBases>& shininess() {
  static const std::array<double, kBases> k = [] {
    std::array<double, kBases> out{};
    for (int i = 0; i < kBases; ++i) out[i] = std::exp2(9.0 * i / (kBases - 1));
    return out;
  }();
  return k;
}

double sg_basis(double kappa, const Vec3& h, const Vec3& n) { return std::exp(kappa * (h.dot(n) - 1.0)); }

std::optional<Vec3> half_vector(const Vec3& l, const Vec3& v) {
  const Vec3 d = l - v;
  const double len = d.norm();
  if (!(len > 1e-8)) return std::nullopt;
  return d / len;
}

Vec3 specular(const Eigen::Matrix<double, 27, 1>& y, const Vec3& h, const Vec3& n) {
  Vec3 out = Vec3::Zero();
  for (int k = 0; k < kBases; ++k) {
    const double d = sg_basis(shininess()[k], h, n);
    for (int c = 0; c < kChannels; ++c) out(c) += y(c * kBases + k) * d;
  }
  return out;
}

Vec3 render_outgoing(const ShadingSample& s) {
  Vec3 rho = s.albedo;
  if (const auto h = half_vector(s.l, s.v)) rho += specular(s.y, *h, s.n);
  return rho * s.c_in * std::max(s.l.dot(s.n), 0.0);
}

Var render_outgoing(Var n, Var l, const Matrix& v, Var albedo, Var y, Var c_in) {
  ad::Tape& tape = n.tape();
  const Eigen::Index rows = n.rows();
  Matrix degenerate = Matrix::Zero(rows, 1);
  const Matrix d = l.value() - v;
  for (Eigen::Index r = 0; r < rows; ++r) degenerate(r) = d.row(r).norm() > 1e-8 ? 0.0 : 1.0;

  // the offset keeps the norm away from zero on degenerate rows, which are masked
  Var lv = l - tape.constant(v) + tape.constant(Matrix(degenerate * Eigen::RowVector3d(0, 0, 1)));
  Var h = lv / ad::norm_rows(lv);
  Matrix kappa(1, kBases);
  for (int k = 0; k < kBases; ++k) kappa(k) = shininess()[k];
  Var lobes = ad::exp((ad::dot_rows(h, n) - 1.0) * tape.constant(kappa));  // rows x 9
  lobes = lobes * tape.constant(Matrix((1.0 - degenerate.array()).matrix()));
  Var channels[kChannels];
  for (int c = 0; c < kChannels; ++c) channels[c] = ad::sum_cols(ad::slice_cols(y, c * kBases, kBases) * lobes);
  Var rho = albedo + ad::concat_cols(channels);
  return rho * (c_in * ad::relu(ad::dot_rows(l, n)));
}

Var rgb_loss(Var c, const Matrix& target) {
  if (target.rows() != c.rows() || target.cols() != c.cols())
    throw std::invalid_argument("rgb_loss: target shape mismatch");
  return ad::sum(ad::abs(c - c.tape().constant(target))) / static_cast<double>(c.rows());
}

double rgb_loss(const Vec3& c, const Vec3& target) { return (c - target).cwiseAbs().sum(); }

Supervision supervision_from_string(const std::string& s) {
  if (s == "binary" || s == "shadow") return Supervision::Shadow;
  if (s == "rgb") return Supervision::Rgb;
  throw std::invalid_argument("unknown supervision type '" + s + "' (expected binary or rgb)");
}

std::string to_string(Supervision s) { return s == Supervision::Shadow ? "binary" : "rgb"; }

void require_uniform_supervision(std::span<const Supervision> batch, Supervision mode) {
  for (const Supervision s : batch)
    if (s != mode)
      throw std::invalid_argument("batch mixes supervision types: expected " + to_string(mode) + ", found " +
                                  to_string(s));
}

Var total_loss(Var photometric, Var eikonal, double eikonal_weight, Var pin, double pin_weight) {
  Var total = photometric + eikonal_weight * eikonal;
  if (pin.valid()) total = total + pin_weight * pin;
  return total;
}

}  // namespace shadowray::shading
