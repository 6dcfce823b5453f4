#include <doctest.h>

#include "shadowray/shading.hpp"
#include "support.hpp"

#include <cmath>

using namespace shadowray;
using namespace shadowray::shading;
using ad::Tape;
using testing::random_matrix;

namespace {

Vec3 random_unit(std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  return Vec3(g(rng), g(rng), g(rng)).normalized();
}

using Coeffs = Eigen::Matrix<double, 27, 1>;

}  // namespace

TEST_CASE("basis shininess is log-spaced from 1 to 512") {
  const auto& k = shininess();
  CHECK(k.front() == doctest::Approx(1.0));
  CHECK(k.back() == doctest::Approx(512.0));
  for (int i = 1; i < kBases; ++i) CHECK(k[i] / k[i - 1] == doctest::Approx(std::exp2(9.0 / 8.0)));
}

TEST_CASE("half vector") {
  CHECK((*half_vector(Vec3(0, 0, 1), Vec3(0, 0, -1)) - Vec3(0, 0, 1)).norm() < 1e-15);
  const Vec3 h = *half_vector(Vec3(1, 0, 0), Vec3(0, 0, -1));
  CHECK(std::acos(h.dot(Vec3(1, 0, 0))) == doctest::Approx(std::numbers::pi / 4));
  CHECK(std::acos(h.dot(Vec3(0, 0, 1))) == doctest::Approx(std::numbers::pi / 4));
  CHECK_FALSE(half_vector(Vec3(0, 1, 0), Vec3(0, 1, 0)).has_value());
  std::mt19937_64 rng(2);
  for (int k = 0; k < 1000; ++k) {
    const auto hv = half_vector(random_unit(rng), random_unit(rng));
    REQUIRE(hv.has_value());
    CHECK(hv->norm() == doctest::Approx(1.0).epsilon(1e-14));
  }
}

TEST_CASE("specular lobes") {
  const Vec3 n(0, 0, 1);
  CHECK(specular(Coeffs::Zero(), n, n).isZero());
  for (int k = 0; k < kBases; ++k) {
    Coeffs y = Coeffs::Zero();
    y(1 * kBases + k) = 0.37;
    const Vec3 rho = specular(y, n, n);
    CHECK(rho(0) == 0.0);
    CHECK(rho(1) == doctest::Approx(0.37).epsilon(1e-15));
    CHECK(rho(2) == 0.0);
  }
  CHECK(sg_basis(100.0, Vec3(1, 0, 0), n) == doctest::Approx(std::exp(-100.0)));
  CHECK(sg_basis(100.0, Vec3(1, 0, 0), n) < 1e-40);
  std::mt19937_64 rng(4);
  for (int k = 0; k < 200; ++k) {
    const Vec3 h = random_unit(rng), n = random_unit(rng);
    const double kappa = shininess()[k % kBases];
    const double d = sg_basis(kappa, h, n);
    CHECK(d >= 0.0);
    if (kappa * (1.0 - h.dot(n)) < 700.0) CHECK(d > 0.0);  // below that it underflows
    CHECK(d <= 1.0);
  }
}

TEST_CASE("outgoing radiance") {
  ShadingSample s;
  s.n = Vec3(0, 0, 1);
  s.l = s.n;
  s.v = Vec3(0, 0.6, -0.8);
  s.albedo = Vec3(0.2, 0.5, 0.7);
  CHECK((render_outgoing(s) - s.albedo).norm() < 1e-15);
  s.l = Vec3(0, 1, 0);
  CHECK(render_outgoing(s).isZero());
  s.l = Vec3(0, 0.6, -0.8);
  s.y.setConstant(0.3);
  CHECK(render_outgoing(s).isZero());

  std::mt19937_64 rng(6);
  for (int k = 0; k < 100; ++k) {
    s.n = random_unit(rng);
    s.l = random_unit(rng);
    s.v = random_unit(rng);
    s.albedo = random_matrix(rng, 3, 1).cwiseAbs();
    s.y = random_matrix(rng, 27, 1).cwiseAbs();
    double prev = -1.0;
    for (double c = 0.0; c <= 2.0; c += 0.25) {
      s.c_in = c;
      const Vec3 out = render_outgoing(s);
      CHECK(out.minCoeff() >= 0.0);
      CHECK(out.sum() >= prev);
      prev = out.sum();
    }
  }
}

TEST_CASE("batched outgoing radiance matches the per-sample form") {
  std::mt19937_64 rng(8);
  const int n = 12;
  std::vector<ShadingSample> ss(n);
  Matrix N(n, 3), L(n, 3), V(n, 3), A(n, 3), Y(n, 27), C(n, 1);
  for (int r = 0; r < n; ++r) {
    auto& s = ss[r];
    s.n = random_unit(rng);
    s.l = r == 3 ? s.n : random_unit(rng);
    s.v = r == 5 ? s.l : random_unit(rng);  // degenerate half vector
    s.albedo = random_matrix(rng, 3, 1).cwiseAbs();
    s.y = random_matrix(rng, 27, 1).cwiseAbs();
    s.c_in = std::abs(random_matrix(rng, 1, 1)(0));
    N.row(r) = s.n.transpose();
    L.row(r) = s.l.transpose();
    V.row(r) = s.v.transpose();
    A.row(r) = s.albedo.transpose();
    Y.row(r) = s.y.transpose();
    C(r) = s.c_in;
  }
  Tape t;
  const Matrix out =
      render_outgoing(t.constant(N), t.constant(L), V, t.constant(A), t.constant(Y), t.constant(C)).value();
  for (int r = 0; r < n; ++r) CHECK((out.row(r).transpose() - render_outgoing(ss[r])).norm() < 1e-13);
}

TEST_CASE("outgoing radiance input gradients") {
  std::mt19937_64 rng(10);
  const int n = 4;
  Matrix N(n, 3), L(n, 3), V(n, 3);
  for (int r = 0; r < n; ++r) {
    N.row(r) = random_unit(rng).transpose();
    L.row(r) = (N.row(r).transpose() + 0.5 * random_unit(rng)).normalized().transpose();
    V.row(r) = -(N.row(r).transpose() + 0.7 * random_unit(rng)).normalized().transpose();
  }
  const Matrix A = random_matrix(rng, n, 3).cwiseAbs();
  const Matrix Y = 0.1 * random_matrix(rng, n, 27).cwiseAbs();
  const Matrix C = random_matrix(rng, n, 1).cwiseAbs();
  const Matrix target = random_matrix(rng, n, 3).cwiseAbs();
  auto run = [&](Tape& t, const Matrix& nn, const Matrix& ll, const Matrix& aa, const Matrix& yy, const Matrix& cc,
                 std::vector<Var>* leaves) {
    Var vn = t.variable(nn), vl = t.variable(ll), va = t.variable(aa), vy = t.variable(yy), vc = t.variable(cc);
    if (leaves) *leaves = {vn, vl, va, vy, vc};
    return rgb_loss(render_outgoing(vn, vl, V, va, vy, vc), target);
  };
  Tape t;
  std::vector<Var> leaves;
  Var loss = run(t, N, L, A, Y, C, &leaves);
  const auto g = t.backward(loss, leaves);
  const std::vector<Matrix> base{N, L, A, Y, C};
  double worst = 0.0;
  for (std::size_t which = 0; which < base.size(); ++which) {
    for (Eigen::Index i = 0; i < base[which].size(); ++i) {
      auto eval = [&](double h) {
        std::vector<Matrix> m = base;
        m[which].data()[i] += h;
        Tape tt;
        return run(tt, m[0], m[1], m[2], m[3], m[4], nullptr).scalar();
      };
      const double fd = (eval(1e-5) - eval(-1e-5)) / 2e-5;
      const double an = g[which].data()[i];
      if (std::abs(an) < 1e-6 && std::abs(fd) < 1e-6) continue;
      worst = std::max(worst, std::abs(fd - an) / (std::abs(fd) + std::abs(an)));
    }
  }
  CHECK(worst < 1e-5);
}

TEST_CASE("losses") {
  CHECK(rgb_loss(Vec3(0.1, 0.2, 0.3), Vec3(0.1, 0.2, 0.3)) == 0.0);
  CHECK(rgb_loss(Vec3(0.1, 1.2, 0.3), Vec3(0.1, 0.2, 0.3)) == doctest::Approx(1.0));
  std::mt19937_64 rng(12);
  const Matrix c = random_matrix(rng, 50, 3), target = random_matrix(rng, 50, 3);
  Tape t;
  double mean = 0.0;
  for (int r = 0; r < 50; ++r) mean += rgb_loss(Vec3(c.row(r).transpose()), Vec3(target.row(r).transpose())) / 50;
  CHECK(rgb_loss(t.constant(c), target).scalar() == doctest::Approx(mean).epsilon(1e-14));

  CHECK(total_loss(t.constant(0.0), t.constant(0.0), 0.1).scalar() == 0.0);
  CHECK(total_loss(t.constant(0.2), t.constant(1.0), 0.1).scalar() == doctest::Approx(0.3));
  CHECK(total_loss(t.constant(0.2), t.constant(1.0), 0.1, t.constant(0.5), 1.0).scalar() == doctest::Approx(0.8));

  const Supervision ok[] = {Supervision::Rgb, Supervision::Rgb};
  const Supervision mixed[] = {Supervision::Rgb, Supervision::Shadow};
  CHECK_NOTHROW(require_uniform_supervision(ok, Supervision::Rgb));
  CHECK_THROWS_AS(require_uniform_supervision(mixed, Supervision::Rgb), std::invalid_argument);
  CHECK(supervision_from_string("binary") == Supervision::Shadow);
  CHECK_THROWS_AS(supervision_from_string("depth"), std::invalid_argument);
}
