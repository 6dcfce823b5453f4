#include <doctest.h>

#include "shadowray/raycast.hpp"
#include "support.hpp"

#include <cmath>

using namespace shadowray;
using namespace shadowray::raycast;
using namespace testing;
using fields::AnalyticSdf;
using fields::FieldParameters;
using ad::Tape;

namespace {

// Fraction of 16 x 16 sub-rays in pixel (i, j) that hit the object.
double supersampled_fraction(const RayContext& ctx, int i, int j, int n = 16) {
  std::vector<Vec2> px;
  for (int a = 0; a < n; ++a)
    for (int b = 0; b < n; ++b) px.emplace_back(i + (a + 0.5) / n, j + (b + 0.5) / n);
  int hits = 0;
  for (const auto& tr : ctx.trace(px)) hits += tr.hit.hit_object() ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(px.size());
}

struct SphereScene {
  FieldParameters params;
  ParamSphere sphere{params};
  CameraModel camera = test_camera(64);
  fields::GroundPlane ground = test_ground();
  RayContext ctx;

  SphereScene() {
    sphere.set(Vec3(0, 0, -0.05), 0.35);
    ctx.field = &sphere;
    ctx.camera = &camera;
    ctx.ground = &ground;
  }
};

}  // namespace

TEST_CASE("march hits the unit sphere from above") {
  auto s = AnalyticSdf::sphere(Vec3::Zero(), 1.0);
  RayQuery q;
  q.origin = Vec3(0, 0, 3);
  q.dir = Vec3(0, 0, -1);
  Intersection h = ray_march(s, q);
  REQUIRE(h.valid);
  CHECK_FALSE(h.hit_ground);
  CHECK(h.t == doctest::Approx(2.0).epsilon(1e-3));
  CHECK((h.x - Vec3(0, 0, 1)).norm() < 1e-3);
  CHECK(std::abs(s.eval(h.x)) < 1e-4);
}

TEST_CASE("missing the object falls through to the ground") {
  auto s = AnalyticSdf::sphere(Vec3::Zero(), 0.5);
  fields::GroundPlane g;
  g.offset = -1.0;
  RayQuery q;
  q.origin = Vec3(2, 0, 3);
  q.dir = Vec3(0, 0, -1);
  q.ground_t = g.intersect(q.origin, q.dir);
  Intersection h = ray_march(s, q);
  REQUIRE(h.valid);
  CHECK(h.hit_ground);
  CHECK(h.x.z() == doctest::Approx(-1.0));

  q.ground_t.reset();
  CHECK_FALSE(ray_march(s, q).valid);
}

TEST_CASE("grazing rays resolve to a valid branch") {
  auto s = AnalyticSdf::sphere(Vec3::Zero(), 0.5);
  fields::GroundPlane g;
  g.offset = -1.0;
  int object = 0, ground = 0;
  for (int k = -20; k <= 20; ++k) {
    // ray at perpendicular distance 0.5 + k 1e-4 from the centre
    RayQuery q;
    q.dir = Vec3(1, 0, -0.01).normalized();
    const Vec3 n = Vec3(0.01, 0, 1).normalized();
    q.origin = (0.5 + k * 1e-4) * n - 2.0 * q.dir;
    q.ground_t = g.intersect(q.origin, q.dir);
    Intersection h = ray_march(s, q);
    REQUIRE(h.valid);
    if (h.hit_ground) {
      ++ground;
      CHECK(g.distance(h.x) == doctest::Approx(0.0).epsilon(1e-9));
      // dense oracle: a ground verdict means the ray never went deeper than
      // what one marching step can skip over
      double deepest = 1.0;
      for (int i = 0; i <= 200000; ++i) deepest = std::min(deepest, s.distance(q.origin + (1.0 + i * 1e-5) * q.dir));
      CHECK(deepest > -2e-3);
    } else {
      ++object;
      CHECK(std::abs(s.eval(h.x)) < 1e-4);
    }
  }
  CHECK(object > 0);
  CHECK(ground > 0);
}

TEST_CASE("object hits lie on the level set") {
  auto s = AnalyticSdf::make_union({AnalyticSdf::sphere(Vec3(-0.25, 0.1, -0.2), 0.2),
                                    AnalyticSdf::box(Vec3(0.25, -0.1, -0.15), Vec3(0.2, 0.15, 0.25))});
  const CameraModel cam = test_camera(32);
  const auto ground = test_ground();
  RayContext ctx{&s, &cam, &ground};
  std::vector<Vec2> px;
  for (int j = 0; j < 32; ++j)
    for (int i = 0; i < 32; ++i) px.emplace_back(i + 0.5, j + 0.5);
  int objects = 0;
  for (const auto& tr : ctx.trace(px)) {
    REQUIRE(tr.hit.valid);
    if (tr.hit.hit_object()) {
      ++objects;
      CHECK(std::abs(s.eval(tr.hit.x)) < 1e-4);
    }
  }
  CHECK(objects > 50);
}

TEST_CASE("differentiable intersection: value and radius derivative") {
  FieldParameters params;
  ParamSphere sphere(params);
  const double r = 0.4;
  sphere.set(Vec3::Zero(), r);
  Matrix x(1, 3), v(1, 3);
  x << 0, 0, r;
  v << 0, 0, -1;
  Tape t;
  ParamBinding bind(t, params, true);
  Var xh = differentiable_intersection(t, sphere, &bind, x, v);
  CHECK((xh.value() - x).cwiseAbs().maxCoeff() < 1e-15);
  Eigen::VectorXd g = bind.gradient(ad::slice_cols(xh, 2, 1));
  CHECK(g(3) == doctest::Approx(1.0).epsilon(1e-12));

  // finite difference over r with x held fixed
  auto xz = [&](double rr) {
    FieldParameters fresh;
    ParamSphere s3(fresh);
    s3.set(Vec3::Zero(), rr);
    Tape tt;
    return differentiable_intersection(tt, s3, nullptr, x, v).value()(0, 2);
  };
  CHECK((xz(r + 1e-6) - xz(r - 1e-6)) / 2e-6 == doctest::Approx(1.0).epsilon(1e-8));
}

TEST_CASE("differentiable intersection matches the implicit-function formula") {
  FieldParameters params;
  ParamSphere sphere(params);
  sphere.set(Vec3(0.1, -0.2, 0.05), 0.3);
  const Vec3 o(1.5, 0.8, 0.9);
  const Vec3 d = (Vec3(0.05, -0.15, 0.0) - o).normalized();
  RayQuery q{o, d, std::nullopt, 0.0};
  const Intersection h = ray_march(sphere, q);
  REQUIRE(h.hit_object());
  const Vec3 n = (h.x - Vec3(0.1, -0.2, 0.05)).normalized();
  Tape t;
  ParamBinding bind(t, params, true);
  Var xh = differentiable_intersection(t, sphere, &bind, Matrix(h.x.transpose()), Matrix(d.transpose()));
  // d x_hat / d c = -v (df/dc) / (n . v) with df/dc = -n; d x_hat / d r = v / (n . v)
  for (int k = 0; k < 3; ++k) {
    Eigen::VectorXd g = bind.gradient(ad::slice_cols(xh, k, 1));
    for (int c = 0; c < 3; ++c) CHECK(g(c) == doctest::Approx(d(k) * n(c) / n.dot(d)).epsilon(1e-6));
    CHECK(g(3) == doctest::Approx(d(k) / n.dot(d)).epsilon(1e-6));
  }
}

TEST_CASE("differentiable intersection gradient through a network") {
  fields::SdfNetworkConfig cfg;
  cfg.depth = 4;
  cfg.width = 32;
  cfg.frequencies = 2;
  cfg.feature_size = 4;
  FieldParameters params;
  fields::SdfNetwork net(cfg, params);
  std::mt19937_64 rng(3);
  net.initialize(params, rng);
  params.values() += 0.02 * random_matrix(rng, params.size(), 1);
  fields::NeuralSdf f(net, params);

  std::vector<RayQuery> qs;
  for (int k = 0; k < 3; ++k) {
    const Vec3 o(2.0, 0.3 * k - 0.3, 1.0);
    qs.push_back({o, (Vec3(0, 0.1 * k, 0) - o).normalized(), std::nullopt, 0.0});
  }
  const auto tr = march(f, qs);
  Matrix x(3, 3), v(3, 3);
  for (int k = 0; k < 3; ++k) {
    REQUIRE(tr[k].hit.hit_object());
    x.row(k) = tr[k].hit.x.transpose();
    v.row(k) = qs[k].dir.transpose();
  }
  auto loss = [&](Tape& t, const ParamBinding& b) {
    fields::NeuralSdf g(net, b.params());
    return ad::sum(ad::square(differentiable_intersection(t, g, &b, x, v)));
  };
  Tape t;
  ParamBinding bind(t, params, true);
  const Eigen::VectorXd grad = bind.gradient(loss(t, bind));
  auto value = [&](const Eigen::VectorXd& theta) {
    FieldParameters p = params;
    p.values() = theta;
    Tape tt;
    ParamBinding bb(tt, p, false);
    return loss(tt, bb).scalar();
  };
  double worst = 0.0;
  auto central = [&](Eigen::Index i, double h) {
    Eigen::VectorXd a = params.values(), b = params.values();
    a(i) += h;
    b(i) -= h;
    return (value(a) - value(b)) / (2 * h);
  };
  for (Eigen::Index i = 0; i < grad.size(); i += 7) {
    // one Richardson step: less roundoff than a tiny h, less truncation than plain h = 1e-5
    const double c = (4.0 * central(i, 1e-5) - central(i, 2e-5)) / 3.0;
    if (std::abs(grad(i)) < 1e-6 && std::abs(c) < 1e-6) continue;
    worst = std::max(worst, std::abs(c - grad(i)) / (std::abs(c) + std::abs(grad(i))));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("near-tangent denominators are clamped and counted") {
  auto s = AnalyticSdf::sphere(Vec3::Zero(), 0.5);
  Matrix x(1, 3), v(1, 3);
  x << 0, 0, 0.5;
  v << 1, 0, 0;
  reset_clamped_denominators();
  Tape t;
  Var xh = differentiable_intersection(t, s, nullptr, x, v);
  CHECK(clamped_denominators() == 1);
  CHECK(xh.value().allFinite());
}

TEST_CASE("box fraction is a CDF over the pixel") {
  const Vec2 axis(1, 0);
  CHECK(box_fraction(0.0, axis) == doctest::Approx(0.5));
  CHECK(box_fraction(0.25, axis) == doctest::Approx(0.75).epsilon(1e-3));
  CHECK(box_fraction(-1.0, axis) == 0.0);
  CHECK(box_fraction(1.0, axis) == 1.0);
  const Vec2 diag = Vec2(1, 1).normalized();
  CHECK(box_fraction(0.0, diag) == doctest::Approx(0.5));
  // corner triangle: the line x + y = 0.5 cuts an area of 1/8 from the corner
  CHECK(box_fraction(-0.5 / std::sqrt(2.0), diag) == doctest::Approx(0.125));
  // monotone
  double prev = -1.0;
  for (double s = -1.0; s <= 1.0; s += 0.01) {
    const double f = box_fraction(s, Vec2(0.6, -0.8));
    CHECK(f >= prev);
    prev = f;
  }
}

TEST_CASE("pixel inside a flat plane is not a boundary") {
  auto far = AnalyticSdf::sphere(Vec3(0, 0, 5), 0.1);
  const CameraModel cam = test_camera(64);
  const auto ground = test_ground();
  RayContext ctx{&far, &cam, &ground};
  const auto c = ctx.trace({Vec2(32.5, 50.5)});
  REQUIRE(c[0].hit.hit_ground);
  CHECK_FALSE(detect_boundary(ctx, 32, 50, c[0]).is_boundary);
}

TEST_CASE("sphere silhouette pixels: detection, ordering and area fraction") {
  SphereScene sc;
  std::vector<Vec2i> all;
  std::vector<Vec2> centres;
  for (int j = 0; j < 64; ++j)
    for (int i = 0; i < 64; ++i) {
      all.emplace_back(i, j);
      centres.emplace_back(i + 0.5, j + 0.5);
    }
  const auto traces = sc.ctx.trace(centres);
  const auto info = detect_boundaries(sc.ctx, all, traces);

  int truth = 0, found = 0, false_pos = 0, w_ok = 0, walked = 0;
  for (std::size_t k = 0; k < all.size(); ++k) {
    const int i = all[k].x(), j = all[k].y();
    const BoundaryInfo& b = info[k];
    const bool candidate = b.is_boundary || traces[k].hit.hit_object() || traces[k].graze < 3.0 / sc.camera.fx;
    if (!candidate) continue;
    const double frac = supersampled_fraction(sc.ctx, i, j);
    const bool straddles = frac > 0.02 && frac < 0.98;
    if (straddles) ++truth;
    if (b.is_boundary) {
      CHECK(b.near.hit.hit_object());
      CHECK(b.far.hit.hit_ground);
      CHECK(b.near.hit.t < b.far.hit.t);
      if (!straddles) ++false_pos;
    }
    if (straddles && b.is_boundary) {
      ++found;
      walked += b.walked ? 1 : 0;
      const double w = box_fraction(b.image_normal.dot(sc.camera.project(b.point) - b.pixel_center), b.image_normal);
      if (std::abs(w - frac) < 0.05) ++w_ok;
    }
  }
  MESSAGE("silhouette pixels " << truth << ", detected " << found << ", walked " << walked
                               << ", w within 0.05: " << w_ok << ", false positives " << false_pos);
  REQUIRE(truth > 30);
  CHECK(found >= 0.9 * truth);
  CHECK(w_ok >= 0.9 * found);
  CHECK(false_pos <= 0.1 * truth);
}

TEST_CASE("area ratio tracks a moving silhouette") {
  SphereScene sc;
  // pick the boundary pixels on the right-hand silhouette, plan at rest
  std::vector<Vec2i> px;
  for (int j = 24; j < 40; ++j)
    for (int i = 40; i < 56; ++i) px.emplace_back(i, j);
  std::vector<Vec2> centres;
  for (const auto& p : px) centres.emplace_back(p.x() + 0.5, p.y() + 0.5);
  const auto info = detect_boundaries(sc.ctx, px, sc.ctx.trace(centres));
  std::vector<const BoundaryInfo*> bs;
  std::vector<Vec2i> bpx;
  for (std::size_t k = 0; k < px.size(); ++k)
    if (info[k].is_boundary && info[k].walked) {
      bs.push_back(&info[k]);
      bpx.push_back(px[k]);
    }
  REQUIRE(bs.size() >= 4);

  // shift the sphere sideways (perpendicular to the view) and compare the
  // change of w on the frozen plan with the change of the true fraction
  const Vec3 right = sc.camera.rotation.row(0).transpose();
  const double pixel_world = 3.0 / sc.camera.fx;
  Tape t0;
  ParamBinding b0(t0, sc.params, false);
  const Matrix w0 = area_ratio(t0, sc.sphere, &b0, sc.camera, bs).value();
  std::vector<double> oracle0;
  for (const auto& p : bpx) oracle0.push_back(supersampled_fraction(sc.ctx, p.x(), p.y(), 32));

  int ok = 0, total = 0;
  for (double delta : {0.25, 0.5}) {
    sc.sphere.set(Vec3(0, 0, -0.05) + delta * pixel_world * right, 0.35);
    Tape t;
    ParamBinding b(t, sc.params, false);
    const Matrix w = area_ratio(t, sc.sphere, &b, sc.camera, bs).value();
    for (std::size_t k = 0; k < bs.size(); ++k) {
      const double dw = w(static_cast<Eigen::Index>(k)) - w0(static_cast<Eigen::Index>(k));
      const double df = supersampled_fraction(sc.ctx, bpx[k].x(), bpx[k].y(), 32) - oracle0[k];
      if (std::abs(df) < 0.05) continue;  // silhouette barely moves through this pixel
      ++total;
      if (std::abs(dw - df) <= 0.1 * std::abs(df) + 0.02) ++ok;
    }
  }
  MESSAGE("moving silhouette: " << ok << " / " << total);
  REQUIRE(total > 0);
  CHECK(ok >= 0.9 * total);
}
