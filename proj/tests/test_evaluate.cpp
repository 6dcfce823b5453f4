#include <doctest.h>

#include "shadowray/evaluate.hpp"
#include "support.hpp"

#include <cmath>
#include <filesystem>

using namespace shadowray;
using namespace shadowray::evaluate;
using fields::AnalyticSdf;
using testing::random_matrix;
namespace fs = std::filesystem;

namespace {

DepthMap depth_from(const std::vector<double>& t) {
  const int n = static_cast<int>(t.size());
  DepthMap d{Raster(n, 1, 1), Raster(n, 1, 1, 1.0)};
  d.t.data = t;
  return d;
}

Raster normals_of(const std::vector<Vec3>& v) {
  Raster r(static_cast<int>(v.size()), 1, 3);
  for (std::size_t i = 0; i < v.size(); ++i)
    for (int c = 0; c < 3; ++c) r.data[3 * i + c] = v[i](c);
  return r;
}

}  // namespace

TEST_CASE("depth and normals of an analytic sphere") {
  const CameraModel cam = testing::test_camera(33);
  const auto ground = testing::test_ground();
  const Vec3 centre(0, 0, -0.1);  // on the optical axis
  const AnalyticSdf sphere = AnalyticSdf::sphere(centre, 0.3);
  const GeometryRender g = render_depth_normal(sphere, cam, ground);
  REQUIRE(g.depth.valid.at(16, 16) == 1.0);
  CHECK(g.depth.t.at(16, 16) == doctest::Approx((cam.center() - centre).norm() - 0.3).epsilon(1e-6));

  // normals at the silhouette are perpendicular to the view up to the pixel size
  int edge = 0;
  for (int y = 1; y < 32; ++y)
    for (int x = 1; x < 32; ++x) {
      if (g.depth.valid.at(x, y) != 1.0) continue;
      const bool border = g.depth.valid.at(x - 1, y) != 1.0 || g.depth.valid.at(x + 1, y) != 1.0 ||
                          g.depth.valid.at(x, y - 1) != 1.0 || g.depth.valid.at(x, y + 1) != 1.0;
      if (!border) continue;
      ++edge;
      const Vec3 n(g.normals.at(x, y, 0), g.normals.at(x, y, 1), g.normals.at(x, y, 2));
      // a pixel centre lies at most ~0.7 px inside the rim: |n . v| <= sqrt(2 * 0.7 px / r)
      const double px = 0.3 * cam.pixel_angle() * (cam.center() - centre).norm() / 0.3;
      CHECK(std::abs(n.dot(cam.pixel_direction(x, y))) < std::sqrt(2.0 * 0.75 * px / 0.3) + 0.05);
    }
  CHECK(edge > 20);
}

TEST_CASE("rendering the true scene reproduces the oracle depth") {
  const scenes::Scene s = scenes::builtin_scene("sphere-plane", 48);
  const GeometryRender ours = render_depth_normal(s.object, s.camera, s.ground);
  const GeometryRender oracle = oracle_depth_normal(s);
  int n = 0;
  for (std::size_t i = 0; i < oracle.depth.t.data.size(); ++i) {
    if (ours.depth.valid.data[i] != 1.0 || oracle.depth.valid.data[i] != 1.0) continue;
    ++n;
    CHECK(std::abs(ours.depth.t.data[i] - oracle.depth.t.data[i]) < 1e-3);
  }
  CHECK(n > 150);
  const DepthError e = depth_l1(ours.depth, oracle.depth);
  CHECK(e.aligned < 1e-4);
  Raster fg = interior_mask({&ours.depth.valid, &oracle.depth.valid});
  for (std::size_t i = 0; i < fg.data.size(); ++i) fg.data[i] *= oracle.depth.valid.data[i];
  CHECK(normal_mae(ours.normals, oracle.normals, fg) < 0.5);
}

TEST_CASE("depth L1 with and without alignment") {
  std::mt19937_64 rng(2);
  std::vector<double> t(50);
  for (auto& v : t) v = 2.5 + std::abs(random_matrix(rng, 1, 1)(0));
  const DepthMap gt = depth_from(t);
  CHECK(depth_l1(gt, gt).aligned == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(depth_l1(gt, gt).unaligned == 0.0);

  std::vector<double> doubled(t);
  for (auto& v : doubled) v *= 2.0;
  const DepthError e = depth_l1(depth_from(doubled), gt);
  CHECK(e.aligned < 1e-12);
  CHECK(e.unaligned > 1.0);
  CHECK(e.scale == doctest::Approx(0.5));

  // affine invariance for a noisy prediction
  std::vector<double> noisy(t), affine(t);
  for (std::size_t i = 0; i < t.size(); ++i) {
    noisy[i] = t[i] + 0.05 * random_matrix(rng, 1, 1)(0);
    affine[i] = 3.0 * noisy[i] + 0.7;
  }
  CHECK(depth_l1(depth_from(affine), gt).aligned ==
        doctest::Approx(depth_l1(depth_from(noisy), gt).aligned).epsilon(1e-9));

  DepthMap none = gt;
  std::fill(none.valid.data.begin(), none.valid.data.end(), 0.0);
  CHECK_THROWS_AS(depth_l1(none, gt), std::invalid_argument);
}

TEST_CASE("normal angular error") {
  const Vec3 a = Vec3(1, 2, 3).normalized();
  const Vec3 b = Vec3(-2, 1, 0).normalized();  // orthogonal to a
  const Raster mask(1, 1, 1, 1.0);
  CHECK(normal_mae(normals_of({a}), normals_of({a}), mask) == doctest::Approx(0.0).epsilon(1e-6));
  CHECK(normal_mae(normals_of({a}), normals_of({Vec3(-a)}), mask) == doctest::Approx(180.0));
  CHECK(normal_mae(normals_of({a}), normals_of({b}), mask) == doctest::Approx(90.0));

  std::mt19937_64 rng(8);
  std::vector<Vec3> p, q;
  for (int i = 0; i < 40; ++i) {
    p.push_back(Vec3(random_matrix(rng, 3, 1)).normalized());
    q.push_back(Vec3(random_matrix(rng, 3, 1)).normalized());
  }
  const Raster m(40, 1, 1, 1.0);
  const double e = normal_mae(normals_of(p), normals_of(q), m);
  CHECK(e >= 0.0);
  CHECK(e <= 180.0);
  CHECK(e == doctest::Approx(normal_mae(normals_of(q), normals_of(p), m)));
}

TEST_CASE("mesh extraction of a sphere") {
  const AnalyticSdf sphere = AnalyticSdf::sphere(Vec3::Zero(), 0.5);
  const Mesh m = extract_mesh(sphere, 128);
  REQUIRE_FALSE(m.empty());
  const double diag = std::sqrt(3.0) * 2.0 / 128;
  double worst = 0.0;
  for (Eigen::Index i = 0; i < m.vertices.rows(); ++i) {
    const Vec3 v = m.vertices.row(i).transpose();
    worst = std::max(worst, std::abs(v.norm() - 0.5));
    CHECK(std::abs(sphere.distance(v)) < diag);
  }
  MESSAGE("max radius error " << worst);
  CHECK(worst < 0.01);
  int outward = 0;
  for (Eigen::Index t = 0; t < m.triangles.rows(); ++t) {
    for (int c = 0; c < 3; ++c) {
      CHECK(m.triangles(t, c) >= 0);
      CHECK(m.triangles(t, c) < m.vertices.rows());
    }
    const Vec3 a = m.vertices.row(m.triangles(t, 0)).transpose();
    const Vec3 b = m.vertices.row(m.triangles(t, 1)).transpose();
    const Vec3 c = m.vertices.row(m.triangles(t, 2)).transpose();
    const Vec3 n = (b - a).cross(c - a);
    CHECK(0.5 * n.norm() > 1e-12);
    outward += n.dot(a + b + c) > 0.0;
  }
  CHECK(outward == m.triangles.rows());
  CHECK((m.normals.rowwise().norm().array() - 1.0).abs().maxCoeff() < 1e-9);
}

TEST_CASE("mesh extraction: plane, empty field, bad resolution") {
  const Mesh plane = extract_mesh(AnalyticSdf::plane(Vec3::UnitZ(), 0.1), 32);
  REQUIRE_FALSE(plane.empty());
  CHECK((plane.vertices.col(2).array() - 0.1).abs().maxCoeff() < 1e-12);
  CHECK(plane.vertices.cwiseAbs().maxCoeff() <= 1.0);
  CHECK(extract_mesh(AnalyticSdf::sphere(Vec3(5, 5, 5), 0.1), 16).empty());
  CHECK_THROWS_AS(extract_mesh(AnalyticSdf::sphere(Vec3::Zero(), 0.5), 8), std::invalid_argument);
}

TEST_CASE("OBJ round trip") {
  const Mesh m = extract_mesh(AnalyticSdf::box(Vec3(0.1, 0, 0), Vec3(0.3, 0.2, 0.25)), 24);
  const fs::path p = fs::temp_directory_path() / "shadowray_mesh.obj";
  write_obj(p.string(), m);
  const Mesh back = read_obj(p.string());
  REQUIRE(back.vertices.rows() == m.vertices.rows());
  CHECK(back.triangles == m.triangles);
  CHECK((back.vertices - m.vertices).cwiseAbs().maxCoeff() < 1e-8);
  CHECK((back.normals - m.normals).cwiseAbs().maxCoeff() < 1e-8);
  CHECK_THROWS(read_obj((fs::temp_directory_path() / "shadowray_none.obj").string()));
}

TEST_CASE("point to mesh distance") {
  Mesh tri;
  tri.vertices.resize(3, 3);
  tri.vertices << 0, 0, 0, 1, 0, 0, 0, 1, 0;
  tri.triangles.resize(1, 3);
  tri.triangles << 0, 1, 2;
  CHECK(distance_to_mesh(tri, Vec3(0.2, 0.2, 0.5)) == doctest::Approx(0.5));
  CHECK(distance_to_mesh(tri, Vec3(-1, 0, 0)) == doctest::Approx(1.0));
  CHECK(distance_to_mesh(tri, Vec3(1, 1, 0)) == doctest::Approx(std::sqrt(0.5)));
  CHECK(std::isinf(distance_to_mesh(Mesh{}, Vec3::Zero())));
}

TEST_CASE("invisible coverage") {
  const scenes::Scene s = scenes::builtin_scene("sphere-plane", 32);
  const Mesh truth = extract_mesh(s.object, 96);
  const Coverage full = invisible_coverage(truth, s, 0.05, 500);
  CHECK(full.occluded_samples == 500);
  CHECK(full.fraction == 1.0);
  CHECK(invisible_coverage(Mesh{}, s, 0.05, 200).fraction == 0.0);
  // only the front of the sphere: the hidden back is not covered
  const Mesh front = extract_mesh(AnalyticSdf::sphere(Vec3(0, -0.3, -0.05), 0.35), 64);
  CHECK(invisible_coverage(front, s, 0.05, 300).fraction < 0.6);
  CHECK_THROWS_AS(invisible_coverage(truth, s, 0.0), std::invalid_argument);
}

TEST_CASE("relighting is linear in the light intensity") {
  trainer::TrainConfig c;
  c.mode = shading::Supervision::Rgb;
  c.sdf.width = 16;
  c.sdf.depth = 4;
  c.sdf.frequencies = 2;
  c.sdf.feature_size = 4;
  c.material.width = 8;
  c.material.depth = 2;
  const trainer::Model model = trainer::make_model(c);
  const CameraModel cam = testing::test_camera(16);
  const auto ground = testing::test_ground();
  RenderOptions opt;
  opt.march_steps = 64;
  const Raster one = relight(model, cam, ground, shadow::LightSource::point(Vec3(0.5, -1, 2), 4.0), opt);
  const Raster two = relight(model, cam, ground, shadow::LightSource::point(Vec3(0.5, -1, 2), 8.0), opt);
  int lit = 0;
  for (std::size_t i = 0; i < one.data.size(); ++i) {
    CHECK(two.data[i] == doctest::Approx(2.0 * one.data[i]).epsilon(1e-12));
    lit += one.data[i] > 1e-3;
  }
  CHECK(lit > 100);

  const Raster albedo = render_albedo(model, cam, ground, 64);
  for (const double a : albedo.data)
    if (std::isfinite(a)) CHECK(a >= 0.0);
  trainer::TrainConfig sc = c;
  sc.mode = shading::Supervision::Shadow;
  CHECK_THROWS_AS(relight(trainer::make_model(sc), cam, ground, shadow::LightSource::directional(Vec3::UnitZ())),
                  std::invalid_argument);
}

TEST_CASE("masks and masked errors") {
  Raster a(4, 4, 1), b(4, 4, 1);
  a.at(0, 0) = 1.0;
  const Raster m = interior_mask({&a});
  CHECK(m.at(0, 0) == 0.0);
  CHECK(m.at(1, 1) == 0.0);
  CHECK(m.at(3, 3) == 1.0);
  b.data.assign(16, 0.5);
  CHECK(masked_mean_abs(a, b, m) == doctest::Approx(0.5));
  CHECK_THROWS_AS(masked_mean_abs(a, b, Raster(4, 4, 1)), std::invalid_argument);
}

TEST_CASE("end-to-end loss gradient matches finite differences") {
  for (const auto mode : {shading::Supervision::Shadow, shading::Supervision::Rgb}) {
    const fs::path dir = fs::temp_directory_path() / ("shadowray_gc_" + shading::to_string(mode));
    fs::remove_all(dir);
    const GradientCheck g = gradient_check(mode, 4, dir.string());
    MESSAGE(shading::to_string(mode) << ": worst relative error " << g.max_relative_error << " over " << g.checked);
    CHECK(g.checked > 100);
    CHECK(g.max_relative_error < 1e-4);
  }
}
