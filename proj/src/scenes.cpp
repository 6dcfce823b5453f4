#include "shadowray/scenes.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <stdexcept>

namespace shadowray::scenes {

namespace fs = std::filesystem;
using fields::Matrix;

namespace {

constexpr double kGroundZ = -0.4;

CameraModel default_camera(int res) {
  const double el = 30.0 * std::numbers::pi / 180.0;
  const Vec3 eye(0.0, -3.0 * std::cos(el), 3.0 * std::sin(el));
  return CameraModel::look_at(eye, Vec3(0, 0, -0.1), Vec3::UnitZ(), 20.0 * std::numbers::pi / 180.0, res, res);
}

nlohmann::json vec_json(const Vec3& v) { return {v.x(), v.y(), v.z()}; }

Vec3 vec_from(const nlohmann::json& j, const std::string& what) {
  if (!j.is_array() || j.size() != 3) throw std::invalid_argument(what + " must be a 3-vector");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

const nlohmann::json& need(const nlohmann::json& j, const std::string& key, const std::string& where) {
  if (!j.is_object() || !j.contains(key))
    throw std::invalid_argument(where + ": missing field '" + key + "'");
  return j.at(key);
}

}  // namespace

AnalyticSdf Scene::full_sdf() const {
  if (ground_shape) return AnalyticSdf::make_union({object, *ground_shape});
  return AnalyticSdf::make_union({object, AnalyticSdf::plane(ground.normal, ground.offset)});
}

std::vector<std::string> builtin_scene_names() { return {"sphere-plane", "two-spheres", "box-plane", "bumpy-ground"}; }

Scene builtin_scene(const std::string& name, int resolution) {
  Scene s;
  s.name = name;
  s.ground.normal = Vec3::UnitZ();
  s.ground.offset = kGroundZ;
  s.camera = default_camera(resolution);
  if (name == "sphere-plane") {
    s.object = AnalyticSdf::sphere(Vec3(0, 0, -0.05), 0.35);
  } else if (name == "two-spheres") {
    s.object = AnalyticSdf::make_union(
        {AnalyticSdf::sphere(Vec3(-0.3, 0.1, -0.2), 0.2), AnalyticSdf::sphere(Vec3(0.25, -0.1, -0.15), 0.25)});
  } else if (name == "box-plane") {
    s.object = AnalyticSdf::box(Vec3(0, 0, -0.15), Vec3(0.25, 0.25, 0.25));
  } else if (name == "bumpy-ground") {
    s.object = AnalyticSdf::sphere(Vec3(0, 0, -0.05), 0.35);
    std::vector<AnalyticSdf> parts{AnalyticSdf::plane(Vec3::UnitZ(), kGroundZ)};
    for (const auto& [x, y] : {std::pair{0.55, 0.1}, {-0.5, -0.3}, {0.2, -0.55}, {-0.35, 0.5}, {0.6, -0.45}})
      parts.push_back(AnalyticSdf::sphere(Vec3(x, y, kGroundZ - 0.12), 0.16));
    s.ground_shape = AnalyticSdf::make_union(std::move(parts));
  } else {
    std::string known;
    for (const auto& n : builtin_scene_names()) known += (known.empty() ? "" : ", ") + n;
    throw std::invalid_argument("unknown scene '" + name + "' (known: " + known + ")");
  }
  return s;
}

nlohmann::json scene_to_json(const Scene& scene) {
  nlohmann::json j{{"name", scene.name},
                   {"object", scene.object.to_json()},
                   {"ground", {{"normal", vec_json(scene.ground.normal)}, {"offset", scene.ground.offset}}},
                   {"object_albedo", vec_json(scene.object_albedo)},
                   {"ground_albedo", vec_json(scene.ground_albedo)},
                   {"object_specular", std::vector<double>(scene.object_specular.data(),
                                                           scene.object_specular.data() + 27)},
                   {"camera", scene.camera.to_json()}};
  if (scene.ground_shape) j["ground_shape"] = scene.ground_shape->to_json();
  return j;
}

Scene scene_from_json(const nlohmann::json& j) {
  Scene s;
  s.name = need(j, "name", "scene").get<std::string>();
  s.object = AnalyticSdf::from_json(need(j, "object", "scene"));
  const auto& g = need(j, "ground", "scene");
  s.ground.normal = vec_from(need(g, "normal", "scene.ground"), "scene.ground.normal");
  s.ground.offset = need(g, "offset", "scene.ground").get<double>();
  s.object_albedo = vec_from(need(j, "object_albedo", "scene"), "scene.object_albedo");
  s.ground_albedo = vec_from(need(j, "ground_albedo", "scene"), "scene.ground_albedo");
  if (j.contains("object_specular")) {
    const auto v = j.at("object_specular").get<std::vector<double>>();
    if (v.size() != 27) throw std::invalid_argument("scene.object_specular must have 27 entries");
    for (int i = 0; i < 27; ++i) s.object_specular(i) = v[i];
  }
  s.camera = CameraModel::from_json(need(j, "camera", "scene"));
  if (j.contains("ground_shape")) s.ground_shape = AnalyticSdf::from_json(j.at("ground_shape"));
  return s;
}

// ---- oracle ------------------------------------------------------------------------

namespace {

double trace_limit(const Scene& scene, const Vec3& origin, const Vec3& dir) {
  if (const auto t = scene.ground.intersect(origin, dir)) return *t + 1e-3;
  return 20.0;
}

OracleHit trace_with(const AnalyticSdf& sdf, const Scene& scene, const Vec3& origin, const Vec3& dir) {
  constexpr int kSteps = 4096;
  const double t_max = trace_limit(scene, origin, dir);
  Matrix pts(kSteps + 1, 3);
  for (int i = 0; i <= kSteps; ++i) pts.row(i) = (origin + (t_max * i / kSteps) * dir).transpose();
  const Eigen::VectorXd f = sdf.eval(pts);
  OracleHit h;
  for (int i = 0; i < kSteps; ++i) {
    if (!(f(i) > 0.0 && f(i + 1) <= 0.0)) continue;
    double a = t_max * i / kSteps, b = t_max * (i + 1) / kSteps;
    for (int k = 0; k < 60; ++k) {
      const double m = 0.5 * (a + b);
      (sdf.distance(origin + m * dir) > 0.0 ? a : b) = m;
    }
    h.valid = true;
    h.t = 0.5 * (a + b);
    h.x = origin + h.t * dir;
    return h;
  }
  return h;
}

Vec3 fd_normal(const AnalyticSdf& sdf, const Vec3& x) {
  constexpr double e = 1e-6;
  Vec3 g;
  for (int k = 0; k < 3; ++k) {
    Vec3 d = Vec3::Zero();
    d(k) = e;
    g(k) = sdf.distance(x + d) - sdf.distance(x - d);
  }
  return g.normalized();
}

}  // namespace

OracleHit oracle_trace(const Scene& scene, const Vec3& origin, const Vec3& dir) {
  const AnalyticSdf full = scene.full_sdf();
  OracleHit h = trace_with(full, scene, origin, dir);
  if (!h.valid) return h;
  const double fo = std::abs(scene.object.distance(h.x));
  const double fg = scene.ground_shape ? std::abs(scene.ground_shape->distance(h.x))
                                       : std::abs(scene.ground.distance(h.x));
  h.object = fo <= fg;
  if (h.object)
    h.n = fd_normal(scene.object, h.x);
  else
    h.n = scene.ground_shape ? fd_normal(*scene.ground_shape, h.x) : scene.ground.normal.normalized();
  return h;
}

bool oracle_visible(const Scene& scene, const Vec3& x, const Vec3& n, const LightSource& light) {
  const AnalyticSdf full = scene.full_sdf();
  Vec3 l;
  double limit;
  if (light.kind == LightSource::Kind::Directional) {
    l = light.direction;
    limit = std::numeric_limits<double>::infinity();
  } else {
    const Vec3 d = light.position - x;
    l = d.normalized();
    limit = d.norm();
  }
  const Vec3 start = x + 1e-4 * n;
  double t = 0.0;
  for (int i = 0; i < 200000; ++i) {
    const Vec3 p = start + t * l;
    const double d = full.distance(p);
    if (d < 1e-7) return false;
    t += d;
    if (t >= limit) return true;
    // leaving the scene upward: nothing left to hit
    const Vec3 q = start + t * l;
    if (q.norm() > 2.0 && q.dot(l) > 0.0 && l.dot(scene.ground.normal) >= 0.0) return true;
  }
  return false;
}

OracleGeometry oracle_geometry(const Scene& scene) {
  const CameraModel& cam = scene.camera;
  OracleGeometry g;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  g.depth = Raster(cam.width, cam.height, 1, nan);
  g.normals = Raster(cam.width, cam.height, 3);
  g.object = Raster(cam.width, cam.height, 1);
  g.ground_depth = Raster(cam.width, cam.height, 1, nan);
  const AnalyticSdf ground_only =
      scene.ground_shape ? *scene.ground_shape : AnalyticSdf::plane(scene.ground.normal, scene.ground.offset);
  for (int y = 0; y < cam.height; ++y)
    for (int x = 0; x < cam.width; ++x) {
      const Vec3 o = cam.center();
      const Vec3 d = cam.pixel_direction(x, y);
      const OracleHit h = oracle_trace(scene, o, d);
      if (h.valid) {
        g.depth.at(x, y) = h.t;
        for (int c = 0; c < 3; ++c) g.normals.at(x, y, c) = h.n(c);
        g.object.at(x, y) = h.object ? 1.0 : 0.0;
      }
      if (scene.ground_shape) {
        const OracleHit gh = trace_with(ground_only, scene, o, d);
        if (gh.valid) g.ground_depth.at(x, y) = gh.t;
      } else if (const auto t = scene.ground.intersect(o, d)) {
        g.ground_depth.at(x, y) = *t;
      }
    }
  return g;
}

namespace {

struct PixelHit {
  OracleHit hit;
  Vec3 dir;
};

std::vector<PixelHit> trace_image(const Scene& scene) {
  const CameraModel& cam = scene.camera;
  std::vector<PixelHit> out;
  out.reserve(static_cast<std::size_t>(cam.width) * cam.height);
  for (int y = 0; y < cam.height; ++y)
    for (int x = 0; x < cam.width; ++x) {
      const Vec3 d = cam.pixel_direction(x, y);
      out.push_back({oracle_trace(scene, cam.center(), d), d});
    }
  return out;
}

Raster shade(const Scene& scene, const std::vector<PixelHit>& hits, const std::vector<LightSource>& lights,
             Supervision type) {
  const CameraModel& cam = scene.camera;
  Raster img(cam.width, cam.height, type == Supervision::Shadow ? 1 : 3);
  for (int y = 0; y < cam.height; ++y)
    for (int x = 0; x < cam.width; ++x) {
      const PixelHit& ph = hits[static_cast<std::size_t>(y) * cam.width + x];
      if (!ph.hit.valid) continue;
      for (const LightSource& light : lights) {
        if (!oracle_visible(scene, ph.hit.x, ph.hit.n, light)) continue;
        if (type == Supervision::Shadow) {
          img.at(x, y) += light.intensity;
          continue;
        }
        shading::ShadingSample s;
        const auto ls = shadow::light_at(light, ph.hit.x, true);
        s.n = ph.hit.n;
        s.v = ph.dir;
        s.l = ls.l;
        s.c_in = ls.L;
        s.albedo = ph.hit.object ? scene.object_albedo : scene.ground_albedo;
        if (ph.hit.object) s.y = scene.object_specular;
        const Vec3 c = shading::render_outgoing(s);
        for (int k = 0; k < 3; ++k) img.at(x, y, k) += c(k);
      }
    }
  return img;
}

}  // namespace

Raster oracle_render(const Scene& scene, const std::vector<LightSource>& lights, Supervision type) {
  return shade(scene, trace_image(scene), lights, type);
}

// ---- datasets ------------------------------------------------------------------------

std::vector<LightSource> sample_lights(int count, bool point, double radius, std::uint64_t seed) {
  if (count < 1) throw std::invalid_argument("need at least one light");
  std::mt19937_64 rng(seed);
  auto uniform = [&] { return static_cast<double>(rng() >> 11) * 0x1.0p-53; };
  std::vector<LightSource> out;
  for (int i = 0; i < count; ++i) {
    const double z = 1.0 - uniform();  // (0, 1]
    const double phi = 2.0 * std::numbers::pi * uniform();
    const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
    const Vec3 d(r * std::cos(phi), r * std::sin(phi), z);
    out.push_back(point ? LightSource::point(radius * d, radius * radius) : LightSource::directional(d));
  }
  return out;
}

namespace {

nlohmann::json ground_json(const GroundPlane& g, bool with_depth) {
  nlohmann::json j{{"normal", vec_json(g.normal)}, {"offset", g.offset}};
  if (with_depth) j["depth"] = "ground_depth.pfm";
  return j;
}

}  // namespace

SceneDataset generate_dataset(const GenerateOptions& opt, const std::string& dir) {
  if (opt.lights < 1) throw std::invalid_argument("gen-data: --lights must be >= 1");
  if (opt.lights_per_image < 1) throw std::invalid_argument("gen-data: lights per image must be >= 1");
  if (opt.resolution < 8) throw std::invalid_argument("gen-data: resolution must be >= 8");
  const Scene scene = builtin_scene(opt.scene, opt.resolution);

  std::error_code ec;
  fs::create_directories(fs::path(dir) / "images", ec);
  if (ec) throw std::runtime_error("cannot create '" + (fs::path(dir) / "images").string() + "': " + ec.message());

  SceneDataset ds;
  ds.scene = scene.name;
  ds.type = opt.type;
  ds.camera = scene.camera;
  ds.ground = scene.ground;
  ds.falloff = opt.type == Supervision::Rgb;
  ds.ground_truth = scene_to_json(scene);

  const std::vector<PixelHit> hits = trace_image(scene);
  const auto all = sample_lights(opt.lights * opt.lights_per_image, opt.point_lights, opt.point_radius, opt.seed);
  nlohmann::json images = nlohmann::json::array();
  for (int i = 0; i < opt.lights; ++i) {
    DatasetImage im;
    for (int k = 0; k < opt.lights_per_image; ++k) {
      LightSource l = all[static_cast<std::size_t>(i * opt.lights_per_image + k)];
      if (opt.type == Supervision::Shadow) l.intensity = 1.0 / opt.lights_per_image;
      im.lights.push_back(l);
    }
    // 8-bit PNG only for 0/1 masks; fractional sums of several lights go to PFM
    const bool png = opt.type == Supervision::Shadow && opt.lights_per_image == 1;
    char name[32];
    std::snprintf(name, sizeof name, "images/%03d.%s", i, png ? "png" : "pfm");
    im.file = name;
    im.raster = shade(scene, hits, im.lights, opt.type);
    const std::string path = (fs::path(dir) / im.file).string();
    if (png)
      write_png(path, im.raster, false);
    else
      write_pfm(path, im.raster);
    nlohmann::json lj = nlohmann::json::array();
    for (const auto& l : im.lights) lj.push_back(l.to_json());
    images.push_back({{"file", im.file}, {"lights", lj}});
    ds.images.push_back(std::move(im));
  }

  if (!scene.planar_ground()) {
    const std::string p = (fs::path(dir) / "ground_depth.pfm").string();
    write_pfm(p, oracle_geometry(scene).ground_depth);
    const Raster r = read_pfm(p);  // what the loader will see
    Matrix depth(r.height, r.width);
    for (int y = 0; y < r.height; ++y)
      for (int x = 0; x < r.width; ++x) depth(y, x) = r.at(x, y);
    ds.ground.depth = std::move(depth);
  }

  const nlohmann::json manifest{{"format", "shadowray-dataset"},
                                {"version", kManifestVersion},
                                {"scene", scene.name},
                                {"type", shading::to_string(opt.type)},
                                {"falloff", ds.falloff},
                                {"seed", opt.seed},
                                {"camera", scene.camera.to_json()},
                                {"ground", ground_json(scene.ground, !scene.planar_ground())},
                                {"images", images},
                                {"ground_truth", ds.ground_truth}};
  const std::string mpath = (fs::path(dir) / "manifest.json").string();
  std::ofstream f(mpath);
  if (!f) throw std::runtime_error("cannot write '" + mpath + "'");
  f << manifest.dump(2) << "\n";
  if (!f) throw std::runtime_error("error writing '" + mpath + "'");
  return ds;
}

SceneDataset load_dataset(const std::string& dir) {
  const fs::path mpath = fs::path(dir) / "manifest.json";
  if (!fs::exists(mpath)) throw std::invalid_argument("dataset: no manifest at '" + mpath.string() + "'");
  nlohmann::json m;
  {
    std::ifstream f(mpath);
    try {
      m = nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception& e) {
      throw std::invalid_argument("dataset: cannot parse '" + mpath.string() + "': " + e.what());
    }
  }
  const std::string where = "manifest";
  try {
    if (need(m, "format", where).get<std::string>() != "shadowray-dataset")
      throw std::invalid_argument("manifest: field 'format' is not 'shadowray-dataset'");
    const int version = need(m, "version", where).get<int>();
    if (version != kManifestVersion)
      throw std::invalid_argument("manifest: unsupported version " + std::to_string(version));
    SceneDataset ds;
    ds.scene = need(m, "scene", where).get<std::string>();
    ds.type = shading::supervision_from_string(need(m, "type", where).get<std::string>());
    ds.falloff = need(m, "falloff", where).get<bool>();
    try {
      ds.camera = CameraModel::from_json(need(m, "camera", where));
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(std::string("manifest: field 'camera': ") + e.what());
    }
    const auto& g = need(m, "ground", where);
    ds.ground.normal = vec_from(need(g, "normal", "manifest.ground"), "manifest.ground.normal");
    ds.ground.offset = need(g, "offset", "manifest.ground").get<double>();
    if (g.contains("depth")) {
      const fs::path p = fs::path(dir) / g.at("depth").get<std::string>();
      if (!fs::exists(p)) throw std::invalid_argument("dataset: missing ground depth raster '" + p.string() + "'");
      const Raster r = read_pfm(p.string());
      if (r.width != ds.camera.width || r.height != ds.camera.height || r.channels != 1)
        throw std::invalid_argument("dataset: ground depth '" + p.string() + "' does not match the camera");
      Matrix d(r.height, r.width);
      for (int y = 0; y < r.height; ++y)
        for (int x = 0; x < r.width; ++x) d(y, x) = r.at(x, y);
      ds.ground.depth = std::move(d);
    }
    ds.ground.validate();
    if (m.contains("ground_truth")) ds.ground_truth = m.at("ground_truth");

    const auto& images = need(m, "images", where);
    if (!images.is_array() || images.empty()) throw std::invalid_argument("manifest: field 'images' must be a non-empty array");
    for (std::size_t i = 0; i < images.size(); ++i) {
      const std::string w = "manifest.images[" + std::to_string(i) + "]";
      DatasetImage im;
      im.file = need(images[i], "file", w).get<std::string>();
      const auto& lj = need(images[i], "lights", w);
      if (!lj.is_array() || lj.empty()) throw std::invalid_argument(w + ": field 'lights' must be a non-empty array");
      for (const auto& l : lj) {
        try {
          im.lights.push_back(LightSource::from_json(l));
        } catch (const std::invalid_argument& e) {
          throw std::invalid_argument(w + ".lights: " + e.what());
        }
      }
      const fs::path p = fs::path(dir) / im.file;
      if (!fs::exists(p)) throw std::invalid_argument("dataset: missing image '" + p.string() + "'");
      const bool pfm = p.extension() == ".pfm";
      try {
        im.raster = pfm ? read_pfm(p.string()) : read_png(p.string(), ds.type == Supervision::Rgb);
      } catch (const std::runtime_error& e) {
        throw std::invalid_argument(std::string("dataset: ") + e.what());
      }
      if (im.raster.width != ds.camera.width || im.raster.height != ds.camera.height)
        throw std::invalid_argument("dataset: image '" + p.string() + "' is " + std::to_string(im.raster.width) +
                                    "x" + std::to_string(im.raster.height) + ", camera is " +
                                    std::to_string(ds.camera.width) + "x" + std::to_string(ds.camera.height));
      const int want = ds.type == Supervision::Shadow ? 1 : 3;
      if (im.raster.channels != want)
        throw std::invalid_argument("dataset: image '" + p.string() + "' has " + std::to_string(im.raster.channels) +
                                    " channels, expected " + std::to_string(want));
      if (ds.type == Supervision::Shadow) {
        // values must be multiples of the per-light intensity
        const double k = static_cast<double>(im.lights.size());
        for (const double v : im.raster.data)
          if (std::abs(v * k - std::round(v * k)) > 1e-3 * k || v < -1e-3 || v > 1.0 + 1e-3)
            throw std::invalid_argument("dataset: binary image '" + p.string() + "' has value " + std::to_string(v) +
                                        " outside {0, 1}");
      }
      ds.images.push_back(std::move(im));
    }
    return ds;
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("manifest '" + mpath.string() + "': " + e.what());
  }
}

}  // namespace shadowray::scenes
