#include "shadowray/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

namespace shadowray::evaluate {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr int kChunk = 1024;

std::vector<Vec2> pixel_centres(const CameraModel& cam) {
  std::vector<Vec2> px;
  px.reserve(static_cast<std::size_t>(cam.width) * cam.height);
  for (int y = 0; y < cam.height; ++y)
    for (int x = 0; x < cam.width; ++x) px.emplace_back(x + 0.5, y + 0.5);
  return px;
}

std::vector<raycast::MarchTrace> trace_all(const fields::SdfField& field, const CameraModel& cam,
                                           const fields::GroundPlane& ground, int steps) {
  raycast::RayContext ctx;
  ctx.field = &field;
  ctx.camera = &cam;
  ctx.ground = &ground;
  ctx.options.steps = steps;
  return ctx.trace(pixel_centres(cam));
}

}  // namespace

int DepthMap::count() const {
  return static_cast<int>(std::count(valid.data.begin(), valid.data.end(), 1.0));
}

GeometryRender render_depth_normal(const fields::SdfField& object, const CameraModel& cam,
                                   const fields::GroundPlane& ground, int march_steps) {
  const auto tr = trace_all(object, cam, ground, march_steps);
  GeometryRender g;
  g.depth.t = Raster(cam.width, cam.height, 1, kNaN);
  g.depth.valid = Raster(cam.width, cam.height, 1);
  g.normals = Raster(cam.width, cam.height, 3);
  g.points = Raster(cam.width, cam.height, 3, kNaN);
  g.hit = Raster(cam.width, cam.height, 1);
  std::vector<int> fg;
  for (int i = 0; i < cam.width * cam.height; ++i) {
    const auto& h = tr[static_cast<std::size_t>(i)].hit;
    if (!h.valid) continue;
    g.hit.data[i] = 1.0;
    for (int c = 0; c < 3; ++c) g.points.data[3 * i + c] = h.x(c);
    if (h.hit_object()) {
      g.depth.t.data[i] = h.t;
      g.depth.valid.data[i] = 1.0;
      fg.push_back(i);
    }
  }
  Matrix pts(static_cast<Eigen::Index>(fg.size()), 3);
  for (std::size_t k = 0; k < fg.size(); ++k)
    pts.row(static_cast<Eigen::Index>(k)) = tr[static_cast<std::size_t>(fg[k])].hit.x.transpose();
  const Matrix n = fields::normal(object, pts);
  for (std::size_t k = 0; k < fg.size(); ++k)
    for (int c = 0; c < 3; ++c) g.normals.data[3 * fg[k] + c] = n(static_cast<Eigen::Index>(k), c);
  return g;
}

GeometryRender oracle_depth_normal(const scenes::Scene& scene) {
  const auto o = scenes::oracle_geometry(scene);
  const CameraModel& cam = scene.camera;
  GeometryRender g;
  g.depth.t = Raster(cam.width, cam.height, 1, kNaN);
  g.depth.valid = o.object;
  g.normals = Raster(cam.width, cam.height, 3);
  g.points = Raster(cam.width, cam.height, 3, kNaN);
  g.hit = Raster(cam.width, cam.height, 1);
  for (int y = 0; y < cam.height; ++y)
    for (int x = 0; x < cam.width; ++x) {
      const double t = o.depth.at(x, y);
      if (!std::isfinite(t)) continue;
      g.hit.at(x, y) = 1.0;
      const Vec3 p = cam.center() + t * cam.pixel_direction(x, y);
      for (int c = 0; c < 3; ++c) g.points.at(x, y, c) = p(c);
      if (o.object.at(x, y) == 1.0) {
        g.depth.t.at(x, y) = t;
        for (int c = 0; c < 3; ++c) g.normals.at(x, y, c) = o.normals.at(x, y, c);
      }
    }
  return g;
}

DepthError depth_l1(const DepthMap& pred, const DepthMap& gt) {
  if (pred.t.width != gt.t.width || pred.t.height != gt.t.height)
    throw std::invalid_argument("depth_l1: depth maps differ in size");
  std::vector<std::pair<double, double>> v;
  for (std::size_t i = 0; i < gt.t.data.size(); ++i)
    if (pred.valid.data[i] == 1.0 && gt.valid.data[i] == 1.0) v.emplace_back(pred.t.data[i], gt.t.data[i]);
  if (v.empty()) throw std::invalid_argument("depth_l1: the predicted and true foregrounds do not overlap");
  DepthError e;
  e.count = static_cast<int>(v.size());
  Eigen::MatrixX2d A(e.count, 2);
  Eigen::VectorXd b(e.count);
  for (int i = 0; i < e.count; ++i) {
    A(i, 0) = v[static_cast<std::size_t>(i)].first;
    A(i, 1) = 1.0;
    b(i) = v[static_cast<std::size_t>(i)].second;
  }
  const Eigen::Vector2d sol = A.colPivHouseholderQr().solve(b);
  e.scale = sol(0);
  e.offset = sol(1);
  e.aligned = (A * sol - b).cwiseAbs().mean();
  e.unaligned = (A.col(0) - b).cwiseAbs().mean();
  return e;
}

double normal_mae(const Raster& pred, const Raster& gt, const Raster& mask) {
  double sum = 0.0;
  int n = 0;
  for (std::size_t i = 0; i < mask.data.size(); ++i) {
    if (mask.data[i] != 1.0) continue;
    const Vec3 a(pred.data[3 * i], pred.data[3 * i + 1], pred.data[3 * i + 2]);
    const Vec3 b(gt.data[3 * i], gt.data[3 * i + 1], gt.data[3 * i + 2]);
    sum += std::acos(std::clamp(a.dot(b), -1.0, 1.0));
    ++n;
  }
  if (n == 0) throw std::invalid_argument("normal_mae: empty mask");
  return sum / n * 180.0 / std::numbers::pi;
}

// ---- meshes -------------------------------------------------------------------------------------

Mesh extract_mesh(const fields::SdfField& field, int res) {
  if (res < 16) throw std::invalid_argument("extract_mesh: resolution must be >= 16");
  const int n = res + 1;
  const double h = 2.0 / res;
  auto gid = [n](int i, int j, int k) { return static_cast<std::int64_t>(i) + n * (j + static_cast<std::int64_t>(n) * k); };
  auto pos = [h](int i, int j, int k) { return Vec3(-1.0 + i * h, -1.0 + j * h, -1.0 + k * h); };

  // values, one z slab at a time
  std::vector<double> f(static_cast<std::size_t>(n) * n * n);
  Matrix slab(static_cast<Eigen::Index>(n) * n, 3);
  for (int k = 0; k < n; ++k) {
    for (int j = 0; j < n; ++j)
      for (int i = 0; i < n; ++i) slab.row(j * n + i) = pos(i, j, k).transpose();
    const Eigen::VectorXd v = field.eval(slab);
    std::copy(v.data(), v.data() + v.size(), f.begin() + static_cast<std::ptrdiff_t>(k) * n * n);
  }

  std::vector<Vec3> verts;
  std::vector<Eigen::Vector3i> tris;
  std::unordered_map<std::int64_t, int> edge_vertex;
  const std::int64_t total = static_cast<std::int64_t>(n) * n * n;
  auto vertex_on = [&](std::int64_t a, std::int64_t b, const Vec3& pa, const Vec3& pb) {
    if (a > b) return -1;  // callers pass ordered pairs
    const std::int64_t key = a * total + b;
    auto it = edge_vertex.find(key);
    if (it != edge_vertex.end()) return it->second;
    const double fa = f[static_cast<std::size_t>(a)], fb = f[static_cast<std::size_t>(b)];
    const double t = fa / (fa - fb);
    verts.push_back(pa + t * (pb - pa));
    const int id = static_cast<int>(verts.size()) - 1;
    edge_vertex.emplace(key, id);
    return id;
  };

  static constexpr int kTets[6][4] = {{0, 1, 3, 7}, {0, 3, 2, 7}, {0, 2, 6, 7},
                                      {0, 6, 4, 7}, {0, 4, 5, 7}, {0, 5, 1, 7}};
  for (int k = 0; k < res; ++k)
    for (int j = 0; j < res; ++j)
      for (int i = 0; i < res; ++i) {
        std::int64_t id[8];
        Vec3 p[8];
        double v[8];
        bool any_in = false, any_out = false;
        for (int c = 0; c < 8; ++c) {
          const int di = c & 1, dj = (c >> 1) & 1, dk = (c >> 2) & 1;
          id[c] = gid(i + di, j + dj, k + dk);
          p[c] = pos(i + di, j + dj, k + dk);
          v[c] = f[static_cast<std::size_t>(id[c])];
          (v[c] < 0.0 ? any_in : any_out) = true;
        }
        if (!any_in || !any_out) continue;
        for (const auto& tet : kTets) {
          std::vector<int> in, out;
          for (const int c : tet) (v[c] < 0.0 ? in : out).push_back(c);
          if (in.empty() || out.empty()) continue;
          auto edge = [&](int a, int b) {
            return id[a] < id[b] ? vertex_on(id[a], id[b], p[a], p[b]) : vertex_on(id[b], id[a], p[b], p[a]);
          };
          Vec3 outward = Vec3::Zero();
          for (const int c : out) outward += p[c] / static_cast<double>(out.size());
          for (const int c : in) outward -= p[c] / static_cast<double>(in.size());
          auto emit = [&](int a, int b, int c) {
            const Vec3 nrm = (verts[b] - verts[a]).cross(verts[c] - verts[a]);
            if (0.5 * nrm.norm() <= 1e-12) return;
            if (nrm.dot(outward) < 0.0) std::swap(b, c);
            tris.emplace_back(a, b, c);
          };
          if (in.size() == 1 || out.size() == 1) {
            const bool single_in = in.size() == 1;
            const int apex = single_in ? in[0] : out[0];
            const auto& others = single_in ? out : in;
            emit(edge(apex, others[0]), edge(apex, others[1]), edge(apex, others[2]));
          } else {
            const int a = edge(in[0], out[0]), b = edge(in[0], out[1]), c = edge(in[1], out[1]),
                      d = edge(in[1], out[0]);
            emit(a, b, c);
            emit(a, c, d);
          }
        }
      }

  Mesh m;
  m.vertices.resize(static_cast<Eigen::Index>(verts.size()), 3);
  for (std::size_t i = 0; i < verts.size(); ++i) m.vertices.row(static_cast<Eigen::Index>(i)) = verts[i].transpose();
  m.triangles.resize(static_cast<Eigen::Index>(tris.size()), 3);
  for (std::size_t i = 0; i < tris.size(); ++i) m.triangles.row(static_cast<Eigen::Index>(i)) = tris[i].transpose();
  if (!verts.empty()) {
    m.normals = field.gradient(m.vertices);
    for (Eigen::Index r = 0; r < m.normals.rows(); ++r) {
      const double len = m.normals.row(r).norm();
      if (len > 0.0) m.normals.row(r) /= len;
    }
  } else {
    m.normals.resize(0, 3);
  }
  return m;
}

void write_obj(const std::string& path, const Mesh& mesh) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << std::setprecision(9);
  for (Eigen::Index i = 0; i < mesh.vertices.rows(); ++i)
    os << "v " << mesh.vertices(i, 0) << ' ' << mesh.vertices(i, 1) << ' ' << mesh.vertices(i, 2) << '\n';
  const bool normals = mesh.normals.rows() == mesh.vertices.rows();
  if (normals)
    for (Eigen::Index i = 0; i < mesh.normals.rows(); ++i)
      os << "vn " << mesh.normals(i, 0) << ' ' << mesh.normals(i, 1) << ' ' << mesh.normals(i, 2) << '\n';
  for (Eigen::Index i = 0; i < mesh.triangles.rows(); ++i) {
    os << 'f';
    for (int c = 0; c < 3; ++c) {
      const int v = mesh.triangles(i, c) + 1;
      os << ' ' << v;
      if (normals) os << "//" << v;
    }
    os << '\n';
  }
  if (!os) throw std::runtime_error("error writing " + path);
}

Mesh read_obj(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path);
  std::vector<Vec3> v, vn;
  std::vector<Eigen::Vector3i> f;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "v" || tag == "vn") {
      Vec3 p;
      if (!(ls >> p.x() >> p.y() >> p.z())) throw std::runtime_error(path + ":" + std::to_string(lineno) + ": bad vertex");
      (tag == "v" ? v : vn).push_back(p);
    } else if (tag == "f") {
      std::vector<int> idx;
      std::string tok;
      while (ls >> tok) idx.push_back(std::stoi(tok.substr(0, tok.find('/'))) - 1);
      if (idx.size() < 3) throw std::runtime_error(path + ":" + std::to_string(lineno) + ": face with < 3 vertices");
      for (std::size_t k = 1; k + 1 < idx.size(); ++k) f.emplace_back(idx[0], idx[k], idx[k + 1]);
    }
  }
  Mesh m;
  m.vertices.resize(static_cast<Eigen::Index>(v.size()), 3);
  for (std::size_t i = 0; i < v.size(); ++i) m.vertices.row(static_cast<Eigen::Index>(i)) = v[i].transpose();
  m.normals.resize(static_cast<Eigen::Index>(vn.size()), 3);
  for (std::size_t i = 0; i < vn.size(); ++i) m.normals.row(static_cast<Eigen::Index>(i)) = vn[i].transpose();
  m.triangles.resize(static_cast<Eigen::Index>(f.size()), 3);
  for (std::size_t i = 0; i < f.size(); ++i) {
    if (f[i].minCoeff() < 0 || f[i].maxCoeff() >= static_cast<int>(v.size()))
      throw std::runtime_error(path + ": face index out of range");
    m.triangles.row(static_cast<Eigen::Index>(i)) = f[i].transpose();
  }
  return m;
}

namespace {

// Closest point on triangle abc to p (region tests on the barycentric
// coordinates).
Vec3 closest_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c) {
  const Vec3 ab = b - a, ac = c - a, ap = p - a;
  const double d1 = ab.dot(ap), d2 = ac.dot(ap);
  if (d1 <= 0.0 && d2 <= 0.0) return a;
  const Vec3 bp = p - b;
  const double d3 = ab.dot(bp), d4 = ac.dot(bp);
  if (d3 >= 0.0 && d4 <= d3) return b;
  const double vc = d1 * d4 - d3 * d2;
  if (vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0) return a + d1 / (d1 - d3) * ab;
  const Vec3 cp = p - c;
  const double d5 = ab.dot(cp), d6 = ac.dot(cp);
  if (d6 >= 0.0 && d5 <= d6) return c;
  const double vb = d5 * d2 - d1 * d6;
  if (vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0) return a + d2 / (d2 - d6) * ac;
  const double va = d3 * d6 - d5 * d4;
  if (va <= 0.0 && d4 - d3 >= 0.0 && d5 - d6 >= 0.0) return b + (d4 - d3) / ((d4 - d3) + (d5 - d6)) * (c - b);
  const double denom = 1.0 / (va + vb + vc);
  return a + ab * (vb * denom) + ac * (vc * denom);
}

}  // namespace

double distance_to_mesh(const Mesh& mesh, const Vec3& p) {
  double best = std::numeric_limits<double>::infinity();
  for (Eigen::Index t = 0; t < mesh.triangles.rows(); ++t) {
    const Vec3 a = mesh.vertices.row(mesh.triangles(t, 0)).transpose();
    const Vec3 b = mesh.vertices.row(mesh.triangles(t, 1)).transpose();
    const Vec3 c = mesh.vertices.row(mesh.triangles(t, 2)).transpose();
    // box rejection before the exact test
    const Vec3 lo = a.cwiseMin(b).cwiseMin(c), hi = a.cwiseMax(b).cwiseMax(c);
    const double box = (p.cwiseMax(lo).cwiseMin(hi) - p).squaredNorm();
    if (box >= best * best) continue;
    best = std::min(best, (closest_on_triangle(p, a, b, c) - p).norm());
  }
  return best;
}

// ---- rendering ---------------------------------------------------------------------------------------

Raster render_image(const trainer::Model& model, const CameraModel& cam, const fields::GroundPlane& ground,
                    const std::vector<shadow::LightSource>& lights, bool rgb, const RenderOptions& options) {
  if (rgb && !model.material) throw std::invalid_argument("rgb rendering needs a model with a material network");
  const fields::NeuralSdf field(model.sdf, model.params);
  const fields::GroundComposite composite(field, ground);
  const fields::SdfField& shadow_field =
      ground.depth ? static_cast<const fields::SdfField&>(field) : static_cast<const fields::SdfField&>(composite);
  const auto tr = trace_all(field, cam, ground, options.march_steps);
  const double s = model.sdf.sharpness(model.params);
  Raster out(cam.width, cam.height, rgb ? 3 : 1);

  std::vector<int> hits;
  for (int i = 0; i < cam.width * cam.height; ++i)
    if (tr[static_cast<std::size_t>(i)].hit.valid) hits.push_back(i);
  for (std::size_t c0 = 0; c0 < hits.size(); c0 += kChunk) {
    const std::size_t cn = std::min<std::size_t>(kChunk, hits.size() - c0);
    Matrix x(static_cast<Eigen::Index>(cn), 3);
    for (std::size_t k = 0; k < cn; ++k) x.row(static_cast<Eigen::Index>(k)) = tr[static_cast<std::size_t>(hits[c0 + k])].hit.x.transpose();
    Matrix nrm, albedo, spec;
    if (rgb) {
      ad::Tape tape;
      fields::ParamBinding b(tape, model.params, false);
      ad::Var xv = tape.constant(x);
      const ad::Var n = fields::normal(shadow_field, &b, xv, false).unit;
      const auto so = model.sdf.forward(b, xv, true);
      const auto mo = model.material->forward(b, xv, n, so.feature);
      nrm = n.value();
      albedo = mo.albedo.value();
      spec = mo.specular.value();
    }
    for (const auto& light : lights) {
      const Eigen::VectorXd cin = shadow::incoming_radiance_value(
          shadow_field, s, x, std::vector<const shadow::LightSource*>(cn, &light), options.shadow);
      for (std::size_t k = 0; k < cn; ++k) {
        const int i = hits[c0 + k];
        const auto r = static_cast<Eigen::Index>(k);
        if (!rgb) {
          out.data[static_cast<std::size_t>(i)] += cin(r);
          continue;
        }
        shading::ShadingSample smp;
        smp.n = nrm.row(r).transpose();
        smp.v = (x.row(r).transpose() - cam.center()).normalized();
        smp.l = shadow::light_at(light, x.row(r).transpose(), options.shadow.falloff).l;
        smp.albedo = albedo.row(r).transpose();
        smp.y = spec.row(r).transpose();
        smp.c_in = cin(r);
        const Vec3 c = shading::render_outgoing(smp);
        for (int ch = 0; ch < 3; ++ch) out.data[3 * static_cast<std::size_t>(i) + ch] += c(ch);
      }
    }
  }
  return out;
}

Raster relight(const trainer::Model& model, const CameraModel& camera, const fields::GroundPlane& ground,
               const shadow::LightSource& light, const RenderOptions& options) {
  return render_image(model, camera, ground, {light}, true, options);
}

Raster render_albedo(const trainer::Model& model, const CameraModel& cam, const fields::GroundPlane& ground,
                     int march_steps) {
  if (!model.material) throw std::invalid_argument("albedo rendering needs a model with a material network");
  const fields::NeuralSdf field(model.sdf, model.params);
  const fields::GroundComposite composite(field, ground);
  const fields::SdfField& geo =
      ground.depth ? static_cast<const fields::SdfField&>(field) : static_cast<const fields::SdfField&>(composite);
  const auto tr = trace_all(field, cam, ground, march_steps);
  Raster out(cam.width, cam.height, 3, kNaN);
  std::vector<int> hits;
  for (int i = 0; i < cam.width * cam.height; ++i)
    if (tr[static_cast<std::size_t>(i)].hit.valid) hits.push_back(i);
  for (std::size_t c0 = 0; c0 < hits.size(); c0 += kChunk) {
    const std::size_t cn = std::min<std::size_t>(kChunk, hits.size() - c0);
    Matrix x(static_cast<Eigen::Index>(cn), 3);
    for (std::size_t k = 0; k < cn; ++k) x.row(static_cast<Eigen::Index>(k)) = tr[static_cast<std::size_t>(hits[c0 + k])].hit.x.transpose();
    ad::Tape tape;
    fields::ParamBinding b(tape, model.params, false);
    ad::Var xv = tape.constant(x);
    const ad::Var n = fields::normal(geo, &b, xv, false).unit;
    const auto so = model.sdf.forward(b, xv, true);
    const Matrix a = model.material->forward(b, xv, n, so.feature).albedo.value();
    for (std::size_t k = 0; k < cn; ++k)
      for (int ch = 0; ch < 3; ++ch) out.data[3 * static_cast<std::size_t>(hits[c0 + k]) + ch] = a(static_cast<Eigen::Index>(k), ch);
  }
  return out;
}

Raster interior_mask(const std::vector<const Raster*>& masks) {
  if (masks.empty()) throw std::invalid_argument("interior_mask: no masks");
  const int w = masks.front()->width, h = masks.front()->height;
  Raster out(w, h, 1);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      bool keep = true;
      for (const Raster* m : masks)
        for (int dy = -1; dy <= 1 && keep; ++dy)
          for (int dx = -1; dx <= 1 && keep; ++dx) {
            const int u = std::clamp(x + dx, 0, w - 1), v = std::clamp(y + dy, 0, h - 1);
            keep = m->at(u, v) == m->at(x, y);
          }
      out.at(x, y) = keep ? 1.0 : 0.0;
    }
  return out;
}

double masked_mean_abs(const Raster& a, const Raster& b, const Raster& mask) {
  if (a.channels != b.channels || a.data.size() != b.data.size())
    throw std::invalid_argument("masked_mean_abs: rasters differ in shape");
  double sum = 0.0;
  long n = 0;
  for (std::size_t i = 0; i < mask.data.size(); ++i) {
    if (mask.data[i] != 1.0) continue;
    for (int c = 0; c < a.channels; ++c) sum += std::abs(a.data[i * a.channels + c] - b.data[i * a.channels + c]);
    n += a.channels;
  }
  if (n == 0) throw std::invalid_argument("masked_mean_abs: empty mask");
  return sum / static_cast<double>(n);
}

// ---- invisible geometry -----------------------------------------------------------------------------

Coverage invisible_coverage(const Mesh& mesh, const scenes::Scene& truth, double tau, int samples,
                            std::uint64_t seed) {
  if (!(tau > 0.0)) throw std::invalid_argument("invisible_coverage: tau must be positive");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const Vec3 eye = truth.camera.center();
  const fields::AnalyticSdf& obj = truth.object;
  const fields::AnalyticSdf full = truth.full_sdf();
  Coverage cov;
  int covered = 0, drawn = 0;
  const int max_draws = samples * 2000;
  while (cov.occluded_samples < samples && drawn < max_draws) {
    ++drawn;
    Vec3 p(u(rng), u(rng), u(rng));
    if (std::abs(obj.distance(p)) > 0.05) continue;
    for (int it = 0; it < 4; ++it) {
      double f = 0.0;
      const Vec3 g = obj.gradient(p, &f);
      if (g.squaredNorm() < 1e-16) break;
      p -= f * g / g.squaredNorm();
    }
    if (std::abs(obj.distance(p)) > 1e-6) continue;
    // keep points of the object's own visible-from-outside surface, not buried in the ground
    if (full.distance(p + 1e-4 * obj.gradient(p).normalized()) < 0.0) continue;
    const Vec3 d = (p - eye).normalized();
    const auto hit = scenes::oracle_trace(truth, eye, d);
    if (!hit.valid || hit.t >= (p - eye).norm() - 1e-3) continue;  // visible
    ++cov.occluded_samples;
    if (!mesh.empty() && distance_to_mesh(mesh, p) < tau) ++covered;
  }
  cov.fraction = cov.occluded_samples > 0 ? static_cast<double>(covered) / cov.occluded_samples : 0.0;
  return cov;
}

double albedo_fraction_within(const Raster& albedo, const Vec3& truth, const Raster& mask, double rel_tol) {
  if (albedo.channels != 3) throw std::invalid_argument("albedo raster must have 3 channels");
  int n = 0, ok = 0;
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x) {
      if (mask.at(x, y) != 1.0) continue;
      ++n;
      bool good = true;
      for (int c = 0; c < 3; ++c) {
        const double a = albedo.at(x, y, c);
        good = good && std::isfinite(a) && std::abs(a - truth(c)) <= rel_tol * truth(c);
      }
      ok += good;
    }
  if (n == 0) throw std::invalid_argument("albedo comparison: empty mask");
  return static_cast<double>(ok) / n;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j{{"depth_l1", depth.aligned},
                   {"depth_l1_unaligned", depth.unaligned},
                   {"depth_scale", depth.scale},
                   {"depth_offset", depth.offset},
                   {"foreground_pixels", depth.count},
                   {"foreground_iou", foreground_iou},
                   {"normal_mae_deg", normal_mae},
                   {"mesh_vertices", mesh_vertices},
                   {"mesh_triangles", mesh_triangles}};
  if (coverage) {
    j["coverage"] = coverage->fraction;
    j["coverage_samples"] = coverage->occluded_samples;
  }
  if (albedo_within) j["albedo_within"] = *albedo_within;
  return j;
}

EvalReport evaluate_model(const trainer::Model& model, const scenes::SceneDataset& ds, const EvalOptions& opt,
                          Mesh* mesh_out) {
  if (ds.ground_truth.is_null()) throw std::invalid_argument("evaluation needs a dataset with ground truth");
  scenes::Scene truth = scenes::scene_from_json(ds.ground_truth);
  truth.camera = ds.camera;
  const fields::NeuralSdf field(model.sdf, model.params);
  const GeometryRender pred = render_depth_normal(field, ds.camera, ds.ground, opt.march_steps);
  const GeometryRender gt = oracle_depth_normal(truth);

  EvalReport r;
  r.depth = depth_l1(pred.depth, gt.depth);
  Raster both(ds.camera.width, ds.camera.height, 1);
  int uni = 0;
  for (std::size_t i = 0; i < both.data.size(); ++i) {
    both.data[i] = pred.depth.valid.data[i] * gt.depth.valid.data[i];
    uni += pred.depth.valid.data[i] == 1.0 || gt.depth.valid.data[i] == 1.0;
  }
  r.foreground_iou = uni ? r.depth.count / static_cast<double>(uni) : 0.0;
  r.normal_mae = normal_mae(pred.normals, gt.normals, both);

  if (opt.mesh_resolution > 0) {
    Mesh m = extract_mesh(field, opt.mesh_resolution);
    r.mesh_vertices = static_cast<int>(m.vertices.rows());
    r.mesh_triangles = static_cast<int>(m.triangles.rows());
    r.coverage = invisible_coverage(m, truth, opt.tau, opt.coverage_samples);
    if (mesh_out) *mesh_out = std::move(m);
  }
  if (model.material) {
    const Raster albedo = render_albedo(model, ds.camera, ds.ground, opt.march_steps);
    r.albedo_within = albedo_fraction_within(albedo, truth.object_albedo, both, opt.albedo_tolerance);
  }
  return r;
}

double relight_error(const trainer::Model& model, const scenes::SceneDataset& ds,
                     const std::vector<shadow::LightSource>& lights, const Raster& reference,
                     const RenderOptions& options) {
  if (ds.ground_truth.is_null()) throw std::invalid_argument("relighting error needs a dataset with ground truth");
  scenes::Scene truth = scenes::scene_from_json(ds.ground_truth);
  truth.camera = ds.camera;
  const Raster object = scenes::oracle_geometry(truth).object;
  const Raster shadows = scenes::oracle_render(truth, lights, shading::Supervision::Shadow);
  const Raster mask = interior_mask({&object, &shadows});
  RenderOptions o = options;
  o.shadow.falloff = ds.falloff;
  return masked_mean_abs(render_image(model, ds.camera, ds.ground, lights, true, o), reference, mask);
}

namespace {

// An object pixel, a ground pixel and a silhouette pixel of the current field.
std::vector<trainer::PixelSample> three_pixels(const trainer::Model& m, const trainer::TrainingData& data,
                                               const trainer::TrainConfig& c) {
  const CameraModel& cam = data.camera(1);
  const fields::NeuralSdf f(m.sdf, m.params);
  raycast::RayContext ctx;
  ctx.field = &f;
  ctx.camera = &cam;
  ctx.ground = &data.dataset().ground;
  ctx.options.steps = c.march_steps;
  std::vector<Vec2> cen = pixel_centres(cam);
  std::vector<Vec2i> px;
  for (int y = 0; y < cam.height; ++y)
    for (int x = 0; x < cam.width; ++x) px.emplace_back(x, y);
  const auto tr = ctx.trace(cen);
  const auto info = raycast::detect_boundaries(ctx, px, tr);
  // object pixel nearest the image centre, ground pixel lowest in the image
  int obj = -1, gnd = -1, bnd = -1;
  double obj_d = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < px.size(); ++k) {
    const auto& h = tr[k].hit;
    const int i = static_cast<int>(k);
    if (info[k].is_boundary) {
      if (bnd < 0) bnd = i;
      continue;
    }
    const double d = (cen[k] - Vec2(0.5 * cam.width, 0.5 * cam.height)).norm();
    if (h.hit_object() && d < obj_d) {
      obj = i;
      obj_d = d;
    }
    if (h.valid && h.hit_ground) gnd = i;
  }
  if (obj < 0 || gnd < 0 || bnd < 0)
    throw std::runtime_error("gradient check: could not find object, ground and silhouette pixels");
  std::vector<trainer::PixelSample> out;
  for (const int k : {obj, gnd, bnd}) {
    trainer::PixelSample s;
    s.image = static_cast<int>(out.size()) % static_cast<int>(data.dataset().images.size());
    s.pixel = px[static_cast<std::size_t>(k)];
    const Raster& r = data.level(s.image, 1);
    s.target.resize(r.channels);
    // off the rendered value so every term has a nonzero residual
    for (int ch = 0; ch < r.channels; ++ch) s.target(ch) = 0.5 * r.at(s.pixel.x(), s.pixel.y(), ch) + 0.1;
    out.push_back(s);
  }
  return out;
}

}  // namespace

GradientCheck gradient_check(shading::Supervision mode, std::uint64_t seed, const std::string& scratch_dir,
                             int stride) {
  if (stride < 1) throw std::invalid_argument("gradient check: stride must be >= 1");
  scenes::GenerateOptions g;
  g.lights = 4;
  g.resolution = 32;
  g.type = mode;
  g.point_lights = mode == shading::Supervision::Rgb;
  g.seed = seed;
  const trainer::TrainingData data(scenes::generate_dataset(g, scratch_dir));

  trainer::TrainConfig c;
  c.mode = mode;
  c.seed = seed;
  c.eikonal_samples = 32;
  c.march_steps = 128;
  c.shadow_uniform = 16;
  c.shadow_hierarchical = 8;
  c.sdf.width = 16;
  c.sdf.depth = 4;
  c.sdf.frequencies = 2;
  c.sdf.feature_size = 4;
  c.material.width = 8;
  c.material.depth = 2;
  trainer::Model m = trainer::make_model(c);
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);
  std::uniform_real_distribution<double> u(-0.01, 0.01);
  for (Eigen::Index i = 0; i < m.params.size(); ++i) m.params.values()(i) += u(rng);

  const auto batch = three_pixels(m, data, c);
  const trainer::BatchPlan plan = trainer::plan_batch(m, data, batch, 1, c, rng);

  ad::Tape tape;
  fields::ParamBinding bind(tape, m.params, true);
  const Eigen::VectorXd grad = bind.gradient(trainer::batch_loss(bind, m, data, plan, c).total);
  const Eigen::VectorXd theta = m.params.values();
  auto value = [&](const Eigen::VectorXd& th) {
    trainer::Model mm = m;
    mm.params.values() = th;
    ad::Tape t;
    fields::ParamBinding b(t, mm.params, false);
    return trainer::batch_loss(b, mm, data, plan, c).total.scalar();
  };
  // the loss has sharp curvature (softplus beta = 100, specular lobes), so
  // plain central differences carry visible truncation error
  auto central = [&](Eigen::Index i, double h) {
    Eigen::VectorXd a = theta, b = theta;
    a(i) += h;
    b(i) -= h;
    return (value(a) - value(b)) / (2 * h);
  };
  GradientCheck r;
  for (Eigen::Index i = 0; i < grad.size(); i += stride) {
    const double fd = (4.0 * central(i, 1e-5) - central(i, 2e-5)) / 3.0;
    ++r.checked;
    const double scale = std::abs(fd) + std::abs(grad(i));
    // tiny entries: compare absolutely against a relative floor
    const double e = scale < 2e-6 ? std::abs(fd - grad(i)) / 1e-5 : std::abs(fd - grad(i)) / scale;
    r.max_relative_error = std::max(r.max_relative_error, e);
  }
  return r;
}

}  // namespace shadowray::evaluate
