#include "shadowray/raycast.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>

namespace shadowray::raycast {

using ad::Tape;

namespace {

std::atomic<long> g_clamped{0};

constexpr int kBlock = 32;

struct Bracket {
  double a = 0, fa = 0, b = 0, fb = 0;
};

}  // namespace

long clamped_denominators() { return g_clamped.load(); }
void reset_clamped_denominators() { g_clamped.store(0); }

// ---- marching -------------------------------------------------------------------

std::vector<MarchTrace> march(const SdfField& field, const std::vector<RayQuery>& rays,
                              const MarchOptions& options) {
  const std::size_t n = rays.size();
  std::vector<MarchTrace> out(n);
  std::vector<double> t0(n, 0.0), dt(n, 0.0);
  std::vector<double> f_prev(n), f_prev2(n);
  std::vector<int> active;
  std::vector<Bracket> bracket(n);
  std::vector<char> found(n, 0);
  const int steps = std::max(options.steps, 2);

  for (std::size_t r = 0; r < n; ++r) {
    const RayQuery& q = rays[r];
    auto iv = intersect_scene_bounds(q.origin, q.dir);
    if (!iv) continue;
    // small pad so a surface lying exactly on the bounding sphere is bracketed
    double lo = std::max(iv->t0 - 1e-2, 0.0);
    double hi = iv->t1 + 1e-2;
    if (q.ground_t) hi = std::min(hi, *q.ground_t + q.ground_margin);
    if (!(hi > lo)) continue;
    t0[r] = lo;
    dt[r] = (hi - lo) / (steps - 1);
    active.push_back(static_cast<int>(r));
  }

  Matrix pts;
  for (int k0 = 0; k0 < steps && !active.empty(); k0 += kBlock) {
    const int kb = std::min(kBlock, steps - k0);
    pts.resize(static_cast<Eigen::Index>(active.size()) * kb, 3);
    for (std::size_t a = 0; a < active.size(); ++a) {
      const RayQuery& q = rays[active[a]];
      for (int k = 0; k < kb; ++k) {
        const double t = t0[active[a]] + (k0 + k) * dt[active[a]];
        pts.row(static_cast<Eigen::Index>(a) * kb + k) = (q.origin + t * q.dir).transpose();
      }
    }
    const Eigen::VectorXd f = field.eval(pts);
    std::vector<int> still;
    for (std::size_t a = 0; a < active.size(); ++a) {
      const int r = active[a];
      const RayQuery& q = rays[r];
      bool hit = false;
      for (int k = 0; k < kb; ++k) {
        const int idx = k0 + k;
        const double fk = f(static_cast<Eigen::Index>(a) * kb + k);
        const double t = t0[r] + idx * dt[r];
        if (idx >= 2 && f_prev[r] > 0.0 && f_prev[r] <= f_prev2[r] && f_prev[r] <= fk) {
          const double tp = t - dt[r];
          const double ratio = f_prev[r] / std::max(tp, 1e-9);
          if (ratio < out[r].graze) {
            out[r].graze = ratio;
            out[r].graze_point = q.origin + tp * q.dir;
          }
        }
        if (idx >= 1 && f_prev[r] > 0.0 && fk <= 0.0) {
          bracket[r] = {t - dt[r], f_prev[r], t, fk};
          found[r] = 1;
          hit = true;
          break;
        }
        f_prev2[r] = f_prev[r];
        f_prev[r] = fk;
      }
      if (!hit) still.push_back(r);
    }
    active.swap(still);
  }

  // regula falsi (Illinois) in lockstep, then bisection for stragglers
  std::vector<int> refine;
  for (std::size_t r = 0; r < n; ++r)
    if (found[r]) refine.push_back(static_cast<int>(r));
  std::vector<double> best_t(n), best_f(n);
  std::vector<int> side(n, 0);
  for (int r : refine) {
    const Bracket& b = bracket[r];
    const bool use_a = std::abs(b.fa) < std::abs(b.fb);
    best_t[r] = use_a ? b.a : b.b;
    best_f[r] = use_a ? b.fa : b.fb;
  }
  const int max_iter = options.refine_iterations + 60;
  for (int it = 0; it < max_iter && !refine.empty(); ++it) {
    const bool secant = it < options.refine_iterations;
    pts.resize(static_cast<Eigen::Index>(refine.size()), 3);
    std::vector<double> tc(refine.size());
    for (std::size_t a = 0; a < refine.size(); ++a) {
      const Bracket& b = bracket[refine[a]];
      double c = 0.5 * (b.a + b.b);
      if (secant && b.fa != b.fb) c = b.b - b.fb * (b.b - b.a) / (b.fb - b.fa);
      if (!(c > std::min(b.a, b.b) && c < std::max(b.a, b.b))) c = 0.5 * (b.a + b.b);
      tc[a] = c;
      pts.row(static_cast<Eigen::Index>(a)) = (rays[refine[a]].origin + c * rays[refine[a]].dir).transpose();
    }
    const Eigen::VectorXd f = field.eval(pts);
    std::vector<int> still;
    for (std::size_t a = 0; a < refine.size(); ++a) {
      const int r = refine[a];
      Bracket& b = bracket[r];
      const double fc = f(static_cast<Eigen::Index>(a));
      if (std::abs(fc) < std::abs(best_f[r])) {
        best_f[r] = fc;
        best_t[r] = tc[a];
      }
      if (std::abs(fc) < options.tolerance) continue;
      if (fc > 0.0) {
        b.a = tc[a];
        b.fa = fc;
        if (side[r] == 1) b.fb *= 0.5;
        side[r] = 1;
      } else {
        b.b = tc[a];
        b.fb = fc;
        if (side[r] == -1) b.fa *= 0.5;
        side[r] = -1;
      }
      if (std::abs(b.b - b.a) < 1e-14) continue;
      still.push_back(r);
    }
    refine.swap(still);
  }

  for (std::size_t r = 0; r < n; ++r) {
    const RayQuery& q = rays[r];
    Intersection& h = out[r].hit;
    if (found[r] && std::abs(best_f[r]) < options.tolerance) {
      const double t = best_t[r];
      if (q.ground_t && q.ground_margin > 0.0 && t >= *q.ground_t - q.ground_margin) {
        h = {q.origin + *q.ground_t * q.dir, *q.ground_t, true, true};
      } else {
        h = {q.origin + t * q.dir, t, false, true};
      }
      continue;
    }
    if (q.ground_t && *q.ground_t > 0.0) h = {q.origin + *q.ground_t * q.dir, *q.ground_t, true, true};
  }
  return out;
}

Intersection ray_march(const SdfField& field, const RayQuery& ray, const MarchOptions& options) {
  return march(field, {ray}, options).front().hit;
}

// ---- differentiable intersection -----------------------------------------------------

Var differentiable_intersection(Tape& tape, const SdfField& field, const ParamBinding* binding,
                                const Matrix& x, const Matrix& dirs) {
  Var q = tape.variable(x);
  Var f = field.eval(binding, q);
  const Var wrt[] = {q};
  Var g = tape.grad(ad::sum(f), wrt)[0];
  Var v = tape.constant(dirs);
  Var den = ad::dot_rows(g, v);

  // |n . v| <= 1e-4: replace the row by a constant of the same sign
  const Eigen::VectorXd gn = g.value().rowwise().norm();
  const Eigen::VectorXd dv = den.value().col(0);
  Matrix keep = Matrix::Ones(x.rows(), 1);
  Matrix repl = Matrix::Zero(x.rows(), 1);
  bool any = false;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    if (std::abs(dv(i)) <= 1e-4 * gn(i)) {
      keep(i, 0) = 0.0;
      repl(i, 0) = (dv(i) < 0.0 ? -1e-4 : 1e-4) * std::max(gn(i), 1e-12);
      ++g_clamped;
      any = true;
    }
  }
  if (any) den = den * tape.constant(keep) + tape.constant(repl);
  return tape.constant(x) - v * (f / den);
}

// ---- camera context ---------------------------------------------------------------------

RayQuery RayContext::query(double u, double v) const {
  RayQuery q;
  q.origin = camera->center();
  q.dir = camera->direction(u, v);
  if (ground) {
    if (ground->depth) {
      const Matrix& d = *ground->depth;
      const double sx = static_cast<double>(d.cols()) / camera->width;
      const double sy = static_cast<double>(d.rows()) / camera->height;
      const int i = std::clamp(static_cast<int>(std::floor(u * sx)), 0, static_cast<int>(d.cols()) - 1);
      const int j = std::clamp(static_cast<int>(std::floor(v * sy)), 0, static_cast<int>(d.rows()) - 1);
      if (std::isfinite(d(j, i))) q.ground_t = d(j, i);
      q.ground_margin = ground_margin;
    } else {
      q.ground_t = ground->intersect(q.origin, q.dir);
    }
  }
  return q;
}

std::vector<MarchTrace> RayContext::trace(const std::vector<Vec2>& pixels) const {
  std::vector<RayQuery> qs;
  qs.reserve(pixels.size());
  for (const Vec2& p : pixels) qs.push_back(query(p.x(), p.y()));
  return march(*field, qs, options);
}

Intersection RayContext::trace(double u, double v) const {
  return march(*field, {query(u, v)}, options).front().hit;
}

// ---- boundary detection -----------------------------------------------------------------

double box_fraction(double s, const Vec2& m) {
  const double a = std::max(std::abs(m.x()), 1e-4);
  const double c = std::max(std::abs(m.y()), 1e-4);
  const double A = 0.5 * (a + c);
  const double B = 0.5 * (a - c);
  if (s >= A) return 1.0;
  if (s <= -A) return 0.0;
  auto r2 = [](double x) { return x > 0.0 ? x * x : 0.0; };
  const double F = (r2(s + A) - r2(s + B) - r2(s - B) + r2(s - A)) / (2.0 * a * c);
  return std::clamp(F, 0.0, 1.0);
}

namespace {

struct Probe {
  int index = 0;           // into the pixel list
  Vec2 a, b;               // image points on either side of the discontinuity
  Intersection ha, hb;
};

double depth_jump(const CameraModel& cam, double t) { return std::max(0.05, 3.0 * t * cam.pixel_angle()); }

bool differ(const CameraModel& cam, const Intersection& h0, const Intersection& h1) {
  if (h0.valid != h1.valid) return true;
  if (!h0.valid) return false;
  if (h0.hit_ground != h1.hit_ground) return true;
  if (h0.hit_ground) return false;
  return std::abs(h0.t - h1.t) > depth_jump(cam, std::min(h0.t, h1.t));
}

/// Image-space direction of a small world displacement d at x.
Vec2 image_direction(const CameraModel& cam, const Vec3& x, const Vec3& d) {
  const Vec2 p0 = cam.project(x);
  const Vec2 p1 = cam.project(x + 1e-3 * d);
  const Vec2 m = p1 - p0;
  const double len = m.norm();
  return len > 1e-12 ? Vec2(m / len) : Vec2::Zero();
}

/// Distance from b along unit e to the border of the pixel box [lo, lo + 1]^2.
double to_border(const Vec2& b, const Vec2& e, const Vec2& lo) {
  double d = std::numeric_limits<double>::infinity();
  for (int k = 0; k < 2; ++k) {
    if (e(k) > 1e-12) d = std::min(d, (lo(k) + 1.0 - b(k)) / e(k));
    if (e(k) < -1e-12) d = std::min(d, (lo(k) - b(k)) / e(k));
  }
  return std::max(d, 0.0);
}

struct WalkResult {
  bool ok = false;
  Vec3 x = Vec3::Zero();
};

WalkResult surface_walk(const SdfField& field, const Vec3& cam, Vec3 x, const WalkOptions& o) {
  double h = o.step;
  for (int step = 0; step <= o.max_steps; ++step) {
    double f = 0.0;
    const Vec3 g = field.gradient(x, &f);
    const double gl = g.norm();
    if (!(gl > 1e-8)) return {};
    const Vec3 n = g / gl;
    const Vec3 v = (x - cam).normalized();
    if (std::abs(n.dot(v)) < o.perpendicular) return {true, x};
    if (step == o.max_steps) break;
    Vec3 tangent = v - v.dot(n) * n;
    if (!(tangent.norm() > 1e-12)) return {};
    tangent.normalize();
    Vec3 y = x + h * tangent;
    double fy = 0.0;
    const Vec3 gy = field.gradient(y, &fy);
    if (!(gy.squaredNorm() > 1e-16)) return {};
    y -= fy * gy / gy.squaredNorm();
    double fz = 0.0;
    const Vec3 gz = field.gradient(y, &fz);
    if (!(std::abs(fz) <= o.diverge)) return {};
    const Vec3 vz = (y - cam).normalized();
    if (gz.normalized().dot(vz) > o.perpendicular) {
      h *= 0.5;  // stepped over the silhouette onto the back side
      continue;
    }
    x = y;
  }
  return {};
}

}  // namespace

std::vector<BoundaryInfo> detect_boundaries(const RayContext& ctx, const std::vector<Vec2i>& pixels,
                                            const std::vector<MarchTrace>& centers,
                                            const WalkOptions& options, int level_factor) {
  const CameraModel& cam = *ctx.camera;
  const SdfField& field = *ctx.field;
  const Vec3 eye = cam.center();
  std::vector<BoundaryInfo> out(pixels.size());

  // 1. probe the pixel border in the direction where a silhouette may lie
  std::vector<Probe> probes;
  std::vector<Vec2> probe_px;
  for (std::size_t k = 0; k < pixels.size(); ++k) {
    const Vec2 c(pixels[k].x() + 0.5, pixels[k].y() + 0.5);
    out[k].pixel_center = c;
    const MarchTrace& mt = centers[k];
    const Intersection& h = mt.hit;
    if (!h.valid) continue;
    Vec2 d = Vec2::Zero();
    const double graze_px = mt.graze / cam.pixel_angle();
    const bool graze_in_front =
        graze_px < 1.0 && (!h.hit_object() || (mt.graze_point - eye).norm() < h.t - depth_jump(cam, h.t));
    if (graze_in_front) {
      const Vec3 g = field.gradient(mt.graze_point);
      if (g.norm() > 1e-8) d = image_direction(cam, mt.graze_point, -g.normalized());
    } else if (h.hit_object()) {
      const Vec3 g = field.gradient(h.x);
      if (!(g.norm() > 1e-8)) continue;
      const Vec3 n = g.normalized();
      const Vec3 v = (h.x - eye).normalized();
      if (level_factor == 1 && std::abs(n.dot(v)) > options.facing) continue;
      d = image_direction(cam, h.x, n);
    }
    if (d.isZero()) continue;
    const double reach = 0.5 / std::max(std::abs(d.x()), std::abs(d.y()));
    Probe p;
    p.index = static_cast<int>(k);
    p.a = c;
    p.ha = h;
    p.b = c + reach * d * (1.0 - 1e-6);
    probes.push_back(p);
    probe_px.push_back(p.b);
  }
  if (probes.empty()) return out;
  {
    const auto hits = ctx.trace(probe_px);
    std::vector<Probe> kept;
    for (std::size_t q = 0; q < probes.size(); ++q) {
      probes[q].hb = hits[q].hit;
      if (differ(cam, probes[q].ha, probes[q].hb)) kept.push_back(probes[q]);
    }
    probes.swap(kept);
  }

  // 2. bisect the discontinuity in image space
  for (int it = 0; it < options.bisection_steps && !probes.empty(); ++it) {
    std::vector<Vec2> mids;
    for (const Probe& p : probes) mids.push_back(0.5 * (p.a + p.b));
    const auto hits = ctx.trace(mids);
    for (std::size_t q = 0; q < probes.size(); ++q) {
      Probe& p = probes[q];
      if (differ(cam, p.ha, hits[q].hit)) {
        p.b = mids[q];
        p.hb = hits[q].hit;
      } else {
        p.a = mids[q];
        p.ha = hits[q].hit;
      }
    }
  }

  // 3. walk to the silhouette, place the sub-rays
  struct Pending {
    int index;
    Vec2 near_px, far_px, alt_near_px, alt_far_px;
    Intersection alt_near, alt_far;
  };
  std::vector<Pending> pending;
  std::vector<Vec2> sub_px;
  for (const Probe& p : probes) {
    if (!p.ha.valid || !p.hb.valid) continue;
    const bool a_near = p.ha.t < p.hb.t;
    const Intersection& hn = a_near ? p.ha : p.hb;
    const Intersection& hf = a_near ? p.hb : p.ha;
    const Vec2 pn = a_near ? p.a : p.b;
    const Vec2 pf = a_near ? p.b : p.a;
    if (!hn.hit_object()) continue;

    BoundaryInfo& info = out[static_cast<std::size_t>(p.index)];
    const WalkResult w = surface_walk(field, eye, hn.x, options);
    Vec2 m;
    Vec3 xb;
    if (w.ok) {
      xb = w.x;
      m = image_direction(cam, xb, field.gradient(xb).normalized());
      info.walked = true;
    } else {
      // crease silhouette (no tangent point) or the walk left the surface:
      // keep the bracketed discontinuity
      xb = hn.x;
      m = (pf - pn).normalized();
    }
    if (m.isZero() || !m.allFinite()) continue;
    const Vec2 lo = info.pixel_center - Vec2(0.5, 0.5);
    Vec2 b = cam.project(xb);
    b = b.cwiseMax(lo + Vec2::Constant(1e-3)).cwiseMin(lo + Vec2::Constant(1.0 - 1e-3));
    info.point = xb;
    info.image_normal = m;
    Pending pd;
    pd.index = p.index;
    pd.near_px = b - 0.5 * to_border(b, -m, lo) * m;
    pd.far_px = b + 0.5 * to_border(b, m, lo) * m;
    pd.alt_near_px = pn;
    pd.alt_far_px = pf;
    pd.alt_near = hn;
    pd.alt_far = hf;
    pending.push_back(pd);
    sub_px.push_back(pd.near_px);
    sub_px.push_back(pd.far_px);
  }
  if (pending.empty()) return out;

  // 4. trace the two sub-rays
  const auto hits = ctx.trace(sub_px);
  for (std::size_t q = 0; q < pending.size(); ++q) {
    const Pending& pd = pending[q];
    BoundaryInfo& info = out[static_cast<std::size_t>(pd.index)];
    Intersection hn = hits[2 * q].hit;
    Intersection hf = hits[2 * q + 1].hit;
    Vec2 pn = pd.near_px, pf = pd.far_px;
    auto usable = [&](const Intersection& a, const Intersection& b) {
      return a.hit_object() && b.valid && a.t < b.t && differ(cam, a, b);
    };
    if (!usable(hn, hf)) {
      hn = pd.alt_near;
      hf = pd.alt_far;
      pn = pd.alt_near_px;
      pf = pd.alt_far_px;
      if (!usable(hn, hf)) continue;
    }
    info.near = {pn, cam.direction(pn.x(), pn.y()), hn};
    info.far = {pf, cam.direction(pf.x(), pf.y()), hf};
    info.is_boundary = true;
  }
  return out;
}

BoundaryInfo detect_boundary(const RayContext& ctx, int i, int j, const MarchTrace& center,
                             const WalkOptions& options, int level_factor) {
  return detect_boundaries(ctx, {Vec2i(i, j)}, {center}, options, level_factor).front();
}

Var area_ratio(Tape& tape, const SdfField& field, const ParamBinding* binding,
               const CameraModel& camera, const std::vector<const BoundaryInfo*>& boundaries) {
  const auto k = static_cast<Eigen::Index>(boundaries.size());
  Matrix pts(k, 3), mx(k, 1), my(k, 1), cu(k, 1), cv(k, 1), A(k, 1), B(k, 1), inv(k, 1);
  for (Eigen::Index r = 0; r < k; ++r) {
    const BoundaryInfo& b = *boundaries[static_cast<std::size_t>(r)];
    pts.row(r) = b.point.transpose();
    mx(r) = b.image_normal.x();
    my(r) = b.image_normal.y();
    cu(r) = b.pixel_center.x();
    cv(r) = b.pixel_center.y();
    const double a = std::max(std::abs(mx(r)), 1e-4);
    const double c = std::max(std::abs(my(r)), 1e-4);
    A(r) = 0.5 * (a + c);
    B(r) = 0.5 * (a - c);
    inv(r) = 1.0 / (2.0 * a * c);
  }
  // one Newton step onto the current level set
  Var q = tape.variable(pts);
  Var f = field.eval(binding, q);
  const Var wrt[] = {q};
  Var g = tape.grad(ad::sum(f), wrt)[0];
  Var xb = tape.constant(pts) - g * (f / (ad::sum_cols(ad::square(g)) + 1e-24));

  Var xc = ad::matmul(xb, tape.constant(Matrix(camera.rotation.transpose()))) +
           tape.constant(Matrix(camera.translation.transpose()));
  Var z = ad::slice_cols(xc, 2, 1);
  Var u = ad::slice_cols(xc, 0, 1) / z * camera.fx + camera.cx;
  Var v = ad::slice_cols(xc, 1, 1) / z * camera.fy + camera.cy;
  Var s = (u - tape.constant(cu)) * tape.constant(mx) + (v - tape.constant(cv)) * tape.constant(my);
  Var Av = tape.constant(A), Bv = tape.constant(B);
  auto r2 = [](Var x) { return ad::square(ad::relu(x)); };
  Var F = (r2(s + Av) - r2(s + Bv) - r2(s - Bv) + r2(s - Av)) * tape.constant(inv);
  return ad::maximum(ad::minimum(F, tape.constant(1.0)), tape.constant(0.0));
}

}  // namespace shadowray::raycast
