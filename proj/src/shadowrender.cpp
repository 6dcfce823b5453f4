#include "shadowray/shadowrender.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>

namespace shadowray::shadow {

LightSource LightSource::directional(const Vec3& l, double intensity) {
  LightSource s;
  s.kind = Kind::Directional;
  s.direction = l.normalized();
  s.intensity = intensity;
  return s;
}

LightSource LightSource::point(const Vec3& q, double intensity) {
  LightSource s;
  s.kind = Kind::Point;
  s.position = q;
  s.intensity = intensity;
  return s;
}

void LightSource::validate() const {
  if (!(intensity >= 0.0) || !std::isfinite(intensity))
    throw std::invalid_argument("light: intensity must be finite and >= 0");
  if (kind == Kind::Directional) {
    if (!(std::abs(direction.norm() - 1.0) < 1e-6))
      throw std::invalid_argument("light: direction is not unit length (|l| = " +
                                  std::to_string(direction.norm()) + ")");
  } else if (!position.allFinite()) {
    throw std::invalid_argument("light: position is not finite");
  }
}

nlohmann::json LightSource::to_json() const {
  if (kind == Kind::Directional)
    return {{"type", "directional"},
            {"direction", {direction.x(), direction.y(), direction.z()}},
            {"intensity", intensity}};
  return {{"type", "point"}, {"position", {position.x(), position.y(), position.z()}}, {"intensity", intensity}};
}

namespace {

Vec3 vec3_field(const nlohmann::json& j, const char* key) {
  if (!j.contains(key)) throw std::invalid_argument(std::string("light: missing field '") + key + "'");
  const auto& a = j.at(key);
  if (!a.is_array() || a.size() != 3)
    throw std::invalid_argument(std::string("light: field '") + key + "' must be a 3-vector");
  return {a[0].get<double>(), a[1].get<double>(), a[2].get<double>()};
}

}  // namespace

LightSource LightSource::from_json(const nlohmann::json& j) {
  if (!j.contains("type")) throw std::invalid_argument("light: missing field 'type'");
  if (!j.contains("intensity")) throw std::invalid_argument("light: missing field 'intensity'");
  const std::string type = j.at("type").get<std::string>();
  LightSource s;
  s.intensity = j.at("intensity").get<double>();
  if (type == "directional") {
    s.kind = Kind::Directional;
    s.direction = vec3_field(j, "direction");
  } else if (type == "point") {
    s.kind = Kind::Point;
    s.position = vec3_field(j, "position");
  } else {
    throw std::invalid_argument("light: unknown type '" + type + "'");
  }
  s.validate();
  return s;
}

LightSample light_at(const LightSource& light, const Vec3& x, bool falloff) {
  if (light.kind == LightSource::Kind::Directional) return {light.direction, light.intensity};
  const Vec3 d = light.position - x;
  const double r = d.norm();
  if (!(r > 1e-6)) throw std::invalid_argument("light: point light coincides with the shaded point");
  return {d / r, falloff ? light.intensity / (r * r) : light.intensity};
}

double alpha_from_sdf(double f_i, double f_next, double s) {
  // log Phi(x) = -softplus(-x); the ratio is taken in log space
  const double log_ratio = ad::softplus_value(-s * f_i, 1.0) - ad::softplus_value(-s * f_next, 1.0);
  return std::max(1.0 - std::exp(log_ratio), 0.0);
}

namespace {

double log_keep(double f_i, double f_next, double s) {
  return std::min(ad::softplus_value(-s * f_i, 1.0) - ad::softplus_value(-s * f_next, 1.0), 0.0);
}

double sphere_exit(const Vec3& x, const Vec3& l) {
  const double b = x.dot(l);
  const double c = x.squaredNorm() - 1.0;
  const double disc = b * b - c;
  if (disc <= 0.0) return 0.0;
  return std::max(-b + std::sqrt(disc), 0.0);
}

struct PlanWithValues {
  std::vector<ShadowRayPlan> plans;
  std::vector<std::vector<double>> f;
};

PlanWithValues plan_impl(const SdfField& field, double s, const Matrix& origins,
                         const std::vector<const LightSource*>& lights, const ShadowOptions& opt) {
  const auto n = static_cast<std::size_t>(origins.rows());
  if (lights.size() != n) throw std::invalid_argument("shadow rays: one light per origin required");
  if (!(s > 0.0)) throw std::invalid_argument("shadow rays: sharpness must be positive");
  PlanWithValues out;
  out.plans.resize(n);
  out.f.resize(n);
  std::vector<Vec3> dirs(n);
  const int nu = std::max(opt.uniform_samples, 2);

  // coarse pass
  std::vector<std::size_t> active;
  for (std::size_t r = 0; r < n; ++r) {
    const Vec3 x = origins.row(static_cast<Eigen::Index>(r)).transpose();
    const LightSample ls = light_at(*lights[r], x, opt.falloff);
    dirs[r] = ls.l;
    double far = sphere_exit(x, ls.l);
    if (lights[r]->kind == LightSource::Kind::Point) far = std::min(far, (lights[r]->position - x).norm());
    out.plans[r].far = far;
    if (far > 0.0) active.push_back(r);
  }
  Matrix pts(static_cast<Eigen::Index>(active.size()) * nu, 3);
  for (std::size_t a = 0; a < active.size(); ++a) {
    const std::size_t r = active[a];
    auto& t = out.plans[r].t;
    t.resize(static_cast<std::size_t>(nu));
    for (int i = 0; i < nu; ++i) {
      t[i] = out.plans[r].far * i / (nu - 1);
      pts.row(static_cast<Eigen::Index>(a) * nu + i) =
          origins.row(static_cast<Eigen::Index>(r)) + t[i] * dirs[r].transpose();
    }
  }
  Eigen::VectorXd fc = pts.rows() ? field.eval(pts) : Eigen::VectorXd();

  // importance round on the coarse opacities
  const int nh = std::max(opt.hierarchical_samples, 0);
  std::vector<std::vector<double>> fine(n);
  std::vector<std::size_t> fine_rows;
  Eigen::Index fine_count = 0;
  for (std::size_t a = 0; a < active.size() && nh > 0; ++a) {
    const std::size_t r = active[a];
    const auto& t = out.plans[r].t;
    std::vector<double> cdf(static_cast<std::size_t>(nu), 0.0);
    for (int i = 0; i + 1 < nu; ++i)
      cdf[i + 1] = cdf[i] + alpha_from_sdf(fc(static_cast<Eigen::Index>(a) * nu + i),
                                           fc(static_cast<Eigen::Index>(a) * nu + i + 1), s);
    const double total = cdf.back();
    if (!(total > 1e-12)) continue;
    for (int k = 0; k < nh; ++k) {
      const double u = (k + 0.5) / nh * total;
      const auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
      const auto i = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(it - cdf.begin() - 1, 0, nu - 2));
      const double w = cdf[i + 1] - cdf[i];
      const double frac = w > 0.0 ? (u - cdf[i]) / w : 0.5;
      fine[r].push_back(t[i] + frac * (t[i + 1] - t[i]));
    }
    fine_rows.push_back(r);
    fine_count += static_cast<Eigen::Index>(fine[r].size());
  }
  Matrix fpts(fine_count, 3);
  {
    Eigen::Index row = 0;
    for (const std::size_t r : fine_rows)
      for (const double tt : fine[r])
        fpts.row(row++) = origins.row(static_cast<Eigen::Index>(r)) + tt * dirs[r].transpose();
  }
  Eigen::VectorXd ff = fine_count ? field.eval(fpts) : Eigen::VectorXd();

  // merge, then decide which segments matter
  Eigen::Index fine_row = 0;
  std::size_t next_fine = 0;
  for (std::size_t a = 0; a < active.size(); ++a) {
    const std::size_t r = active[a];
    ShadowRayPlan& plan = out.plans[r];
    std::vector<std::pair<double, double>> samples;
    for (int i = 0; i < nu; ++i) samples.emplace_back(plan.t[i], fc(static_cast<Eigen::Index>(a) * nu + i));
    if (next_fine < fine_rows.size() && fine_rows[next_fine] == r) {
      for (const double tt : fine[r]) samples.emplace_back(tt, ff(fine_row++));
      ++next_fine;
    }
    std::stable_sort(samples.begin(), samples.end(),
                     [](const auto& p, const auto& q) { return p.first < q.first; });
    plan.t.clear();
    auto& fv = out.f[r];
    for (const auto& [tt, fx] : samples) {
      if (!plan.t.empty() && tt - plan.t.back() < 1e-12) continue;
      plan.t.push_back(tt);
      fv.push_back(fx);
    }
    double log_t = 0.0;
    for (std::size_t i = 0; i + 1 < plan.t.size(); ++i) {
      const double a0 = fv[i], a1 = fv[i + 1];
      if (s * std::min(a0, a1) > opt.prune_sharp_distance) continue;
      if (a1 > a0 + 1e-4) continue;  // leaving the surface: alpha is clamped to 0
      plan.segments.push_back(static_cast<int>(i));
      log_t += log_keep(a0, a1, s);
      if (log_t < opt.prune_log_transmittance) break;
    }
  }
  return out;
}

}  // namespace

std::vector<ShadowRayPlan> plan_shadow_rays(const SdfField& field, double sharpness, const Matrix& origins,
                                            const std::vector<const LightSource*>& lights,
                                            const ShadowOptions& options) {
  return plan_impl(field, sharpness, origins, lights, options).plans;
}

Eigen::VectorXd incoming_radiance_value(const SdfField& field, double sharpness, const Matrix& origins,
                                        const std::vector<const LightSource*>& lights,
                                        const ShadowOptions& options) {
  const PlanWithValues pv = plan_impl(field, sharpness, origins, lights, options);
  Eigen::VectorXd c(origins.rows());
  for (Eigen::Index r = 0; r < origins.rows(); ++r) {
    const auto& plan = pv.plans[static_cast<std::size_t>(r)];
    const auto& f = pv.f[static_cast<std::size_t>(r)];
    double log_t = 0.0;
    for (const int i : plan.segments) log_t += log_keep(f[i], f[i + 1], sharpness);
    c(r) = light_at(*lights[static_cast<std::size_t>(r)], origins.row(r).transpose(), options.falloff).L *
           std::exp(log_t);
  }
  return c;
}

Var incoming_radiance(ad::Tape& tape, const SdfField& field, const ParamBinding* binding, Var origins,
                      Var sharpness, const std::vector<const LightSource*>& lights,
                      const std::vector<ShadowRayPlan>& plans, const ShadowOptions& options) {
  const Eigen::Index n = origins.rows();
  if (static_cast<Eigen::Index>(lights.size()) != n || static_cast<Eigen::Index>(plans.size()) != n)
    throw std::invalid_argument("incoming_radiance: lights and plans must match the origins");
  const Matrix& x = origins.value();

  // light direction and intensity, differentiable in x for point lights
  bool any_point = false;
  Matrix dir_const(n, 3), q(n, 3), point_mask = Matrix::Zero(n, 1), l_const(n, 1);
  for (Eigen::Index r = 0; r < n; ++r) {
    const LightSource& light = *lights[static_cast<std::size_t>(r)];
    const LightSample ls = light_at(light, x.row(r).transpose(), options.falloff);
    dir_const.row(r) = ls.l.transpose();
    l_const(r) = ls.L;
    if (light.kind == LightSource::Kind::Point) {
      any_point = true;
      point_mask(r) = 1.0;
      q.row(r) = light.position.transpose();
      dir_const.row(r).setZero();
      l_const(r) = options.falloff ? 0.0 : light.intensity;
    } else {
      q.row(r) = x.row(r) + dir_const.row(r);  // unused, keeps the distance away from 0
    }
  }
  Var dir = tape.constant(dir_const);
  Var intensity = tape.constant(l_const);
  if (any_point) {
    Var mask = tape.constant(point_mask);
    Var d = tape.constant(q) - origins;
    Var r2 = ad::sum_cols(ad::square(d));
    dir = dir + mask * (d / ad::sqrt(r2));
    if (options.falloff) {
      Matrix lp(n, 1);
      for (Eigen::Index r = 0; r < n; ++r) lp(r) = point_mask(r) * lights[static_cast<std::size_t>(r)]->intensity;
      intensity = intensity + tape.constant(lp) / r2;
    }
  }

  // sample points needed by the kept segments
  auto point_ray = std::make_shared<ad::Index>();
  auto seg_a = std::make_shared<ad::Index>();
  auto seg_b = std::make_shared<ad::Index>();
  auto seg_ray = std::make_shared<ad::Index>();
  std::vector<double> ts;
  for (Eigen::Index r = 0; r < n; ++r) {
    const auto& plan = plans[static_cast<std::size_t>(r)];
    int last = -2, last_row = -1;
    for (const int i : plan.segments) {
      int row_i;
      if (i == last) {
        row_i = last_row;
      } else {
        row_i = static_cast<int>(ts.size());
        ts.push_back(plan.t[static_cast<std::size_t>(i)]);
        point_ray->push_back(static_cast<int>(r));
      }
      const int row_n = static_cast<int>(ts.size());
      ts.push_back(plan.t[static_cast<std::size_t>(i) + 1]);
      point_ray->push_back(static_cast<int>(r));
      seg_a->push_back(row_i);
      seg_b->push_back(row_n);
      seg_ray->push_back(static_cast<int>(r));
      last = i + 1;
      last_row = row_n;
    }
  }
  if (seg_a->empty()) return intensity;

  Var t = tape.constant(Eigen::Map<const Matrix>(ts.data(), static_cast<Eigen::Index>(ts.size()), 1));
  Var pts = ad::gather_rows(origins, point_ray) + t * ad::gather_rows(dir, point_ray);
  Var f = field.eval(binding, pts);
  Var fi = ad::gather_rows(f, seg_a);
  Var fn = ad::gather_rows(f, seg_b);
  Var d = ad::softplus(-(sharpness * fi), 1.0) - ad::softplus(-(sharpness * fn), 1.0);
  Var keep = -ad::relu(-d);  // log(1 - alpha) = min(d, 0)
  Var log_t = ad::scatter_add_rows(keep, seg_ray, n);
  return intensity * ad::exp(log_t);
}

Var aggregate_boundary(Var c_near, Var c_far, Var w) { return w * c_near + (1.0 - w) * c_far; }

double aggregate_boundary(double c_near, double c_far, double w) { return w * c_near + (1.0 - w) * c_far; }

Var shadow_loss(Var c_in, const Matrix& target) {
  if (target.rows() != c_in.rows() || target.cols() != c_in.cols())
    throw std::invalid_argument("shadow_loss: target shape mismatch");
  return ad::mean(ad::abs(c_in - c_in.tape().constant(target)));
}

}  // namespace shadowray::shadow
