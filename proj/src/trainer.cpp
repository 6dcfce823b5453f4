#include "shadowray/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <iomanip>
#include <numbers>
#include <stdexcept>

namespace shadowray::trainer {

namespace fs = std::filesystem;
using ad::Tape;
using fields::GroundComposite;
using fields::NeuralSdf;
using fields::ParamBinding;

// ---- config -------------------------------------------------------------------------------

void TrainConfig::validate() const {
  auto positive = [](bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(std::string("train config: ") + what);
  };
  positive(iterations > 0, "iterations must be positive");
  positive(batch_images > 0, "batch_images must be positive");
  positive(pixels_per_image > 0, "pixels_per_image must be positive");
  positive(lr_peak > 0.0 && lr_min > 0.0 && lr_min <= lr_peak, "need 0 < lr_min <= lr_peak");
  positive(warmup_iters >= 0 && warmup_iters < iterations, "warmup_iters must be in [0, iterations)");
  positive(photometric_weight >= 0.0 && eikonal_weight >= 0.0 && pin_weight >= 0.0,
           "loss weights must be non-negative");
  positive(eikonal_samples >= 0, "eikonal_samples must be non-negative");
  positive(coarse_factor >= 1 && (coarse_factor & (coarse_factor - 1)) == 0, "coarse_factor must be a power of two");
  positive(coarse_fraction >= 0.0 && coarse_fraction <= 1.0, "coarse_fraction must be in [0, 1]");
  positive(grad_clip > 0.0, "grad_clip must be positive");
  positive(precision == "f64", "only precision f64 is supported");
  positive(march_steps >= 2 && shadow_uniform >= 2 && shadow_hierarchical >= 0, "sample counts too small");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"iterations", iterations},
          {"batch_images", batch_images},
          {"pixels_per_image", pixels_per_image},
          {"lr_peak", lr_peak},
          {"warmup_iters", warmup_iters},
          {"lr_min", lr_min},
          {"photometric_weight", photometric_weight},
          {"eikonal_weight", eikonal_weight},
          {"eikonal_samples", eikonal_samples},
          {"pin_weight", pin_weight},
          {"coarse_factor", coarse_factor},
          {"coarse_fraction", coarse_fraction},
          {"grad_clip", grad_clip},
          {"seed", seed},
          {"precision", precision},
          {"mode", shading::to_string(mode)},
          {"boundary_sampling", boundary_sampling},
          {"differentiable_intersection", differentiable_intersection},
          {"march_steps", march_steps},
          {"shadow_uniform", shadow_uniform},
          {"shadow_hierarchical", shadow_hierarchical},
          {"sdf", sdf.to_json()},
          {"material", material.to_json()}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("train config must be a JSON object");
  TrainConfig c;
  const nlohmann::json defaults = c.to_json();
  for (const auto& [key, value] : j.items())
    if (!defaults.contains(key)) throw std::invalid_argument("train config: unknown key '" + key + "'");
  try {
    c.iterations = j.value("iterations", c.iterations);
    c.batch_images = j.value("batch_images", c.batch_images);
    c.pixels_per_image = j.value("pixels_per_image", c.pixels_per_image);
    c.lr_peak = j.value("lr_peak", c.lr_peak);
    c.warmup_iters = j.value("warmup_iters", c.warmup_iters);
    c.lr_min = j.value("lr_min", c.lr_min);
    c.photometric_weight = j.value("photometric_weight", c.photometric_weight);
    c.eikonal_weight = j.value("eikonal_weight", c.eikonal_weight);
    c.eikonal_samples = j.value("eikonal_samples", c.eikonal_samples);
    c.pin_weight = j.value("pin_weight", c.pin_weight);
    c.coarse_factor = j.value("coarse_factor", c.coarse_factor);
    c.coarse_fraction = j.value("coarse_fraction", c.coarse_fraction);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.seed = j.value("seed", c.seed);
    c.precision = j.value("precision", c.precision);
    if (j.contains("mode")) c.mode = shading::supervision_from_string(j.at("mode").get<std::string>());
    c.boundary_sampling = j.value("boundary_sampling", c.boundary_sampling);
    c.differentiable_intersection = j.value("differentiable_intersection", c.differentiable_intersection);
    c.march_steps = j.value("march_steps", c.march_steps);
    c.shadow_uniform = j.value("shadow_uniform", c.shadow_uniform);
    c.shadow_hierarchical = j.value("shadow_hierarchical", c.shadow_hierarchical);
    if (j.contains("sdf")) c.sdf = fields::SdfNetworkConfig::from_json(j.at("sdf"));
    if (j.contains("material")) c.material = fields::MaterialNetworkConfig::from_json(j.at("material"));
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("train config: ") + e.what());
  }
  return c;
}

std::uint64_t TrainConfig::hash() const {
  std::uint64_t h = 1469598103934665603ull;
  for (const unsigned char ch : to_json().dump()) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

double lr_at(int step, const TrainConfig& c) {
  if (step < 0 || step > c.iterations) throw std::out_of_range("lr_at: step outside [0, iterations]");
  if (step < c.warmup_iters) return c.lr_peak * step / c.warmup_iters;
  const double progress = static_cast<double>(step - c.warmup_iters) / (c.iterations - c.warmup_iters);
  return c.lr_min + 0.5 * (c.lr_peak - c.lr_min) * (1.0 + std::cos(std::numbers::pi * progress));
}

int pyramid_factor(int step, const TrainConfig& c, int resolution) {
  int start = 1;
  while (start < c.coarse_factor && resolution % (2 * start) == 0) start *= 2;
  // stage k (factor start / 2^k) ends at coarse_fraction * 2^k of the run
  const double progress = static_cast<double>(step) / c.iterations;
  int factor = start;
  double end = c.coarse_fraction;
  while (factor > 1 && progress >= end) {
    factor /= 2;
    end *= 2.0;
  }
  return factor;
}

// ---- model ----------------------------------------------------------------------------------

Model::Model(const fields::SdfNetworkConfig& sdf_config, const std::optional<fields::MaterialNetworkConfig>& mat)
    : sdf(sdf_config, params) {
  if (mat) material.emplace(*mat, sdf_config.feature_size, params);
}

void Model::initialize(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  sdf.initialize(params, rng);
  if (material) material->initialize(params, rng);
}

Model make_model(const TrainConfig& config) {
  Model m(config.sdf, config.mode == Supervision::Rgb ? std::optional(config.material) : std::nullopt);
  m.initialize(config.seed);
  return m;
}

// ---- data -------------------------------------------------------------------------------------

TrainingData::TrainingData(SceneDataset dataset) : dataset_(std::move(dataset)) {
  if (dataset_.images.empty()) throw std::invalid_argument("training data: the dataset has no images");
}

const Raster& TrainingData::level(int image, int factor) const {
  const auto key = std::make_pair(image, factor);
  auto it = levels_.find(key);
  if (it == levels_.end())
    it = levels_.emplace(key, dataset_.images.at(static_cast<std::size_t>(image)).raster.downsample(factor)).first;
  return it->second;
}

const CameraModel& TrainingData::camera(int factor) const {
  auto it = cameras_.find(factor);
  if (it == cameras_.end()) it = cameras_.emplace(factor, dataset_.camera.downscaled(factor)).first;
  return it->second;
}

std::vector<PixelSample> sample_batch(const TrainingData& data, std::mt19937_64& rng, int factor,
                                      int batch_images, int pixels_per_image) {
  const int n = static_cast<int>(data.dataset().images.size());
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  const int k = std::min(batch_images, n);
  // partial Fisher-Yates: the first k entries are a uniform draw without replacement
  for (int i = 0; i < k; ++i) {
    std::uniform_int_distribution<int> pick(i, n - 1);
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(pick(rng))]);
  }
  const CameraModel& cam = data.camera(factor);
  std::uniform_int_distribution<int> px(0, cam.width - 1), py(0, cam.height - 1);
  std::vector<PixelSample> out;
  out.reserve(static_cast<std::size_t>(k * pixels_per_image));
  for (int i = 0; i < k; ++i) {
    const int img = order[static_cast<std::size_t>(i)];
    const Raster& r = data.level(img, factor);
    for (int p = 0; p < pixels_per_image; ++p) {
      PixelSample s;
      s.image = img;
      s.pixel = Vec2i(px(rng), py(rng));
      s.target.resize(r.channels);
      for (int c = 0; c < r.channels; ++c) s.target(c) = r.at(s.pixel.x(), s.pixel.y(), c);
      out.push_back(std::move(s));
    }
  }
  return out;
}

// ---- batch ------------------------------------------------------------------------------------

namespace {

shadow::ShadowOptions shadow_options(const TrainConfig& config, const SceneDataset& ds) {
  shadow::ShadowOptions o;
  o.uniform_samples = config.shadow_uniform;
  o.hierarchical_samples = config.shadow_hierarchical;
  o.falloff = ds.falloff;
  return o;
}

std::shared_ptr<const ad::Index> make_index(std::vector<int> v) {
  return std::make_shared<const ad::Index>(std::move(v));
}

}  // namespace

Matrix eikonal_points(std::mt19937_64& rng, int count, const Matrix& surface) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  Matrix out(count, 3);
  const int jittered = surface.rows() > 0 ? count / 2 : 0;
  for (int r = 0; r < count; ++r) {
    if (r < jittered) {
      std::uniform_int_distribution<Eigen::Index> pick(0, surface.rows() - 1);
      const Eigen::Index s = pick(rng);
      for (int c = 0; c < 3; ++c) out(r, c) = surface(s, c) + 0.02 * gauss(rng);
    } else {
      Vec3 d(gauss(rng), gauss(rng), gauss(rng));
      d.normalize();
      out.row(r) = (std::cbrt(uni(rng)) * d).transpose();
    }
  }
  return out;
}

BatchPlan plan_batch(const Model& model, const TrainingData& data, const std::vector<PixelSample>& batch,
                     int factor, const TrainConfig& config, std::mt19937_64& rng) {
  const SceneDataset& ds = data.dataset();
  const CameraModel& cam = data.camera(factor);
  const NeuralSdf field(model.sdf, model.params);
  raycast::RayContext ctx;
  ctx.field = &field;
  ctx.camera = &cam;
  ctx.ground = &ds.ground;
  ctx.options.steps = config.march_steps;

  std::vector<Vec2> centres;
  std::vector<Vec2i> pix;
  centres.reserve(batch.size());
  for (const auto& s : batch) {
    pix.push_back(s.pixel);
    centres.emplace_back(s.pixel.x() + 0.5, s.pixel.y() + 0.5);
  }
  const auto traces = ctx.trace(centres);
  std::vector<raycast::BoundaryInfo> info;
  if (config.boundary_sampling) info = raycast::detect_boundaries(ctx, pix, traces, {}, factor);

  BatchPlan plan;
  plan.factor = factor;
  std::vector<Vec3> pts, dirs;
  std::vector<int> owner_image;
  auto add_point = [&](const raycast::Intersection& h, const Vec3& dir, int image) {
    pts.push_back(h.x);
    dirs.push_back(dir);
    plan.object.push_back(h.hit_object() ? 1 : 0);
    owner_image.push_back(image);
    return static_cast<int>(pts.size()) - 1;
  };
  for (std::size_t k = 0; k < batch.size(); ++k) {
    BatchPlan::Pixel p;
    p.target = batch[k].target;
    if (!info.empty() && info[k].is_boundary) {
      const auto& b = info[k];
      p.near = add_point(b.near.hit, b.near.dir, batch[k].image);
      p.far = add_point(b.far.hit, b.far.dir, batch[k].image);
      p.boundary = static_cast<int>(plan.boundaries.size());
      plan.boundaries.push_back(b);
    } else {
      const auto& h = traces[k].hit;
      if (!h.valid) continue;
      p.near = p.far = add_point(h, (h.x - cam.center()).normalized(), batch[k].image);
    }
    plan.pixels.push_back(std::move(p));
  }
  const auto n = static_cast<Eigen::Index>(pts.size());
  plan.points.resize(n, 3);
  plan.dirs.resize(n, 3);
  for (Eigen::Index r = 0; r < n; ++r) {
    plan.points.row(r) = pts[static_cast<std::size_t>(r)].transpose();
    plan.dirs.row(r) = dirs[static_cast<std::size_t>(r)].transpose();
  }

  if (config.photometric_weight > 0.0) {
    for (Eigen::Index r = 0; r < n; ++r)
      for (const auto& l : ds.images[static_cast<std::size_t>(owner_image[static_cast<std::size_t>(r)])].lights) {
        plan.ray_point.push_back(static_cast<int>(r));
        plan.ray_light.push_back(&l);
      }
    Matrix origins(static_cast<Eigen::Index>(plan.ray_point.size()), 3);
    for (std::size_t i = 0; i < plan.ray_point.size(); ++i)
      origins.row(static_cast<Eigen::Index>(i)) = plan.points.row(plan.ray_point[i]);
    const double s = model.sdf.sharpness(model.params);
    const auto opt = shadow_options(config, ds);
    if (ds.ground.depth) {
      plan.plans = shadow::plan_shadow_rays(field, s, origins, plan.ray_light, opt);
    } else {
      const GroundComposite scene(field, ds.ground);
      plan.plans = shadow::plan_shadow_rays(scene, s, origins, plan.ray_light, opt);
    }
  }
  plan.eikonal = eikonal_points(rng, config.eikonal_samples, plan.points);
  return plan;
}

BatchLoss batch_loss(const ParamBinding& binding, const Model& model, const TrainingData& data,
                     const BatchPlan& plan, const TrainConfig& config) {
  Tape& tape = binding.tape();
  const SceneDataset& ds = data.dataset();
  const NeuralSdf field(model.sdf, binding.params());
  const GroundComposite composite(field, ds.ground);
  const fields::SdfField& shadow_field =
      ds.ground.depth ? static_cast<const fields::SdfField&>(field) : static_cast<const fields::SdfField&>(composite);
  BatchLoss out;
  const Eigen::Index n = plan.points.rows();
  const auto p = static_cast<Eigen::Index>(plan.pixels.size());

  Var photo;
  if (config.photometric_weight > 0.0 && p > 0) {
    // differentiable surface points: object hits move with the field, ground hits are known
    Var xh = tape.constant(plan.points);
    std::vector<int> obj;
    for (Eigen::Index r = 0; r < n; ++r)
      if (plan.object[static_cast<std::size_t>(r)]) obj.push_back(static_cast<int>(r));
    if (config.differentiable_intersection && !obj.empty()) {
      Matrix xo(static_cast<Eigen::Index>(obj.size()), 3), vo(static_cast<Eigen::Index>(obj.size()), 3);
      Matrix rest = plan.points;
      for (std::size_t i = 0; i < obj.size(); ++i) {
        xo.row(static_cast<Eigen::Index>(i)) = plan.points.row(obj[i]);
        vo.row(static_cast<Eigen::Index>(i)) = plan.dirs.row(obj[i]);
        rest.row(obj[i]).setZero();
      }
      Var xo_hat = raycast::differentiable_intersection(tape, field, &binding, xo, vo);
      xh = ad::scatter_add_rows(xo_hat, make_index(obj), n) + tape.constant(rest);
    }

    const auto rays = make_index(plan.ray_point);
    const auto nr = static_cast<Eigen::Index>(plan.ray_point.size());
    Var xr = ad::gather_rows(xh, rays);
    Var c_in = shadow::incoming_radiance(tape, shadow_field, &binding, xr, model.sdf.sharpness(binding),
                                         plan.ray_light, plan.plans, shadow_options(config, ds));
    Var value;  // per surface point
    if (config.mode == Supervision::Shadow) {
      value = ad::scatter_add_rows(c_in, rays, n);
    } else {
      if (!model.material) throw std::logic_error("rgb training needs a material network");
      const auto nrm = fields::normal(shadow_field, &binding, xh, false).unit;
      const auto sdf_out = model.sdf.forward(binding, xh, true);
      const auto mat = model.material->forward(binding, xh, nrm, sdf_out.feature);
      Matrix lp = Matrix::Zero(nr, 3), ld = Matrix::Zero(nr, 3), pm = Matrix::Zero(nr, 1), v(nr, 3);
      for (Eigen::Index i = 0; i < nr; ++i) {
        const auto& light = *plan.ray_light[static_cast<std::size_t>(i)];
        if (light.kind == shadow::LightSource::Kind::Point) {
          lp.row(i) = light.position.transpose();
          pm(i) = 1.0;
        } else {
          ld.row(i) = light.direction.transpose();
        }
        v.row(i) = plan.dirs.row(plan.ray_point[static_cast<std::size_t>(i)]);
      }
      Var to_light = tape.constant(lp) - xr;
      Var l = tape.constant(ld) + tape.constant(pm) * (to_light / ad::norm_rows(to_light, 1e-12));
      Var colour = shading::render_outgoing(ad::gather_rows(nrm, rays), l, v, ad::gather_rows(mat.albedo, rays),
                                            ad::gather_rows(mat.specular, rays), c_in);
      value = ad::scatter_add_rows(colour, rays, n);
    }

    // pixel values: w near + (1 - w) far, w = 1 away from boundaries
    std::vector<int> near, far, bpix;
    std::vector<const raycast::BoundaryInfo*> bptr;
    Matrix w_fixed = Matrix::Ones(p, 1);
    const int channels = static_cast<int>(plan.pixels.front().target.size());
    Matrix target(p, channels);
    for (Eigen::Index k = 0; k < p; ++k) {
      const auto& px = plan.pixels[static_cast<std::size_t>(k)];
      near.push_back(px.near);
      far.push_back(px.far);
      target.row(k) = px.target.transpose();
      if (px.boundary >= 0) {
        bpix.push_back(static_cast<int>(k));
        bptr.push_back(&plan.boundaries[static_cast<std::size_t>(px.boundary)]);
        w_fixed(k) = 0.0;
      }
    }
    Var w = tape.constant(w_fixed);
    if (!bptr.empty()) {
      Var wb = raycast::area_ratio(tape, field, &binding, data.camera(plan.factor), bptr);
      w = w + ad::scatter_add_rows(wb, make_index(bpix), p);
    }
    Var vn = ad::gather_rows(value, make_index(near));
    Var vf = ad::gather_rows(value, make_index(far));
    Var pred = shadow::aggregate_boundary(vn, vf, w);
    photo = config.mode == Supervision::Shadow ? shadow::shadow_loss(pred, target) : shading::rgb_loss(pred, target);
    out.terms.photometric = photo.scalar();
    out.terms.boundary_pixels = static_cast<int>(bptr.size());
    photo = photo * config.photometric_weight;
  } else {
    photo = tape.constant(0.0);
  }

  Var eik = plan.eikonal.rows() > 0 ? fields::eikonal_loss(field, &binding, plan.eikonal) : tape.constant(0.0);
  out.terms.eikonal = eik.scalar();

  Var pin;
  if (ds.ground.depth) {
    std::vector<Eigen::Index> g;
    for (Eigen::Index r = 0; r < n; ++r)
      if (!plan.object[static_cast<std::size_t>(r)]) g.push_back(r);
    if (!g.empty()) {
      Matrix gp(static_cast<Eigen::Index>(g.size()), 3);
      for (std::size_t i = 0; i < g.size(); ++i) gp.row(static_cast<Eigen::Index>(i)) = plan.points.row(g[i]);
      pin = ad::mean(ad::square(field.eval(&binding, tape.constant(gp))));
      out.terms.pin = pin.scalar();
    }
  }
  out.total = shading::total_loss(photo, eik, config.eikonal_weight, pin, pin.valid() ? config.pin_weight : 0.0);
  out.terms.total = out.total.scalar();
  return out;
}

// ---- optimiser ---------------------------------------------------------------------------------

void adam_step(Eigen::VectorXd& theta, const Eigen::VectorXd& grad, AdamState& st, int t, double lr) {
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  if (st.m.size() != theta.size()) st.m = Eigen::VectorXd::Zero(theta.size());
  if (st.v.size() != theta.size()) st.v = Eigen::VectorXd::Zero(theta.size());
  st.m = b1 * st.m + (1.0 - b1) * grad;
  st.v = b2 * st.v + (1.0 - b2) * grad.cwiseAbs2();
  const double c1 = 1.0 - std::pow(b1, t), c2 = 1.0 - std::pow(b2, t);
  theta.array() -= lr * (st.m.array() / c1) / ((st.v.array() / c2).sqrt() + eps);
}

// ---- checkpoints --------------------------------------------------------------------------------

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  fields::ParameterFile f;
  f.header = {{"kind", "shadowray-checkpoint"},
              {"step", ckpt.step},
              {"config", ckpt.config.to_json()},
              {"config_hash", ckpt.config.hash()},
              {"data_dir", ckpt.data_dir}};
  f.params = ckpt.model.params;
  const Eigen::Index size = ckpt.model.params.size();
  f.extra.emplace_back("adam_m", ckpt.adam.m.size() == size ? ckpt.adam.m : Eigen::VectorXd::Zero(size));
  f.extra.emplace_back("adam_v", ckpt.adam.v.size() == size ? ckpt.adam.v : Eigen::VectorXd::Zero(size));
  const fs::path tmp = path + ".tmp";
  fields::save_parameter_file(tmp.string(), f);
  fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
  if (!fs::is_regular_file(path)) throw std::invalid_argument("checkpoint not found: " + path);
  const fields::ParameterFile f = fields::load_parameter_file(path);
  if (f.header.value("kind", "") != "shadowray-checkpoint")
    throw std::invalid_argument(path + ": not a training checkpoint");
  const TrainConfig config = TrainConfig::from_json(f.header.at("config"));
  if (f.header.at("config_hash").get<std::uint64_t>() != config.hash())
    throw std::invalid_argument(path + ": config hash mismatch");
  Checkpoint c{config, make_model(config), {}, f.header.at("step").get<int>(), f.header.value("data_dir", "")};
  if (!c.model.params.same_layout(f.params))
    throw std::invalid_argument(path + ": parameter layout does not match the configured networks");
  c.model.params.values() = f.params.values();
  for (const auto& [name, v] : f.extra) {
    if (name == "adam_m") c.adam.m = v;
    if (name == "adam_v") c.adam.v = v;
  }
  return c;
}

// ---- loop ------------------------------------------------------------------------------------------

namespace {

std::mt19937_64 step_rng(std::uint64_t seed, int step) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(step)};
  return std::mt19937_64(seq);
}

}  // namespace

Checkpoint train(const TrainingData& data, const TrainConfig& config, const TrainOptions& options) {
  config.validate();
  const SceneDataset& ds = data.dataset();
  if (ds.type != config.mode)
    throw std::invalid_argument("dataset supervision '" + shading::to_string(ds.type) +
                                "' does not match training mode '" + shading::to_string(config.mode) + "'");

  Checkpoint ck{config, make_model(config), {}, 0, options.data_dir};
  if (options.resume) {
    Checkpoint prev = load_checkpoint(*options.resume);
    if (prev.config.hash() != config.hash())
      throw std::invalid_argument("cannot resume " + *options.resume + ": it was trained with a different config");
    ck.model.params.values() = prev.model.params.values();
    ck.adam = std::move(prev.adam);
    ck.step = prev.step;
  }

  const bool files = !options.out_dir.empty();
  std::ofstream log;
  if (files) {
    fs::create_directories(options.out_dir);
    const fs::path csv = fs::path(options.out_dir) / "metrics.csv";
    const bool fresh = !options.resume || !fs::exists(csv);
    log.open(csv, fresh ? std::ios::trunc : std::ios::app);
    if (!log) throw std::runtime_error("cannot write " + csv.string());
    if (fresh) log << "step,loss,photometric,eikonal,pin,lr,sharpness,grad_norm,factor,boundary_pixels\n";
    log << std::setprecision(9);
  }
  auto save = [&](const std::string& name) {
    if (files) save_checkpoint((fs::path(options.out_dir) / name).string(), ck);
  };

  const int end = options.stop_after > 0 ? std::min(options.stop_after, config.iterations) : config.iterations;
  while (ck.step < end) {
    const int step = ck.step;
    std::mt19937_64 rng = step_rng(config.seed, step);
    const int factor = pyramid_factor(step, config, data.resolution());
    const auto batch = sample_batch(data, rng, factor, config.batch_images, config.pixels_per_image);
    const BatchPlan plan = plan_batch(ck.model, data, batch, factor, config, rng);

    Tape tape;
    ParamBinding binding(tape, ck.model.params, true);
    const BatchLoss loss = batch_loss(binding, ck.model, data, plan, config);
    Eigen::VectorXd grad = binding.gradient(loss.total);
    const double gnorm = grad.norm();
    if (!std::isfinite(loss.terms.total) || !std::isfinite(gnorm)) {
      save("last_good.bin");
      throw TrainingAborted("non-finite loss or gradient at step " + std::to_string(step) +
                            (files ? "; last good state saved to " + (fs::path(options.out_dir) / "last_good.bin").string()
                                   : std::string()));
    }
    if (gnorm > config.grad_clip) grad *= config.grad_clip / gnorm;
    const double lr = lr_at(step, config);
    adam_step(ck.model.params.values(), grad, ck.adam, step + 1, lr);
    ck.step = step + 1;

    LogRow row{ck.step, loss.terms, lr, ck.model.sdf.sharpness(ck.model.params), gnorm, factor};
    if (files)
      log << row.step << ',' << row.terms.total << ',' << row.terms.photometric << ',' << row.terms.eikonal << ','
          << row.terms.pin << ',' << row.lr << ',' << row.sharpness << ',' << row.grad_norm << ',' << row.factor
          << ',' << row.terms.boundary_pixels << '\n';
    if (options.on_log && (ck.step % std::max(options.log_every, 1) == 0 || ck.step == end)) options.on_log(row);
    if (options.checkpoint_every > 0 && ck.step % options.checkpoint_every == 0) save("checkpoint.bin");
  }
  save("checkpoint.bin");
  return ck;
}

}  // namespace shadowray::trainer
