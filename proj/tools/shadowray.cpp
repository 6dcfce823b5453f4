// shadowray: dataset generation, training, evaluation, mesh export,
// relighting and a gradient self-check from one executable.

#include "shadowray/evaluate.hpp"
#include "shadowray/scenes.hpp"
#include "shadowray/trainer.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <unistd.h>

using namespace shadowray;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Validation problems (bad flags, bad config, missing inputs) exit with 1;
// everything else that goes wrong at run time exits with 2.
struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Every flag writes to a JSON path. A config file supplies the same paths;
// flags given on the command line win.
class Flags {
 public:
  explicit Flags(CLI::App* app) : app_(app) {}

  void option(const std::string& flag, const std::string& path, const std::string& help) {
    auto& slot = strings_[path];
    opts_.push_back({app_->add_option(flag, slot, help), path, false});
  }
  void flag(const std::string& flag, const std::string& path, const std::string& help, bool value = true) {
    auto& slot = bools_[path];
    opts_.push_back({app_->add_flag(flag, slot, help), path, true});
    flag_values_[path] = value;
  }

  // Merged config: file first, then the flags that were given.
  json merged(const std::string& config_file) const {
    json j = json::object();
    if (!config_file.empty()) {
      std::ifstream f(config_file);
      if (!f) throw UsageError("cannot open config file '" + config_file + "'");
      try {
        j = json::parse(f);
      } catch (const json::exception& e) {
        throw UsageError("config file '" + config_file + "': " + e.what());
      }
      if (!j.is_object()) throw UsageError("config file '" + config_file + "' must hold a JSON object");
    }
    for (const auto& o : opts_) {
      if (o.opt->count() == 0) continue;
      const json::json_pointer ptr(o.path);
      if (o.is_flag) {
        j[ptr] = flag_values_.at(o.path);
        continue;
      }
      const std::string& s = strings_.at(o.path);
      json v;
      try {
        v = json::parse(s);
        if (v.is_object() || v.is_array()) v = s;
      } catch (const json::exception&) {
        v = s;
      }
      j[ptr] = v;
    }
    return j;
  }

 private:
  struct Entry {
    CLI::Option* opt;
    std::string path;
    bool is_flag;
  };
  CLI::App* app_;
  std::vector<Entry> opts_;
  std::map<std::string, std::string> strings_;
  std::map<std::string, bool> bools_;
  std::map<std::string, bool> flag_values_;
};

template <class T>
T take(json& j, const std::string& key, const T& fallback) {
  if (!j.contains(key)) return fallback;
  try {
    T v = j.at(key).get<T>();
    j.erase(key);
    return v;
  } catch (const json::exception&) {
    throw UsageError("option '" + key + "' has the wrong type: " + j.at(key).dump());
  }
}

std::string require(json& j, const std::string& key) {
  const std::string v = take<std::string>(j, key, "");
  if (v.empty()) throw UsageError("missing required option --" + key);
  return v;
}

void reject_leftovers(const json& j, const std::string& command) {
  for (const auto& [k, v] : j.items()) throw UsageError(command + ": unknown config key '" + k + "'");
}

void echo(const std::string& command, const json& effective) {
  std::cout << "shadowray " << command << " effective config: " << effective.dump() << std::endl;
}

int thread_count(bool deterministic) {
  int n = 1;
  if (const char* env = std::getenv("SHADOWRAY_THREADS"); env && *env) {
    try {
      std::size_t used = 0;
      n = std::stoi(env, &used);
      if (used != std::string(env).size() || n < 1) throw std::invalid_argument("");
    } catch (const std::exception&) {
      throw UsageError(std::string("SHADOWRAY_THREADS must be a positive integer, got '") + env + "'");
    }
  }
  if (deterministic) n = 1;
  // the pipeline runs serially; the value is validated and reported only
  return n;
}

std::string checkpoint_path(const std::string& ckpt) {
  fs::path p(ckpt);
  if (fs::is_directory(p)) p /= "checkpoint.bin";
  if (!fs::exists(p)) throw UsageError("checkpoint not found: " + p.string());
  return p.string();
}

Vec3 parse_vec3(const json& v, const std::string& what) {
  std::vector<double> xs;
  try {
    if (v.is_array()) {
      xs = v.get<std::vector<double>>();
    } else {
      std::stringstream ss(v.get<std::string>());
      std::string part;
      while (std::getline(ss, part, ',')) xs.push_back(std::stod(part));
    }
  } catch (const std::exception&) {
    xs.clear();
  }
  if (xs.size() != 3) throw UsageError(what + " must be three comma-separated numbers");
  return {xs[0], xs[1], xs[2]};
}

void write_image(const std::string& path, const Raster& r) {
  if (fs::path(path).extension() == ".pfm")
    write_pfm(path, r);
  else
    write_png(path, r, true);
}

// ---- subcommands --------------------------------------------------------------------------

int gen_data(json j) {
  echo("gen-data", j);
  scenes::GenerateOptions g;
  g.scene = take<std::string>(j, "scene", g.scene);
  g.lights = take<int>(j, "lights", g.lights);
  g.lights_per_image = take<int>(j, "lights_per_image", g.lights_per_image);
  g.point_lights = take<bool>(j, "point_lights", g.point_lights);
  g.point_radius = take<double>(j, "point_radius", g.point_radius);
  g.resolution = take<int>(j, "res", g.resolution);
  g.seed = take<std::uint64_t>(j, "seed", g.seed);
  const std::string type = take<std::string>(j, "type", "binary");
  const std::string out = require(j, "out");
  reject_leftovers(j, "gen-data");
  try {
    g.type = shading::supervision_from_string(type);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  try {
    (void)scenes::builtin_scene(g.scene, 8);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const auto ds = scenes::generate_dataset(g, out);
  std::cout << "wrote " << ds.images.size() << " images of " << ds.camera.width << "x" << ds.camera.height << " to "
            << out << std::endl;
  return 0;
}

int train(json j) {
  const bool deterministic = take<bool>(j, "deterministic", false);
  const int threads = thread_count(deterministic);
  const std::string data_dir = require(j, "data");
  const std::string out = require(j, "out");
  const std::string resume = take<std::string>(j, "resume", "");
  const int holdout = take<int>(j, "holdout", 0);
  trainer::TrainOptions opt;
  opt.stop_after = take<int>(j, "stop_after", -1);
  opt.checkpoint_every = take<int>(j, "checkpoint_every", opt.checkpoint_every);
  opt.log_every = take<int>(j, "log_every", opt.log_every);
  if (opt.checkpoint_every < 1 || opt.log_every < 1) throw UsageError("checkpoint_every and log_every must be >= 1");

  trainer::TrainConfig config;
  try {
    config = trainer::TrainConfig::from_json(j);
    config.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  json effective = config.to_json();
  effective["data"] = data_dir;
  effective["out"] = out;
  effective["resume"] = resume;
  effective["holdout"] = holdout;
  effective["stop_after"] = opt.stop_after;
  effective["checkpoint_every"] = opt.checkpoint_every;
  effective["log_every"] = opt.log_every;
  effective["deterministic"] = deterministic;
  echo("train", effective);
  std::cout << "threads: " << threads << std::endl;

  scenes::SceneDataset ds;
  try {
    ds = scenes::load_dataset(data_dir);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  if (holdout < 0 || holdout >= static_cast<int>(ds.images.size()))
    throw UsageError("holdout must leave at least one training image");
  ds.images.resize(ds.images.size() - static_cast<std::size_t>(holdout));

  opt.out_dir = out;
  opt.data_dir = data_dir;
  if (!resume.empty()) opt.resume = checkpoint_path(resume);
  opt.on_log = [](const trainer::LogRow& r) {
    std::cout << "step " << r.step << " loss " << r.terms.total << " photometric " << r.terms.photometric
              << " eikonal " << r.terms.eikonal << " lr " << r.lr << " s " << r.sharpness << " factor " << r.factor
              << std::endl;
  };
  const trainer::TrainingData data(ds);
  const auto ck = trainer::train(data, config, opt);
  std::cout << "finished at step " << ck.step << "; checkpoint " << (fs::path(out) / "checkpoint.bin").string()
            << std::endl;
  return 0;
}

struct Loaded {
  trainer::Checkpoint ckpt;
  scenes::SceneDataset dataset;
};

Loaded load(json& j) {
  const std::string path = checkpoint_path(require(j, "ckpt"));
  Loaded l{trainer::load_checkpoint(path), {}};
  std::string data = take<std::string>(j, "data", "");
  if (data.empty()) data = l.ckpt.data_dir;
  if (data.empty()) throw UsageError("no dataset: pass --data");
  try {
    l.dataset = scenes::load_dataset(data);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  return l;
}

int eval(json j) {
  echo("eval", j);
  Loaded l = load(j);
  evaluate::EvalOptions o;
  o.march_steps = take<int>(j, "march_steps", o.march_steps);
  o.mesh_resolution = take<int>(j, "mesh_res", o.mesh_resolution);
  o.tau = take<double>(j, "tau", o.tau);
  o.coverage_samples = take<int>(j, "coverage_samples", o.coverage_samples);
  const std::string out = take<std::string>(j, "out", "");
  reject_leftovers(j, "eval");
  if (o.mesh_resolution != 0 && o.mesh_resolution < 16) throw UsageError("mesh_res must be 0 or >= 16");
  json report = evaluate::evaluate_model(l.ckpt.model, l.dataset, o).to_json();
  report["step"] = l.ckpt.step;
  std::cout << "metric,value\n";
  for (const auto& [k, v] : report.items()) std::cout << k << "," << v.dump() << "\n";
  std::cout.flush();
  if (!out.empty()) {
    std::ofstream f(out);
    if (!f) throw std::runtime_error("cannot write '" + out + "'");
    f << report.dump(2) << "\n";
  }
  return 0;
}

int mesh(json j) {
  echo("mesh", j);
  const std::string path = checkpoint_path(require(j, "ckpt"));
  const int res = take<int>(j, "res", 128);
  const std::string out = require(j, "out");
  reject_leftovers(j, "mesh");
  if (res < 16) throw UsageError("res must be >= 16");
  const auto ck = trainer::load_checkpoint(path);
  const fields::NeuralSdf f(ck.model.sdf, ck.model.params);
  const auto m = evaluate::extract_mesh(f, res);
  evaluate::write_obj(out, m);
  std::cout << "wrote " << m.vertices.rows() << " vertices, " << m.triangles.rows() << " triangles to " << out
            << std::endl;
  return 0;
}

int relight(json j) {
  echo("relight", j);
  Loaded l = load(j);
  const std::string out = require(j, "out");
  const int image = take<int>(j, "image", -1);
  const bool has_dir = j.contains("light_dir"), has_pos = j.contains("light_pos");
  evaluate::RenderOptions ro;
  ro.march_steps = take<int>(j, "march_steps", ro.march_steps);
  ro.shadow.falloff = l.dataset.falloff;
  std::vector<shadow::LightSource> lights;
  if ((image >= 0) + has_dir + has_pos != 1) throw UsageError("give exactly one of --image, --light-dir, --light-pos");
  if (image >= 0) {
    if (image >= static_cast<int>(l.dataset.images.size()))
      throw UsageError("image index " + std::to_string(image) + " out of range");
    lights = l.dataset.images[static_cast<std::size_t>(image)].lights;
  } else if (has_dir) {
    lights.push_back(shadow::LightSource::directional(parse_vec3(j["light_dir"], "light_dir").normalized(),
                                                      take<double>(j, "intensity", 1.0)));
    j.erase("light_dir");
  } else {
    const Vec3 q = parse_vec3(j["light_pos"], "light_pos");
    lights.push_back(shadow::LightSource::point(q, take<double>(j, "intensity", q.squaredNorm())));
    j.erase("light_pos");
  }
  j.erase("intensity");
  reject_leftovers(j, "relight");
  if (!l.ckpt.model.material) throw UsageError("relighting needs a model trained in rgb mode");
  const Raster img = evaluate::render_image(l.ckpt.model, l.dataset.camera, l.dataset.ground, lights, true, ro);
  write_image(out, img);
  std::cout << "wrote " << out << std::endl;
  if (image >= 0) {
    const double e = evaluate::relight_error(l.ckpt.model, l.dataset, lights,
                                             l.dataset.images[static_cast<std::size_t>(image)].raster, ro);
    std::cout << "mean absolute error off-boundary: " << e << std::endl;
  }
  return 0;
}

int grad_check(json j) {
  echo("grad-check", j);
  const auto seed = take<std::uint64_t>(j, "seed", 1);
  const std::string mode = take<std::string>(j, "mode", "both");
  const int stride = take<int>(j, "stride", 1);
  reject_leftovers(j, "grad-check");
  std::vector<shading::Supervision> modes;
  if (mode == "both")
    modes = {shading::Supervision::Shadow, shading::Supervision::Rgb};
  else
    try {
      modes = {shading::supervision_from_string(mode)};
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  if (stride < 1) throw UsageError("stride must be >= 1");
  double worst = 0.0;
  const fs::path scratch = fs::temp_directory_path() / ("shadowray_gradcheck_" + std::to_string(::getpid()));
  for (const auto m : modes) {
    const auto r = evaluate::gradient_check(m, seed, (scratch / shading::to_string(m)).string(), stride);
    std::cout << shading::to_string(m) << ": max relative error " << r.max_relative_error << " over " << r.checked
              << " parameters" << std::endl;
    worst = std::max(worst, r.max_relative_error);
  }
  std::error_code ec;
  fs::remove_all(scratch, ec);
  std::cout << "max relative error " << worst << std::endl;
  return worst < 1e-4 ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Shape from shadows: neural SDF reconstruction from shadow and rgb images"};
  app.require_subcommand(1, 1);
  std::map<std::string, std::string> config_files;
  std::map<std::string, std::unique_ptr<Flags>> flags;

  auto sub = [&](const std::string& name, const std::string& help) {
    CLI::App* s = app.add_subcommand(name, help);
    s->add_option("--config", config_files[name], "JSON file with the same keys as the flags");
    flags[name] = std::make_unique<Flags>(s);
    return flags[name].get();
  };

  Flags* g = sub("gen-data", "Render a synthetic dataset from a built-in scene");
  g->option("--scene", "/scene", "sphere-plane, two-spheres, box-plane or bumpy-ground");
  g->option("--lights", "/lights", "number of images");
  g->option("--lights-per-image", "/lights_per_image", "lights summed into each image");
  g->option("--type", "/type", "binary or rgb");
  g->flag("--point-lights", "/point_lights", "point lights instead of directional");
  g->option("--point-radius", "/point_radius", "shell radius of point lights");
  g->option("--res", "/res", "image width and height");
  g->option("--seed", "/seed", "light sampling seed");
  g->option("--out", "/out", "output directory");

  Flags* t = sub("train", "Fit the SDF (and material) to a dataset");
  t->option("--data", "/data", "dataset directory");
  t->option("--out", "/out", "output directory for checkpoint.bin and metrics.csv");
  t->option("--mode", "/mode", "binary or rgb");
  t->option("--iters", "/iterations", "iterations");
  t->option("--seed", "/seed", "training seed");
  t->option("--lr", "/lr_peak", "peak learning rate");
  t->option("--warmup", "/warmup_iters", "warmup iterations");
  t->option("--batch-images", "/batch_images", "images per batch");
  t->option("--pixels", "/pixels_per_image", "pixels per image per batch");
  t->option("--eikonal-weight", "/eikonal_weight", "Eikonal loss weight");
  t->option("--march-steps", "/march_steps", "camera-ray march steps");
  t->option("--shadow-samples", "/shadow_uniform", "uniform samples per shadow ray");
  t->option("--shadow-hierarchical", "/shadow_hierarchical", "hierarchical samples per shadow ray");
  t->option("--sdf-width", "/sdf/width", "SDF network width");
  t->option("--sdf-depth", "/sdf/depth", "SDF network hidden layers");
  t->flag("--no-boundary-sampling", "/boundary_sampling", "single ray per pixel (ablation)", false);
  t->flag("--no-diff-intersection", "/differentiable_intersection", "stop-gradient intersection (ablation)", false);
  t->option("--resume", "/resume", "checkpoint (file or directory) to continue from");
  t->option("--stop-after", "/stop_after", "stop at this step");
  t->option("--checkpoint-every", "/checkpoint_every", "checkpoint interval");
  t->option("--log-every", "/log_every", "log interval");
  t->option("--holdout", "/holdout", "leave the last N images out of training");
  t->flag("--deterministic", "/deterministic", "single thread, fixed seeds");

  Flags* e = sub("eval", "Depth, normal, coverage and albedo metrics against the analytic scene");
  e->option("--ckpt", "/ckpt", "checkpoint file or training directory");
  e->option("--data", "/data", "dataset (default: the one recorded in the checkpoint)");
  e->option("--march-steps", "/march_steps", "camera-ray march steps");
  e->option("--mesh-res", "/mesh_res", "grid for mesh extraction, 0 to skip coverage");
  e->option("--tau", "/tau", "coverage distance threshold");
  e->option("--coverage-samples", "/coverage_samples", "surface samples for coverage");
  e->option("--out", "/out", "write the report as JSON");

  Flags* m = sub("mesh", "Extract the zero level set as OBJ");
  m->option("--ckpt", "/ckpt", "checkpoint file or training directory");
  m->option("--res", "/res", "grid resolution");
  m->option("--out", "/out", "OBJ file");

  Flags* r = sub("relight", "Render an rgb model under a new light");
  r->option("--ckpt", "/ckpt", "checkpoint file or training directory");
  r->option("--data", "/data", "dataset for the camera and ground");
  r->option("--image", "/image", "use the lights of this dataset image and report the error");
  r->option("--light-dir", "/light_dir", "directional light x,y,z");
  r->option("--light-pos", "/light_pos", "point light x,y,z");
  r->option("--intensity", "/intensity", "light intensity");
  r->option("--march-steps", "/march_steps", "camera-ray march steps");
  r->option("--out", "/out", "PNG (sRGB) or PFM (linear) file");

  Flags* c = sub("grad-check", "Compare analytic and finite-difference loss gradients");
  c->option("--seed", "/seed", "seed");
  c->option("--mode", "/mode", "binary, rgb or both");
  c->option("--stride", "/stride", "check every n-th parameter");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::CallForAllHelp& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    std::cerr << err.what() << "\n\n";
    const auto subs = app.get_subcommands();
    std::cerr << (subs.empty() ? app.help() : subs.front()->help());
    return 1;
  }

  const std::map<std::string, int (*)(json)> run{{"gen-data", gen_data}, {"train", train},
                                                 {"eval", eval},         {"mesh", mesh},
                                                 {"relight", relight},   {"grad-check", grad_check}};
  const std::string name = app.get_subcommands().front()->get_name();
  try {
    return run.at(name)(flags.at(name)->merged(config_files[name]));
  } catch (const UsageError& err) {
    std::cerr << "shadowray " << name << ": " << err.what() << std::endl;
    return 1;
  } catch (const std::invalid_argument& err) {
    std::cerr << "shadowray " << name << ": " << err.what() << std::endl;
    return 1;
  } catch (const json::exception& err) {
    std::cerr << "shadowray " << name << ": " << err.what() << std::endl;
    return 1;
  } catch (const trainer::TrainingAborted& err) {
    std::cerr << "shadowray " << name << ": training aborted: " << err.what() << std::endl;
    return 2;
  } catch (const std::exception& err) {
    std::cerr << "shadowray " << name << ": " << err.what() << std::endl;
    return 2;
  }
}
