// flowcount command-line driver.

#include <fcntl.h>
#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "flowcount/flowcount.hpp"

namespace fs = std::filesystem;
using namespace flowcount;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

// Excludes concurrent writers to one output directory.
class DirLock {
 public:
  explicit DirLock(const fs::path& dir) : path_(dir / ".flowcount.lock") {
    fs::create_directories(dir);
    fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd_ < 0) throw Error("output directory " + dir.string() + " is locked by another run (" + path_.string() + ")");
  }
  ~DirLock() {
    ::close(fd_);
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  fs::path path_;
  int fd_ = -1;
};

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<int> v;
  std::optional<double> alpha, beta, gamma, delta;
  std::optional<int> patch_n;
  std::optional<int> al_iters;
  std::optional<std::string> selector;
  std::string data;
  std::optional<int> steps;
  std::optional<int> frames;
  std::string model;
  bool ground_truth = false;
  bool optical = false;
  std::string fo;
  std::string targets = "counts";
  std::string split = "all";
  std::vector<std::string> inputs;
};

ExperimentConfig resolve_config(const Options& o) {
  ExperimentConfig c = o.config.empty() ? ExperimentConfig{} : load_config(o.config);
  if (o.seed) c.seed = *o.seed;
  if (o.v) c.train.keyframe_interval = *o.v;
  if (o.alpha) c.train.weights.alpha = *o.alpha;
  if (o.beta) c.train.weights.beta = *o.beta;
  if (o.gamma) c.train.weights.gamma = *o.gamma;
  if (o.delta) c.train.weights.delta = *o.delta;
  if (o.patch_n) c.active.patch_n = *o.patch_n;
  if (o.al_iters) c.active.iterations = *o.al_iters;
  if (o.selector) c.active.selector = selector_from_string(*o.selector);
  if (o.steps) {
    c.train.max_steps = *o.steps;
    c.active.train.steps = *o.steps;
  }
  if (o.frames) {
    c.sim.n_frames = *o.frames;
    c.train_frames = std::min(c.train_frames, std::max(3, *o.frames * 2 / 3));
  }
  if (!o.data.empty()) c.data_dir = o.data;
  c.sim.seed = c.seed;
  c.validate();
  return c;
}

fs::path require_out(const Options& o) {
  if (o.out.empty()) throw ConfigError("--out is required");
  return o.out;
}

std::string file_hash(const fs::path& p) { return hex64(fnv1a(flowcount::detail::read_file_bytes(p))); }

// Manifest plus a hash of every artifact written under `out`.
void finish_manifest(json m, const fs::path& out) {
  json arts = json::object();
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(out))
    if (e.is_regular_file() && e.path().filename() != "manifest.json" && e.path().filename() != ".flowcount.lock")
      files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) arts[fs::relative(f, out).generic_string()] = file_hash(f);
  m["artifacts"] = arts;
  write_json(out / "manifest.json", m);
}

Sequence load_or_simulate(const ExperimentConfig& c) {
  if (!c.data_dir.empty()) return load_dataset(c.data_dir).seq;
  return generate_sequence(c.sim, c.train.keyframe_interval);
}

nn::Checkpoint flow_checkpoint(const nn::FlowRegressor<float>& model, std::span<const float> p, const ExperimentConfig& c) {
  return {{{"layout", model.layout().to_json()}, {"scalar", "float32"}, {"config_hash", make_manifest("train", c)["config_hash"]}},
          nn::to_double<float>(p)};
}

int cmd_simulate(const Options& o) {
  const ExperimentConfig c = resolve_config(o);
  const fs::path out = require_out(o);
  DirLock lock(out);
  const Sequence s = generate_sequence(c.sim, c.train.keyframe_interval);
  export_sequence(s, out);
  json m = make_manifest("simulate", c);
  m["seed"] = c.seed;
  m["n_frames"] = s.size();
  finish_manifest(m, out);
  std::printf("simulated %d frames (%s grid) into %s\n", s.size(), s.shape.str().c_str(), out.string().c_str());
  return kExitOk;
}

int cmd_render_density(const Options& o) {
  if (o.data.empty()) throw ConfigError("render-density needs --data");
  const ExperimentConfig c = resolve_config(o);
  const fs::path out = require_out(o);
  DirLock lock(out);
  const Sequence s = load_dataset(c.data_dir).seq;
  const auto maps = density_targets(s, c.kernel);
  fs::create_directories(out / "density");
  std::ostringstream totals;
  totals.precision(17);
  totals << "frame,heads,density_total\n";
  for (const auto& f : s.annotations.frames) {
    const DensityMap& d = maps.at(f.time_index);
    write_flc(out / "density" / frame_name("density", f.time_index, "flc"), d);
    totals << f.time_index << ',' << f.heads.size() << ',' << d.total() << '\n';
  }
  write_text(out / "totals.csv", totals.str());
  finish_manifest(make_manifest("render-density", c), out);
  std::printf("rendered %zu density maps (sigma %.3f cells)\n", maps.size(), c.kernel.sigma);
  return kExitOk;
}

int cmd_pretrain_fo(const Options& o) {
  const ExperimentConfig c = resolve_config(o);
  const fs::path out = require_out(o);
  DirLock lock(out);
  const Sequence s = load_or_simulate(c);
  if (s.optical.empty()) throw ConfigError("dataset has no optical flow");
  const auto targets = density_targets(s, c.kernel);
  const std::vector<FoSample> data = fo_samples(targets, s.optical, 0, s.size() - 1);
  const nn::OpticalRegressor fo(c.fo_hidden);
  const FoResult r = pretrain_fo(fo, data, c.fo_steps, c.fo_learning_rate, fo.init(c.seed));
  nn::write_checkpoint(out / "fo.ckpt", {{{"layout", fo.to_json()}, {"scalar", "float64"}}, r.params});
  std::ostringstream os;
  os.precision(17);
  os << "step,loss\n";
  for (std::size_t k = 0; k < r.loss_curve.size(); ++k) os << k << ',' << r.loss_curve[k] << '\n';
  write_text(out / "fo_loss.csv", os.str());
  json m = make_manifest("pretrain-fo", c);
  m["pairs"] = data.size();
  m["final_loss"] = r.loss_curve.back();
  finish_manifest(m, out);
  std::printf("F_o pre-trained on %zu pairs: loss %.6g -> %.6g\n", data.size(), r.loss_curve.front(),
              r.loss_curve.back());
  return kExitOk;
}

int cmd_train(const Options& o) {
  ExperimentConfig c = resolve_config(o);
  if (o.optical) c.train.use_optical = true;
  const fs::path out = require_out(o);
  DirLock lock(out);
  const Benchmark b = make_benchmark(c, c.seed);
  const int V = (!o.v && !c.data_dir.empty()) ? b.seq.keyframe_interval : c.train.keyframe_interval;
  const nn::FlowRegressor<float> model(nn::FlowLayout::for_cell_px(b.seq.shape.cell_px));
  TrainConfig tc = c.train;
  tc.keyframe_interval = V;
  tc.seed = c.seed;
  const nn::OpticalRegressor fo(c.fo_hidden);
  FoResult fo_r;
  OpticalPrior prior{&fo, {}, b.seq.optical, 1e-4};
  if (tc.use_optical) {
    if (!o.fo.empty()) {
      fo_r.params = nn::read_checkpoint(o.fo).params;
      if (fo_r.params.size() != fo.num_params()) throw ShapeError(o.fo + ": F_o parameter count mismatch");
    } else {
      fo_r = pretrain_fo_on(b, c, c.seed);
    }
    prior.params = fo_r.params;
  }
  const auto r = train_three_frame<float>(model, model.init(c.seed), b.train_span(), b.seq.shape, b.train_targets(V),
                                          tc, tc.use_optical ? &prior : nullptr);
  nn::write_checkpoint(out / "model.ckpt", flow_checkpoint(model, r.params, c));
  write_text(out / "loss_log.csv", loss_log_csv(r.log));
  const NetworkFlowModel<float> net{&model, r.params, b.seq.frames, b.seq.shape};
  const EvalResult ev = evaluate(net, b.test_frames, b.targets, b.roi, c.eval_mode);
  json m = make_manifest("train", c);
  m["seed"] = c.seed;
  m["keyframe_interval"] = V;
  m["weights"] = to_json(tc.weights);
  m["test"] = {{"frames", b.test_frames.size()}, {"MAE", ev.mae}, {"RMSE", ev.rmse}};
  finish_manifest(m, out);
  std::printf("trained %d steps; test MAE %.3f RMSE %.3f\n", tc.max_steps, ev.mae, ev.rmse);
  return kExitOk;
}

int cmd_train_active(const Options& o) {
  const ExperimentConfig c = resolve_config(o);
  const fs::path out = require_out(o);
  DirLock lock(out);
  const Benchmark b = make_benchmark(c, c.seed);
  const ActiveResult<float> r = run_active(b, c, c.seed);
  write_text(out / "curve.csv", active_curve_csv(r.curve));
  const nn::FlowRegressor<float> model(nn::FlowLayout::for_cell_px(b.seq.shape.cell_px));
  nn::write_checkpoint(out / "model.ckpt", flow_checkpoint(model, r.params, c));
  finish_manifest(active_manifest("train-active", c, c.seed, r.curve), out);
  for (const auto& it : r.curve)
    std::printf("iteration %d  ratio %.4f  MAE %.3f  RMSE %.3f\n", it.iteration, it.annotation_ratio, it.mae, it.rmse);
  return kExitOk;
}

int cmd_eval(const Options& o) {
  if (o.data.empty()) throw ConfigError("eval needs --data");
  if (o.ground_truth == !o.model.empty()) throw ConfigError("eval needs exactly one of --model or --ground-truth");
  const ExperimentConfig c = resolve_config(o);
  const Sequence s = load_dataset(c.data_dir).seq;
  std::map<int, DensityMap> targets;
  if (o.targets == "counts") targets = count_targets(s);
  else if (o.targets == "density") targets = density_targets(s, c.kernel);
  else throw ConfigError("--targets must be counts or density");
  std::vector<int> frames;
  const int first = o.split == "test" ? c.train_frames + 1 : 1;
  if (o.split != "all" && o.split != "test") throw ConfigError("--split must be all or test");
  for (int t = first; t + 1 < s.size(); ++t)
    if (targets.count(t)) frames.push_back(t);
  const std::vector<std::uint8_t> roi = roi_mask(c.roi, s.shape);
  EvalResult ev;
  if (o.ground_truth) {
    if (s.flows.empty()) throw ConfigError("dataset has no ground-truth flows");
    ev = evaluate(GroundTruthFlowModel{s.flows}, frames, targets, roi, c.eval_mode);
  } else {
    const nn::Checkpoint ck = nn::read_checkpoint(o.model);
    const nn::FlowRegressor<float> model(nn::FlowLayout::for_cell_px(s.shape.cell_px));
    if (!ck.header.contains("layout") || ck.header["layout"] != model.layout().to_json())
      throw ParseError(o.model + ": checkpoint layout does not match a " + std::to_string(s.shape.cell_px) +
                       "-pixel-cell regressor");
    const std::vector<float> p = nn::from_double<float>(ck.params);
    if (p.size() != model.num_params()) throw ParseError(o.model + ": parameter count mismatch");
    ev = evaluate(NetworkFlowModel<float>{&model, p, s.frames, s.shape}, frames, targets, roi, c.eval_mode);
  }
  std::printf("MAE %.3f RMSE %.3f (%zu frames, %s targets, roi %s, %s reconstruction)\n", ev.mae, ev.rmse,
              frames.size(), o.targets.c_str(), to_string(c.roi).c_str(), to_string(c.eval_mode).c_str());
  if (!o.out.empty()) {
    const fs::path out = o.out;
    DirLock lock(out);
    std::ostringstream os;
    os.precision(17);
    os << "frame,z,zhat\n";
    for (std::size_t i = 0; i < frames.size(); ++i) os << frames[i] << ',' << ev.z[i] << ',' << ev.zhat[i] << '\n';
    write_text(out / "counts.csv", os.str());
    json m = make_manifest("eval", c);
    m["MAE"] = ev.mae;
    m["RMSE"] = ev.rmse;
    m["model"] = o.ground_truth ? "ground-truth" : fs::path(o.model).filename().string();
    finish_manifest(m, out);
  }
  return kExitOk;
}

int cmd_ablate(const Options& o) {
  const ExperimentConfig c = resolve_config(o);
  const fs::path out = require_out(o);
  DirLock lock(out);
  const std::vector<Variant> variants = ablation_variants(c);
  const auto per_seed = parallel_map<std::vector<VariantResult>>(static_cast<int>(c.seeds.size()), [&](int i) {
    const std::uint64_t seed = c.seeds[static_cast<std::size_t>(i)];
    return run_variants(make_benchmark(c, seed), c, variants, seed);
  });
  std::vector<VariantResult> rows;
  for (const auto& v : per_seed) rows.insert(rows.end(), v.begin(), v.end());
  write_text(out / "ablation.csv", variant_csv(rows));
  std::ostringstream os;
  os.precision(17);
  os << "variant,mean_MAE\n";
  json summary = json::object();
  for (const auto& [name, mae] : mean_mae(rows)) {
    os << name << ',' << mae << '\n';
    summary[name] = mae;
    std::printf("%-10s mean MAE %.3f\n", name.c_str(), mae);
  }
  write_text(out / "summary.csv", os.str());
  json m = make_manifest("ablate", c);
  m["mean_MAE"] = summary;
  finish_manifest(m, out);
  return kExitOk;
}

int cmd_export_plots(const Options& o) {
  if (o.inputs.empty()) throw ConfigError("export-plots needs at least one curve CSV");
  const fs::path out = require_out(o);
  DirLock lock(out);
  std::vector<std::pair<std::string, std::vector<CurvePoint>>> curves;
  for (const auto& in : o.inputs) {
    const fs::path p = in;
    std::string text;
    try {
      text = flowcount::detail::read_file_bytes(p);
    } catch (const Error& e) {
      throw ParseError(e.what());
    }
    std::string name = p.stem().string();
    if (p.has_parent_path() && name == "curve") name = p.parent_path().filename().string();
    curves.emplace_back(name, parse_curve_csv(text, p.string()));
  }
  for (const auto& [name, pts] : curves) write_pgm(out / (name + ".pgm"), plot_curve(pts));
  write_text(out / "curves_tidy.csv", tidy_curves(curves));
  json m = {{"command", "export-plots"}, {"inputs", o.inputs}};
  finish_manifest(m, out);
  std::printf("wrote %zu plots\n", curves.size());
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"flowcount: people-flow crowd counting experiments"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* s) {
    s->add_option("--config", o.config, "JSON config file")->check(CLI::ExistingFile);
    s->add_option("--seed", o.seed, "root seed");
    s->add_option("--out", o.out, "output directory");
    s->add_option("--data", o.data, "dataset directory");
    s->add_option("--v", o.v, "keyframe interval")->check(CLI::PositiveNumber);
    s->add_option("--alpha", o.alpha, "cycle weight");
    s->add_option("--beta", o.beta, "optical weight");
    s->add_option("--gamma", o.gamma, "spatial weight");
    s->add_option("--delta", o.delta, "adversarial weight");
    s->add_option("--patch-n", o.patch_n, "n x n patches");
    s->add_option("--al-iters", o.al_iters, "active-learning iterations");
    s->add_option("--selector", o.selector, "active or random")->check(CLI::IsMember({"active", "random"}));
    s->add_option("--steps", o.steps, "training steps");
    s->add_option("--frames", o.frames, "simulated frames");
  };

  std::vector<std::pair<CLI::App*, int (*)(const Options&)>> cmds;
  auto add = [&](const char* name, const char* help, int (*fn)(const Options&)) {
    CLI::App* s = app.add_subcommand(name, help);
    cmds.emplace_back(s, fn);
    return s;
  };
  common(add("simulate", "simulate a crowd sequence and export it", cmd_simulate));
  common(add("render-density", "render ground-truth density maps for a dataset", cmd_render_density));
  common(add("pretrain-fo", "pre-train the optical-flow regressor", cmd_pretrain_fo));
  {
    CLI::App* s = add("train", "three-frame training", cmd_train);
    common(s);
    s->add_flag("--optical", o.optical, "add the optical-flow loss");
    s->add_option("--fo", o.fo, "pre-trained F_o checkpoint")->check(CLI::ExistingFile);
  }
  common(add("train-active", "active patch selection and training", cmd_train_active));
  {
    CLI::App* s = add("eval", "count MAE / RMSE", cmd_eval);
    common(s);
    s->add_option("--model", o.model, "flow regressor checkpoint")->check(CLI::ExistingFile);
    s->add_flag("--ground-truth", o.ground_truth, "score the dataset's ground-truth flows");
    s->add_option("--targets", o.targets, "counts or density")->check(CLI::IsMember({"counts", "density"}));
    s->add_option("--split", o.split, "all or test")->check(CLI::IsMember({"all", "test"}));
  }
  common(add("ablate", "WEAK / no-cycle / reconstruction / interval variants", cmd_ablate));
  {
    CLI::App* s = add("export-plots", "plot active-learning curves", cmd_export_plots);
    s->add_option("--out", o.out, "output directory");
    s->add_option("inputs", o.inputs, "curve CSV files");
  }

  if (argc < 2) {
    std::cerr << app.help();
    return kExitUsage;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }
  for (const auto& [s, fn] : cmds) {
    if (!s->parsed()) continue;
    try {
      return fn(o);
    } catch (const ConfigError& e) {
      std::cerr << "error: " << e.what() << '\n';
      return kExitUsage;
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << '\n';
      return kExitRuntime;
    }
  }
  std::cerr << app.help();
  return kExitUsage;
}
