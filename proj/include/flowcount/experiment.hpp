#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "flowcount/active.hpp"
#include "flowcount/dataset.hpp"
#include "flowcount/errors.hpp"
#include "flowcount/train.hpp"

namespace flowcount {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Strict JSON helpers

namespace detail {

class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  template <class V>
  void get(const char* key, V& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<V>();
    } catch (const json::exception& e) {
      throw ConfigError(path_ + "." + key + ": " + e.what());
    }
  }

  [[nodiscard]] bool has(const char* key) {
    seen_.insert(key);
    return j_.contains(key);
  }

  [[nodiscard]] Section sub(const char* key) {
    seen_.insert(key);
    static const json empty = json::object();
    return Section(j_.contains(key) ? j_.at(key) : empty, path_ + "." + key);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError(path_ + ": unknown key '" + it.key() + "'");
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Experiment configuration

enum class RoiKind { all, left_half };

inline std::string to_string(RoiKind r) { return r == RoiKind::all ? "all" : "left_half"; }

inline RoiKind roi_from_string(const std::string& s) {
  if (s == "all") return RoiKind::all;
  if (s == "left_half") return RoiKind::left_half;
  throw ConfigError("unknown roi '" + s + "' (expected all or left_half)");
}

inline std::vector<std::uint8_t> roi_mask(RoiKind kind, const GridShape& s) {
  std::vector<std::uint8_t> m(static_cast<std::size_t>(s.cells()), kind == RoiKind::all ? 1 : 0);
  if (kind == RoiKind::left_half)
    for (int r = 0; r < s.rows; ++r)
      for (int c = 0; c < s.cols / 2; ++c) m[static_cast<std::size_t>(s.index(r, c))] = 1;
  return m;
}

inline Reconstruction reconstruction_from_string(const std::string& s) {
  if (s == "forward") return Reconstruction::forward;
  if (s == "backward") return Reconstruction::backward;
  if (s == "average") return Reconstruction::average;
  throw ConfigError("unknown reconstruction '" + s + "' (expected forward, backward or average)");
}

inline DensityMode density_mode_from_string(const std::string& s) {
  if (s == "flow") return DensityMode::flow;
  if (s == "weak") return DensityMode::weak;
  throw ConfigError("unknown mode '" + s + "' (expected flow or weak)");
}

struct ExperimentConfig {
  std::uint64_t seed = 1;
  SimConfig sim;
  KernelSpec kernel{1.0, 4.0};
  TrainConfig train;
  ActiveConfig active;
  int train_frames = 200;  // frames [0, train_frames) train, the rest test
  RoiKind roi = RoiKind::left_half;
  Reconstruction eval_mode = Reconstruction::average;
  int fo_steps = 300;
  double fo_learning_rate = 1e-3;
  int fo_hidden = 8;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::string data_dir;  // optional dataset directory; empty means simulate

  ExperimentConfig() {
    sim.n_frames = 300;
    train.max_steps = 2000;
    train.learning_rate = 1e-3;
    train.lr_schedule = LrSchedule::linear;
    active.train.lr_schedule = LrSchedule::linear;
    active.train.steps = 300;
    active.train.learning_rate = 1e-3;
    active.train.disc_learning_rate = 1e-3;
  }

  void validate() const {
    sim.validate();
    kernel.validate();
    train.validate();
    active.validate();
    if (train_frames < 3 || train_frames >= sim.n_frames - 2)
      throw ConfigError("train_frames must leave at least 3 training and 3 test frames");
    if (fo_steps < 0) throw ConfigError("fo_steps must be >= 0");
    if (!(fo_learning_rate >= 0.0)) throw ConfigError("fo_learning_rate must be >= 0");
    if (seeds.empty()) throw ConfigError("seeds must not be empty");
    if (!data_dir.empty() && !std::filesystem::is_directory(data_dir))
      throw ConfigError("data directory '" + data_dir + "' does not exist");
  }
};

inline json to_json(const LossWeights& w) {
  return {{"alpha", w.alpha}, {"beta", w.beta}, {"gamma", w.gamma}, {"delta", w.delta}};
}

inline json to_json(const ExperimentConfig& c) {
  const SimConfig& s = c.sim;
  return {
      {"seed", c.seed},
      {"seeds", c.seeds},
      {"data_dir", c.data_dir},
      {"sim",
       {{"rows", s.shape.rows},
        {"cols", s.shape.cols},
        {"cell_px", s.shape.cell_px},
        {"n_agents", s.n_agents},
        {"speed_max", s.speed_max},
        {"entry_rate", s.entry_rate},
        {"exit_enabled", s.exit_enabled},
        {"motion_model", to_string(s.motion_model)},
        {"n_frames", s.n_frames},
        {"steer_noise", s.steer_noise},
        {"blob_peak", s.blob_peak},
        {"platoon_spread", s.platoon_spread}}},
      {"kernel", {{"sigma", c.kernel.sigma}, {"truncation_radius", c.kernel.truncation_radius}}},
      {"train",
       {{"keyframe_interval", c.train.keyframe_interval},
        {"batch", c.train.batch},
        {"max_steps", c.train.max_steps},
        {"learning_rate", c.train.learning_rate},
        {"lr_schedule", to_string(c.train.lr_schedule)},
        {"use_optical", c.train.use_optical},
        {"mode", to_string(c.train.mode)}}},
      {"weights", to_json(c.train.weights)},
      {"patch", {{"n", c.active.patch_n}}},
      {"active",
       {{"initial_fraction", c.active.initial_fraction},
        {"step_fraction", c.active.step_fraction},
        {"iterations", c.active.iterations},
        {"selector", to_string(c.active.selector)},
        {"warm_start", c.active.warm_start},
        {"steps", c.active.train.steps},
        {"learning_rate", c.active.train.learning_rate},
        {"lr_schedule", to_string(c.active.train.lr_schedule)},
        {"disc_learning_rate", c.active.train.disc_learning_rate},
        {"max_super", c.active.train.max_super},
        {"val_fraction", c.active.train.val_fraction},
        {"eval_every", c.active.train.eval_every}}},
      {"eval", {{"train_frames", c.train_frames}, {"roi", to_string(c.roi)}, {"reconstruction", to_string(c.eval_mode)}}},
      {"fo", {{"steps", c.fo_steps}, {"learning_rate", c.fo_learning_rate}, {"hidden", c.fo_hidden}}},
  };
}

/// Reads a config document on top of the defaults. Unknown keys at any
/// level are rejected.
inline ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  detail::Section root(j, "config");
  root.get("seed", c.seed);
  root.get("seeds", c.seeds);
  root.get("data_dir", c.data_dir);
  {
    auto s = root.sub("sim");
    s.get("rows", c.sim.shape.rows);
    s.get("cols", c.sim.shape.cols);
    s.get("cell_px", c.sim.shape.cell_px);
    s.get("n_agents", c.sim.n_agents);
    s.get("speed_max", c.sim.speed_max);
    s.get("entry_rate", c.sim.entry_rate);
    s.get("exit_enabled", c.sim.exit_enabled);
    std::string mm = to_string(c.sim.motion_model);
    s.get("motion_model", mm);
    c.sim.motion_model = motion_model_from_string(mm);
    s.get("n_frames", c.sim.n_frames);
    s.get("steer_noise", c.sim.steer_noise);
    s.get("blob_peak", c.sim.blob_peak);
    s.get("platoon_spread", c.sim.platoon_spread);
    s.finish();
  }
  {
    auto s = root.sub("kernel");
    s.get("sigma", c.kernel.sigma);
    s.get("truncation_radius", c.kernel.truncation_radius);
    s.finish();
  }
  {
    auto s = root.sub("train");
    s.get("keyframe_interval", c.train.keyframe_interval);
    s.get("batch", c.train.batch);
    s.get("max_steps", c.train.max_steps);
    s.get("learning_rate", c.train.learning_rate);
    std::string sched = to_string(c.train.lr_schedule);
    s.get("lr_schedule", sched);
    c.train.lr_schedule = lr_schedule_from_string(sched);
    s.get("use_optical", c.train.use_optical);
    std::string mode = to_string(c.train.mode);
    s.get("mode", mode);
    c.train.mode = density_mode_from_string(mode);
    s.finish();
  }
  {
    auto s = root.sub("weights");
    s.get("alpha", c.train.weights.alpha);
    s.get("beta", c.train.weights.beta);
    s.get("gamma", c.train.weights.gamma);
    s.get("delta", c.train.weights.delta);
    s.finish();
  }
  {
    auto s = root.sub("patch");
    s.get("n", c.active.patch_n);
    s.finish();
  }
  {
    auto s = root.sub("active");
    s.get("initial_fraction", c.active.initial_fraction);
    s.get("step_fraction", c.active.step_fraction);
    s.get("iterations", c.active.iterations);
    std::string sel = to_string(c.active.selector);
    s.get("selector", sel);
    c.active.selector = selector_from_string(sel);
    s.get("warm_start", c.active.warm_start);
    s.get("steps", c.active.train.steps);
    s.get("learning_rate", c.active.train.learning_rate);
    std::string asched = to_string(c.active.train.lr_schedule);
    s.get("lr_schedule", asched);
    c.active.train.lr_schedule = lr_schedule_from_string(asched);
    s.get("disc_learning_rate", c.active.train.disc_learning_rate);
    s.get("max_super", c.active.train.max_super);
    s.get("val_fraction", c.active.train.val_fraction);
    s.get("eval_every", c.active.train.eval_every);
    s.finish();
  }
  {
    auto s = root.sub("eval");
    s.get("train_frames", c.train_frames);
    std::string roi = to_string(c.roi);
    s.get("roi", roi);
    c.roi = roi_from_string(roi);
    std::string rec = to_string(c.eval_mode);
    s.get("reconstruction", rec);
    c.eval_mode = reconstruction_from_string(rec);
    s.finish();
  }
  {
    auto s = root.sub("fo");
    s.get("steps", c.fo_steps);
    s.get("learning_rate", c.fo_learning_rate);
    s.get("hidden", c.fo_hidden);
    s.finish();
  }
  root.finish();
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError(path.string() + ": JSON parse error at offset " + std::to_string(e.byte));
  }
  return config_from_json(j);
}

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Manifest skeleton: command, canonical config and its hash.
inline json make_manifest(const std::string& command, const ExperimentConfig& c) {
  const json cfg = to_json(c);
  const std::string canonical = cfg.dump();
  return {{"command", command}, {"config", cfg}, {"config_hash", hex64(fnv1a(command + "\n" + canonical))}};
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + p.string());
  out << text;
  if (!out) throw Error("write failed for " + p.string());
}

inline void write_json(const std::filesystem::path& p, const json& j) { write_text(p, j.dump(2) + "\n"); }

// ---------------------------------------------------------------------------
// Parallel map over independent jobs

/// Number of worker threads: FLOWCOUNT_THREADS if set, else the hardware
/// concurrency, capped by the job count.
inline int thread_cap(int jobs) {
  int n = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  if (const char* env = std::getenv("FLOWCOUNT_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1) throw ConfigError("FLOWCOUNT_THREADS must be a positive integer");
    n = static_cast<int>(v);
  }
  return std::max(1, std::min(n, jobs));
}

/// Runs fn(i) for i in [0, n). Results are written by index, so the outcome
/// does not depend on the thread count. The first exception is rethrown.
template <class R>
std::vector<R> parallel_map(int n, const std::function<R(int)>& fn) {
  std::vector<R> out(static_cast<std::size_t>(n));
  const int workers = thread_cap(n);
  if (workers <= 1) {
    for (int i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = fn(i);
    return out;
  }
  std::atomic<int> next{0};
  std::exception_ptr err;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (int i = next++; i < n; i = next++) {
        try {
          out[static_cast<std::size_t>(i)] = fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(mu);
          if (!err) err = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (err) std::rethrow_exception(err);
  return out;
}

// ---------------------------------------------------------------------------
// Benchmark

/// One sequence with every frame annotated, split into train and test.
struct Benchmark {
  Sequence seq;
  std::map<int, DensityMap> targets;  // every annotated frame
  std::vector<std::uint8_t> roi;
  int train_frames = 0;
  std::vector<int> test_frames;  // frames with both neighbours inside the sequence

  [[nodiscard]] std::span<const ObservationFrame> train_span() const {
    return {seq.frames.data(), static_cast<std::size_t>(train_frames)};
  }

  /// Training targets at multiples of V.
  [[nodiscard]] std::map<int, DensityMap> train_targets(int V) const {
    std::map<int, DensityMap> out;
    for (const auto& [t, d] : targets)
      if (t < train_frames && t % V == 0) out.emplace(t, d);
    return out;
  }

  [[nodiscard]] std::vector<int> train_keyframes(int V = 1) const {
    return usable_keyframes(train_frames, V, DensityMode::flow);
  }
};

inline Benchmark make_benchmark(const ExperimentConfig& c, std::uint64_t seed) {
  Benchmark b;
  if (!c.data_dir.empty()) {
    b.seq = load_dataset(c.data_dir).seq;
  } else {
    SimConfig sc = c.sim;
    sc.seed = seed;
    b.seq = generate_sequence(sc, 1);
  }
  b.targets = density_targets(b.seq, c.kernel);
  b.roi = roi_mask(c.roi, b.seq.shape);
  b.train_frames = std::min(c.train_frames, b.seq.size());
  for (int t = b.train_frames + 1; t + 1 < b.seq.size(); ++t)
    if (b.targets.count(t)) b.test_frames.push_back(t);
  if (b.test_frames.empty()) throw ConfigError("benchmark has no annotated test frames");
  return b;
}

struct Variant {
  std::string name;
  DensityMode mode = DensityMode::flow;
  double alpha = 1.0;
  bool use_optical = false;
  int keyframe_interval = 1;
  Reconstruction eval_mode = Reconstruction::average;
};

/// WEAK, flow without cycle loss, flow with cycle loss, optical prior,
/// reconstruction variants and keyframe intervals.
inline std::vector<Variant> ablation_variants(const ExperimentConfig& c) {
  const double a = c.train.weights.alpha;
  return {
      {"weak", DensityMode::weak, a, false, 1, Reconstruction::average},
      {"no_cycle", DensityMode::flow, 0.0, false, 1, c.eval_mode},
      {"combi", DensityMode::flow, a, false, 1, c.eval_mode},
      {"combi_fwd", DensityMode::flow, a, false, 1, Reconstruction::forward},
      {"combi_bwd", DensityMode::flow, a, false, 1, Reconstruction::backward},
      {"combi_avg", DensityMode::flow, a, false, 1, Reconstruction::average},
      {"optical", DensityMode::flow, a, true, 1, c.eval_mode},
      {"v2", DensityMode::flow, a, false, 2, c.eval_mode},
      {"v5", DensityMode::flow, a, false, 5, c.eval_mode},
  };
}

struct VariantResult {
  std::string name;
  std::uint64_t seed = 0;
  double mae = 0.0;
  double rmse = 0.0;
  double baseline_mae = 0.0;
  double first_loss = 0.0;
  double final_loss = 0.0;
};

/// Pre-trains F_o on consecutive training targets and ground-truth optical flow.
inline FoResult pretrain_fo_on(const Benchmark& b, const ExperimentConfig& c, std::uint64_t seed) {
  if (b.seq.optical.empty()) throw ConfigError("the optical prior needs optical flow in the dataset");
  const nn::OpticalRegressor fo(c.fo_hidden);
  const std::vector<FoSample> data = fo_samples(b.targets, b.seq.optical, 0, b.train_frames - 1);
  return pretrain_fo(fo, data, c.fo_steps, c.fo_learning_rate, fo.init(seed));
}

inline double mean_loss(std::span<const LossLogRow> log, bool tail) {
  if (log.empty()) return 0.0;
  const std::size_t k = std::min<std::size_t>(50, log.size());
  double s = 0.0;
  for (std::size_t i = 0; i < k; ++i) s += log[tail ? log.size() - 1 - i : i].total;
  return s / static_cast<double>(k);
}

/// Trains one variant on the benchmark and scores it on the test frames.
/// `fo` may be null unless the variant uses the optical prior.
inline VariantResult run_variant(const Benchmark& b, const ExperimentConfig& c, const Variant& v, std::uint64_t seed,
                                 const FoResult* fo = nullptr, std::vector<float>* params_out = nullptr) {
  const nn::FlowRegressor<float> model(nn::FlowLayout::for_cell_px(b.seq.shape.cell_px));
  TrainConfig tc = c.train;
  tc.seed = seed;
  tc.mode = v.mode;
  tc.keyframe_interval = v.keyframe_interval;
  tc.weights.alpha = v.alpha;
  tc.use_optical = v.use_optical;
  const nn::OpticalRegressor fo_model(c.fo_hidden);
  OpticalPrior prior{&fo_model, {}, b.seq.optical, 1e-4};
  FoResult local;
  if (v.use_optical) {
    if (!fo) {
      local = pretrain_fo_on(b, c, seed);
      fo = &local;
    }
    prior.params = fo->params;
  }
  const auto tr = train_three_frame<float>(model, model.init(seed), b.train_span(), b.seq.shape,
                                           b.train_targets(v.keyframe_interval), tc, v.use_optical ? &prior : nullptr);
  const NetworkFlowModel<float> net{&model, tr.params, b.seq.frames, b.seq.shape};
  const EvalResult ev = evaluate(net, b.test_frames, b.targets, b.roi, v.eval_mode);
  std::vector<int> train_t;
  for (int t = 0; t < b.train_frames; ++t)
    if (b.targets.count(t)) train_t.push_back(t);
  const EvalResult base = constant_mean_baseline(train_t, b.test_frames, b.targets, b.roi);
  if (params_out) *params_out = tr.params;
  return {v.name, seed, ev.mae, ev.rmse, base.mae, mean_loss(tr.log, false), mean_loss(tr.log, true)};
}

/// Runs variants that differ only in reconstruction once and re-scores.
inline std::vector<VariantResult> run_variants(const Benchmark& b, const ExperimentConfig& c,
                                               const std::vector<Variant>& variants, std::uint64_t seed) {
  struct Trained {
    std::size_t row;
    std::vector<float> params;
  };
  std::vector<VariantResult> out;
  std::map<std::string, Trained> trained;
  const nn::FlowRegressor<float> model(nn::FlowLayout::for_cell_px(b.seq.shape.cell_px));
  std::optional<FoResult> fo;
  for (const Variant& v : variants) {
    const std::string key = to_string(v.mode) + "/" + std::to_string(v.alpha) + "/" + std::to_string(v.use_optical) +
                            "/" + std::to_string(v.keyframe_interval);
    auto it = trained.find(key);
    if (it == trained.end()) {
      if (v.use_optical && !fo) fo = pretrain_fo_on(b, c, seed);
      std::vector<float> p;
      out.push_back(run_variant(b, c, v, seed, fo ? &*fo : nullptr, &p));
      trained.emplace(key, Trained{out.size() - 1, std::move(p)});
      continue;
    }
    VariantResult r = out[it->second.row];
    const NetworkFlowModel<float> net{&model, it->second.params, b.seq.frames, b.seq.shape};
    const EvalResult ev = evaluate(net, b.test_frames, b.targets, b.roi, v.eval_mode);
    r.name = v.name;
    r.mae = ev.mae;
    r.rmse = ev.rmse;
    out.push_back(r);
  }
  return out;
}

inline std::string variant_csv(std::span<const VariantResult> rows) {
  std::ostringstream os;
  os.precision(17);
  os << "variant,seed,MAE,RMSE,baseline_MAE,first_loss,final_loss\n";
  for (const auto& r : rows)
    os << r.name << ',' << r.seed << ',' << r.mae << ',' << r.rmse << ',' << r.baseline_mae << ',' << r.first_loss
       << ',' << r.final_loss << '\n';
  return os.str();
}

/// Mean MAE per variant name, in first-seen order.
inline std::vector<std::pair<std::string, double>> mean_mae(std::span<const VariantResult> rows) {
  std::vector<std::pair<std::string, double>> out;
  std::map<std::string, std::pair<double, int>> acc;
  for (const auto& r : rows) {
    if (!acc.count(r.name)) out.emplace_back(r.name, 0.0);
    acc[r.name].first += r.mae;
    acc[r.name].second += 1;
  }
  for (auto& [name, m] : out) m = acc[name].first / acc[name].second;
  return out;
}

/// Active-learning run on one benchmark sequence, initialised from scratch.
inline ActiveResult<float> run_active(const Benchmark& b, const ExperimentConfig& c, std::uint64_t seed) {
  const nn::FlowRegressor<float> model(nn::FlowLayout::for_cell_px(b.seq.shape.cell_px));
  ActiveConfig ac = c.active;
  ac.train.seed = seed;
  ac.train.weights = c.train.weights;
  ac.eval_mode = c.eval_mode;
  return run_active_learning<float>(model, model.init(seed), b.seq.frames, b.seq.shape, b.train_keyframes(1),
                                    b.targets, b.test_frames, b.roi, ac);
}

inline json active_manifest(const std::string& command, const ExperimentConfig& c, std::uint64_t seed,
                            std::span<const ActiveIteration> curve) {
  json m = make_manifest(command, c);
  m["seed"] = seed;
  m["weights"] = to_json(c.train.weights);
  json its = json::array();
  for (const auto& it : curve) {
    json lab = json::array();
    for (const auto& lp : it.labeled) lab.push_back({lp.frame, lp.patch});
    its.push_back({{"iteration", it.iteration},
                   {"annotation_ratio", it.annotation_ratio},
                   {"MAE", it.mae},
                   {"RMSE", it.rmse},
                   {"best_val_mae", it.best_val_mae},
                   {"labeled", lab}});
  }
  m["iterations"] = its;
  return m;
}

}  // namespace flowcount
