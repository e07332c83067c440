#pragma once

#include <cmath>
#include <concepts>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "flowcount/errors.hpp"
#include "flowcount/grid.hpp"
#include "flowcount/losses.hpp"
#include "flowcount/nn/models.hpp"
#include "flowcount/nn/optim.hpp"
#include "flowcount/rng.hpp"
#include "flowcount/sim.hpp"

namespace flowcount {

/// flow: densities are sums of regressed flows with the conservation and
/// cycle losses. weak: the same network read as a density regressor
/// (m^t = incoming flows of the pair (t-1, t)) trained with density
/// supervision plus the hinge constraint only.
enum class DensityMode { flow, weak };

inline std::string to_string(DensityMode m) { return m == DensityMode::flow ? "flow" : "weak"; }

enum class LrSchedule { constant, linear };

inline std::string to_string(LrSchedule s) { return s == LrSchedule::constant ? "constant" : "linear"; }

inline LrSchedule lr_schedule_from_string(const std::string& s) {
  if (s == "constant") return LrSchedule::constant;
  if (s == "linear") return LrSchedule::linear;
  throw ConfigError("unknown lr schedule '" + s + "' (expected constant or linear)");
}

/// Learning rate at step k of n. `linear` decays to zero at the last step.
inline double scheduled_lr(double base, LrSchedule s, int k, int n) {
  if (s == LrSchedule::constant || n <= 0) return base;
  return base * (1.0 - static_cast<double>(k) / static_cast<double>(n));
}

struct TrainConfig {
  int keyframe_interval = 1;
  int batch = 1;
  int max_steps = 2000;
  double learning_rate = 1e-4;
  LossWeights weights;
  std::uint64_t seed = 0;
  bool use_optical = false;
  DensityMode mode = DensityMode::flow;
  LrSchedule lr_schedule = LrSchedule::constant;

  void validate() const {
    if (keyframe_interval < 1) throw ConfigError("keyframe interval V must be >= 1");
    if (batch < 1) throw ConfigError("batch must be >= 1");
    if (max_steps < 0) throw ConfigError("max_steps must be >= 0");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
      throw ConfigError("learning rate must be finite and >= 0");
    weights.validate();
  }
};

struct LossLogRow {
  int step = 0;
  double l_flow = 0, l_cycle = 0, l_uflow = 0, l_optical = 0, l_spatial = 0, l_advers = 0, total = 0;

  LossLogRow& operator+=(const LossLogRow& o) {
    l_flow += o.l_flow;
    l_cycle += o.l_cycle;
    l_uflow += o.l_uflow;
    l_optical += o.l_optical;
    l_spatial += o.l_spatial;
    l_advers += o.l_advers;
    total += o.total;
    return *this;
  }
  void scale(double k) {
    l_flow *= k;
    l_cycle *= k;
    l_uflow *= k;
    l_optical *= k;
    l_spatial *= k;
    l_advers *= k;
    total *= k;
  }
};

inline std::string loss_log_csv(std::span<const LossLogRow> rows) {
  std::ostringstream os;
  os.precision(17);
  os << "step,l_flow,l_cycle,l_uflow,l_optical,l_spatial,l_advers,total\n";
  for (const auto& r : rows)
    os << r.step << ',' << r.l_flow << ',' << r.l_cycle << ',' << r.l_uflow << ',' << r.l_optical << ','
       << r.l_spatial << ',' << r.l_advers << ',' << r.total << '\n';
  return os.str();
}

/// Frozen optical-flow prior used by the optical correlation loss.
struct OpticalPrior {
  const nn::OpticalRegressor* fo = nullptr;
  std::span<const double> params;
  std::span<const OpticalFlowField> optical;  // optical[t] = o^{t,t+1}
  double mask_eps = 1e-4;
};

// ---------------------------------------------------------------------------

/// Lazily encodes frames and decodes pairs for one training step, then
/// backpropagates the gradients accumulated on each pass.
template <class T>
class FlowGraph {
 public:
  using FrameFn = std::function<ObservationFrame(int)>;

  FlowGraph(const nn::FlowRegressor<T>& model, std::span<const T> params, GridShape shape,
            std::vector<std::uint8_t> outside_mask, FrameFn frame)
      : model_(model), params_(params), shape_(shape), mask_(std::move(outside_mask)), frame_(std::move(frame)) {
    if (mask_.empty()) mask_ = boundary_mask(shape_);
  }

  [[nodiscard]] const GridShape& shape() const { return shape_; }
  [[nodiscard]] const std::vector<std::uint8_t>& outside_mask() const { return mask_; }

  /// Index of the pass predicting flows from frame a to frame b.
  int flow(int a, int b) {
    for (std::size_t i = 0; i < pairs_.size(); ++i)
      if (pairs_[i] == std::pair{a, b}) return static_cast<int>(i);
    passes_.push_back(model_.decode(params_, encoded(a), encoded(b), shape_, mask_));
    pairs_.emplace_back(a, b);
    grads_.emplace_back(passes_.back().flow.size(), 0.0);
    return static_cast<int>(passes_.size() - 1);
  }

  [[nodiscard]] FlowField field(int i) const { return passes_[static_cast<std::size_t>(i)].field(); }
  [[nodiscard]] const std::vector<double>& values(int i) const { return passes_[static_cast<std::size_t>(i)].flow; }

  void add_grad(int i, std::span<const double> g, double w = 1.0) {
    auto& dst = grads_[static_cast<std::size_t>(i)];
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += w * g[k];
  }

  void backward(std::span<T> grad_params) {
    std::map<int, nn::Tensor<T>> gfeat;
    for (std::size_t i = 0; i < passes_.size(); ++i) {
      bool any = false;
      for (double v : grads_[i])
        if (v != 0.0) {
          any = true;
          break;
        }
      if (!any) continue;
      auto [a, b] = pairs_[i];
      model_.decode_backward(params_, passes_[i], grads_[i], grad_params, gfeat[a], gfeat[b]);
    }
    for (auto& [t, g] : gfeat) model_.encode_backward(params_, enc_.at(t), g, grad_params);
  }

 private:
  const nn::StackTape<T>& encoded(int t) {
    auto it = enc_.find(t);
    if (it == enc_.end()) it = enc_.emplace(t, model_.encode(params_, model_.image(frame_(t), shape_))).first;
    return it->second;
  }

  const nn::FlowRegressor<T>& model_;
  std::span<const T> params_;
  GridShape shape_;
  std::vector<std::uint8_t> mask_;
  FrameFn frame_;
  std::map<int, nn::StackTape<T>> enc_;
  std::vector<nn::FlowPass<T>> passes_;
  std::vector<std::pair<int, int>> pairs_;
  std::vector<std::vector<double>> grads_;
};

/// Adds loss_combi around frame t (t-1, t, t+1) to the graph; returns the
/// loss and the index of the f^{t-1,t} pass.
template <class T>
std::pair<CombiLoss, int> add_combi(FlowGraph<T>& g, int t, const DensityMap* target, double alpha,
                                    std::span<const std::uint8_t> cell_mask = {}, double w = 1.0) {
  const int pc = g.flow(t - 1, t);
  const int cn = g.flow(t, t + 1);
  const int cp = g.flow(t, t - 1);
  const int nc = g.flow(t + 1, t);
  CombiLoss l = loss_combi(g.field(pc), g.field(cn), g.field(cp), g.field(nc), target, alpha, cell_mask);
  g.add_grad(pc, l.grads[0], w);
  g.add_grad(cn, l.grads[1], w);
  g.add_grad(cp, l.grads[2], w);
  g.add_grad(nc, l.grads[3], w);
  return {std::move(l), pc};
}

/// Adds beta * loss_optical on the densities implied by pass pc = f^{t-1,t}.
template <class T>
double add_optical(FlowGraph<T>& g, int pc, const OpticalFlowField& target, const OpticalPrior& prior, double w) {
  const FlowField f = g.field(pc);
  const DensityMap m_prev = density_from_flows(f, SumMode::outgoing);
  const DensityMap m_cur = density_from_flows(f, SumMode::incoming);
  const OpticalLoss o = loss_optical(*prior.fo, prior.params, m_prev, m_cur, target, prior.mask_eps);
  g.add_grad(pc, density_adjoint(o.grad_m_prev, g.shape(), g.outside_mask(), SumMode::outgoing), w);
  g.add_grad(pc, density_adjoint(o.grad_m_cur, g.shape(), g.outside_mask(), SumMode::incoming), w);
  return o.value;
}

/// Frames t that training may centre a triple on.
inline std::vector<int> usable_keyframes(int n_frames, int V, DensityMode mode) {
  std::vector<int> out;
  const int lo = mode == DensityMode::weak ? 2 : 1;
  for (int t = 0; t + 1 < n_frames; t += V)
    if (t >= lo) out.push_back(t);
  return out;
}

template <class T>
struct TrainResult {
  std::vector<T> params;
  std::vector<LossLogRow> log;
  std::vector<int> sampled;  // centre frame of every sampled triple
};

namespace detail {

template <class T>
LossLogRow weak_step(FlowGraph<T>& g, int t, const std::map<int, DensityMap>& targets, double alpha, double w) {
  LossLogRow row;
  auto dens = [&](int s) {
    const int i = g.flow(s - 1, s);
    return std::pair{i, density_from_flows(g.field(i), SumMode::incoming)};
  };
  auto [ip, mp] = dens(t - 1);
  auto [ic, mc] = dens(t);
  auto [in, mn] = dens(t + 1);
  const DensityMap& tgt = targets.at(t);
  std::vector<double> gc(mc.values().size(), 0.0);
  for (std::size_t j = 0; j < gc.size(); ++j) {
    const double r = mc.values()[j] - tgt.values()[j];
    row.l_flow += r * r;
    gc[j] = 2.0 * r;
  }
  const WeakLoss wl = loss_weak_baseline(mp, mc, mn);
  row.l_cycle = wl.value;
  for (std::size_t j = 0; j < gc.size(); ++j) gc[j] += alpha * wl.grad_cur[j];
  std::vector<double> gp(wl.grad_prev.size()), gn(wl.grad_next.size());
  for (std::size_t j = 0; j < gp.size(); ++j) {
    gp[j] = alpha * wl.grad_prev[j];
    gn[j] = alpha * wl.grad_next[j];
  }
  g.add_grad(ip, density_adjoint(gp, g.shape(), g.outside_mask(), SumMode::incoming), w);
  g.add_grad(ic, density_adjoint(gc, g.shape(), g.outside_mask(), SumMode::incoming), w);
  g.add_grad(in, density_adjoint(gn, g.shape(), g.outside_mask(), SumMode::incoming), w);
  row.total = row.l_flow + alpha * row.l_cycle;
  return row;
}

}  // namespace detail

/// Three-frame training. Every step samples `batch` keyframes t (multiples
/// of V), evaluates the four flow passes around t with the keyframe target,
/// and takes one Adam step on the batch mean. For V > 1 each sample also adds
/// the target-free loss on the triple centred at t-1 or t+1 (chosen at
/// random), which brings in the unannotated neighbours.
template <class T>
TrainResult<T> train_three_frame(const nn::FlowRegressor<T>& model, std::vector<T> params,
                                 std::span<const ObservationFrame> frames, const GridShape& shape,
                                 const std::map<int, DensityMap>& targets, const TrainConfig& cfg,
                                 const OpticalPrior* prior = nullptr) {
  cfg.validate();
  const int n = static_cast<int>(frames.size());
  if (n < 3) throw ConfigError("training needs at least 3 frames, got " + std::to_string(n));
  const int V = cfg.keyframe_interval;
  const std::vector<int> keys = usable_keyframes(n, V, cfg.mode);
  if (keys.empty()) throw ConfigError("no usable keyframes for interval " + std::to_string(V));
  for (int t : keys)
    if (!targets.count(t)) throw AnnotationError("missing density target for keyframe " + std::to_string(t));
  if (cfg.use_optical) {
    if (!prior || !prior->fo) throw ConfigError("optical loss requested without a pre-trained F_o");
    if (static_cast<int>(prior->optical.size()) < n - 1) throw ConfigError("optical flow missing for training frames");
  }

  TrainResult<T> res;
  res.params = std::move(params);
  if (res.params.size() != model.num_params()) throw ShapeError("parameter vector does not match model");
  nn::OptimizerState opt = nn::OptimizerState::adam(res.params.size(), cfg.learning_rate);
  Rng sample_rng(cfg.seed, "train/sample");
  Rng aux_rng(cfg.seed, "train/aux");
  const double w = 1.0 / cfg.batch;
  const double alpha = cfg.weights.alpha;

  for (int stepi = 0; stepi < cfg.max_steps; ++stepi) {
    FlowGraph<T> g(model, res.params, shape, {}, [&](int t) { return frames[static_cast<std::size_t>(t)]; });
    LossLogRow row;
    row.step = stepi;
    for (int b = 0; b < cfg.batch; ++b) {
      const int t = keys[static_cast<std::size_t>(sample_rng.below(keys.size()))];
      res.sampled.push_back(t);
      if (cfg.mode == DensityMode::weak) {
        row += detail::weak_step(g, t, targets, alpha, w);
        continue;
      }
      auto [l, pc] = add_combi(g, t, &targets.at(t), alpha, {}, w);
      row.l_flow += l.l_flow;
      row.l_cycle += l.l_cycle;
      row.total += l.value;
      if (cfg.use_optical) {
        const double lo = add_optical(g, pc, prior->optical[static_cast<std::size_t>(t - 1)], *prior,
                                      w * cfg.weights.beta);
        row.l_optical += lo;
        row.total += cfg.weights.beta * lo;
      }
      if (V > 1) {
        const bool left_ok = t - 2 >= 0;
        const bool right_ok = t + 2 < n;
        int side = 0;
        if (left_ok && right_ok) side = aux_rng.below(2) == 0 ? -1 : 1;
        else if (left_ok) side = -1;
        else if (right_ok) side = 1;
        if (side != 0) {
          auto [lu, pcu] = add_combi(g, t + side, nullptr, alpha, {}, w);
          row.l_uflow += lu.l_uflow;
          row.l_cycle += lu.l_cycle;
          row.total += lu.value;
          (void)pcu;
        }
      }
    }
    row.scale(w);
    res.log.push_back(row);
    std::vector<T> grad(res.params.size(), T(0));
    g.backward(grad);
    opt.learning_rate = scheduled_lr(cfg.learning_rate, cfg.lr_schedule, stepi, cfg.max_steps);
    nn::optimizer_step<T>(opt, res.params, grad);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Evaluation

template <class M>
concept FlowModel = requires(const M& m, int a, int b) {
  { m.predict(a, b) } -> std::convertible_to<FlowField>;
};

enum class Reconstruction { forward, backward, average };

inline std::string to_string(Reconstruction r) {
  switch (r) {
    case Reconstruction::forward: return "forward";
    case Reconstruction::backward: return "backward";
    case Reconstruction::average: return "average";
  }
  return "?";
}

/// Density at frame t: incoming flows of (t-1 -> t), outgoing flows of
/// (t -> t-1), or their mean.
template <FlowModel M>
DensityMap reconstruct_density(const M& model, int t, Reconstruction mode) {
  if (mode == Reconstruction::forward) return density_from_flows(model.predict(t - 1, t), SumMode::incoming);
  if (mode == Reconstruction::backward) return density_from_flows(model.predict(t, t - 1), SumMode::outgoing);
  return average_bidirectional(density_from_flows(model.predict(t - 1, t), SumMode::incoming),
                               density_from_flows(model.predict(t, t - 1), SumMode::outgoing));
}

struct EvalResult {
  double mae = 0.0;
  double rmse = 0.0;
  std::vector<double> z;
  std::vector<double> zhat;
};

inline EvalResult count_metrics(std::vector<double> z, std::vector<double> zhat) {
  if (z.empty()) throw ConfigError("evaluation needs at least one test frame");
  if (z.size() != zhat.size()) throw ShapeError("count vectors differ in length");
  EvalResult r;
  double sa = 0.0;
  double ss = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double d = zhat[i] - z[i];
    sa += std::abs(d);
    ss += d * d;
  }
  r.mae = sa / static_cast<double>(z.size());
  r.rmse = std::sqrt(ss / static_cast<double>(z.size()));
  r.z = std::move(z);
  r.zhat = std::move(zhat);
  return r;
}

/// MAE / RMSE of ROI counts over the given test frames. An empty roi counts
/// every cell.
template <FlowModel M>
EvalResult evaluate(const M& model, std::span<const int> test_frames, const std::map<int, DensityMap>& targets,
                    std::span<const std::uint8_t> roi = {}, Reconstruction mode = Reconstruction::average) {
  if (test_frames.empty()) throw ConfigError("evaluation needs at least one test frame");
  std::vector<double> z, zhat;
  for (int t : test_frames) {
    auto it = targets.find(t);
    if (it == targets.end()) throw AnnotationError("no target for test frame " + std::to_string(t));
    const DensityMap m = reconstruct_density(model, t, mode);
    if (roi.empty()) {
      z.push_back(it->second.total());
      zhat.push_back(m.total());
    } else {
      z.push_back(it->second.total(roi));
      zhat.push_back(m.total(roi));
    }
  }
  return count_metrics(std::move(z), std::move(zhat));
}

template <class T>
struct NetworkFlowModel {
  const nn::FlowRegressor<T>* model = nullptr;
  std::span<const T> params;
  std::span<const ObservationFrame> frames;
  GridShape shape;

  [[nodiscard]] FlowField predict(int a, int b) const {
    return flow_forward(*model, params, frames[static_cast<std::size_t>(a)], frames[static_cast<std::size_t>(b)],
                        shape);
  }
};

/// Oracle "model" serving simulator flows; backward pairs are reversed.
struct GroundTruthFlowModel {
  std::span<const FlowField> flows;  // flows[t] = f^{t,t+1}

  [[nodiscard]] FlowField predict(int a, int b) const {
    if (b == a + 1 && a >= 0 && a < static_cast<int>(flows.size())) return flows[static_cast<std::size_t>(a)];
    if (a == b + 1 && b >= 0 && b < static_cast<int>(flows.size()))
      return reverse_flow(flows[static_cast<std::size_t>(b)]);
    throw ValueError("no ground-truth flow for frames " + std::to_string(a) + " -> " + std::to_string(b));
  }
};

/// Predicts the mean training ROI count for every test frame.
inline EvalResult constant_mean_baseline(std::span<const int> train_frames, std::span<const int> test_frames,
                                         const std::map<int, DensityMap>& targets,
                                         std::span<const std::uint8_t> roi = {}) {
  if (train_frames.empty()) throw ConfigError("baseline needs training frames");
  auto count = [&](int t) {
    const DensityMap& m = targets.at(t);
    return roi.empty() ? m.total() : m.total(roi);
  };
  double mean = 0.0;
  for (int t : train_frames) mean += count(t);
  mean /= static_cast<double>(train_frames.size());
  std::vector<double> z, zhat;
  for (int t : test_frames) {
    z.push_back(count(t));
    zhat.push_back(mean);
  }
  return count_metrics(std::move(z), std::move(zhat));
}

// ---------------------------------------------------------------------------
// F_o pre-training

struct FoSample {
  DensityMap m_prev;
  DensityMap m_cur;
  OpticalFlowField target;
};

struct FoResult {
  std::vector<double> params;
  std::vector<double> loss_curve;  // full-batch mean loss before each step, then after the last
};

inline double fo_dataset_loss(const nn::OpticalRegressor& fo, std::span<const double> params,
                              std::span<const FoSample> data, double mask_eps, std::vector<double>* grad) {
  double total = 0.0;
  if (grad) grad->assign(fo.num_params(), 0.0);
  const double w = 1.0 / static_cast<double>(data.size());
  for (const FoSample& s : data) {
    const OpticalLoss l = loss_optical(fo, params, s.m_prev, s.m_cur, s.target, mask_eps, grad != nullptr);
    total += w * l.value;
    if (grad) superpose(*grad, l.grad_params, w);
  }
  return total;
}

/// Full-batch Adam on the masked squared error between F_o(m_prev, m_cur)
/// and the ground-truth optical flow.
inline FoResult pretrain_fo(const nn::OpticalRegressor& fo, std::span<const FoSample> data, int steps, double lr,
                            std::vector<double> init_params, double mask_eps = 1e-4) {
  if (data.empty()) throw ConfigError("F_o pre-training needs at least one density pair");
  if (steps < 0) throw ConfigError("steps must be >= 0");
  if (!(lr >= 0.0)) throw ConfigError("learning rate must be >= 0");
  FoResult r;
  r.params = std::move(init_params);
  if (r.params.size() != fo.num_params()) throw ShapeError("F_o parameter vector does not match model");
  nn::OptimizerState opt = nn::OptimizerState::adam(r.params.size(), lr);
  std::vector<double> grad;
  for (int k = 0; k < steps; ++k) {
    r.loss_curve.push_back(fo_dataset_loss(fo, r.params, data, mask_eps, &grad));
    nn::optimizer_step<double>(opt, r.params, grad);
  }
  r.loss_curve.push_back(fo_dataset_loss(fo, r.params, data, mask_eps, nullptr));
  return r;
}

/// Pre-training pairs from consecutive annotated frames.
inline std::vector<FoSample> fo_samples(const std::map<int, DensityMap>& targets,
                                        std::span<const OpticalFlowField> optical, int first, int last) {
  std::vector<FoSample> out;
  for (int t = first; t < last; ++t) {
    auto a = targets.find(t);
    auto b = targets.find(t + 1);
    if (a == targets.end() || b == targets.end() || t >= static_cast<int>(optical.size())) continue;
    out.push_back({a->second, b->second, optical[static_cast<std::size_t>(t)]});
  }
  return out;
}

}  // namespace flowcount
