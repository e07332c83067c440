#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <memory>
#include <set>
#include <sstream>
#include <span>
#include <string>
#include <vector>

#include "flowcount/errors.hpp"
#include "flowcount/grid.hpp"
#include "flowcount/losses.hpp"
#include "flowcount/nn/models.hpp"
#include "flowcount/nn/optim.hpp"
#include "flowcount/rng.hpp"
#include "flowcount/train.hpp"

namespace flowcount {

/// n x n partition of the grid. When the grid is not divisible by n the
/// row and column splits are balanced (sizes differ by at most one) and the
/// discriminator pads smaller patches with zeros.
struct PatchGrid {
  int n = 4;
  GridShape shape;

  void validate() const {
    shape.validate();
    if (n < 2) throw ConfigError("patch grid n must be >= 2");
    if (n > shape.rows || n > shape.cols)
      throw ConfigError("patch grid " + std::to_string(n) + "x" + std::to_string(n) + " does not fit grid " +
                        shape.str());
  }

  [[nodiscard]] int count() const { return n * n; }

  [[nodiscard]] CellRect rect(int k) const {
    if (k < 0 || k >= count()) throw RegionError("patch index " + std::to_string(k) + " out of range");
    const int pr = k / n;
    const int pc = k % n;
    const int r0 = pr * shape.rows / n;
    const int r1 = (pr + 1) * shape.rows / n;
    const int c0 = pc * shape.cols / n;
    const int c1 = (pc + 1) * shape.cols / n;
    return {r0, c0, r1 - r0, c1 - c0};
  }

  [[nodiscard]] int max_rows() const { return (shape.rows + n - 1) / n; }
  [[nodiscard]] int max_cols() const { return (shape.cols + n - 1) / n; }
  [[nodiscard]] int max_cells() const { return max_rows() * max_cols(); }
};

/// Sum of the conservation violation over the cells of a region.
inline double violation_score(const FlowField& f_in, const FlowField& f_out, const CellRect& patch) {
  if (!patch.within(f_in.shape()))
    throw RegionError("region " + patch.str() + " is not inside grid " + f_in.shape().str());
  const std::vector<double> v = conservation_violation_map(f_in, f_out);
  const GridShape& s = f_in.shape();
  double e = 0.0;
  for (int r = patch.row0; r < patch.row0 + patch.rows; ++r)
    for (int c = patch.col0; c < patch.col0 + patch.cols; ++c) e += v[static_cast<std::size_t>(s.index(r, c))];
  return e;
}

// ---------------------------------------------------------------------------
// Crops

/// A region of the grid extended by a halo, with the masks the losses need.
struct PatchCrop {
  CellRect crop;    // in full-grid cells
  CellRect region;  // in full-grid cells, inside crop
  GridShape shape;  // crop grid
  std::vector<std::uint8_t> outside_mask;  // true grid boundary only
  std::vector<std::uint8_t> cell_mask;     // region cells
};

inline PatchCrop make_crop(const GridShape& full, const CellRect& region, int halo = 1,
                           std::span<const std::uint8_t> full_outside = {}) {
  if (!region.within(full)) throw RegionError("region " + region.str() + " is not inside grid " + full.str());
  PatchCrop pc;
  pc.region = region;
  const int r0 = std::max(0, region.row0 - halo);
  const int c0 = std::max(0, region.col0 - halo);
  const int r1 = std::min(full.rows, region.row0 + region.rows + halo);
  const int c1 = std::min(full.cols, region.col0 + region.cols + halo);
  pc.crop = {r0, c0, r1 - r0, c1 - c0};
  pc.shape = {pc.crop.rows, pc.crop.cols, full.cell_px};
  const std::vector<std::uint8_t> bm = full_outside.empty() ? boundary_mask(full)
                                                            : std::vector<std::uint8_t>(full_outside.begin(), full_outside.end());
  pc.outside_mask.assign(static_cast<std::size_t>(pc.shape.cells()), 0);
  pc.cell_mask.assign(static_cast<std::size_t>(pc.shape.cells()), 0);
  for (int r = 0; r < pc.shape.rows; ++r)
    for (int c = 0; c < pc.shape.cols; ++c) {
      const int gr = r + r0;
      const int gc = c + c0;
      const auto k = static_cast<std::size_t>(pc.shape.index(r, c));
      pc.outside_mask[k] = bm[static_cast<std::size_t>(full.index(gr, gc))];
      pc.cell_mask[k] = region.contains(gr, gc) ? 1 : 0;
    }
  return pc;
}

inline ObservationFrame crop_frame(const ObservationFrame& f, const CellRect& crop, int cell_px) {
  ObservationFrame out;
  out.width = crop.cols * cell_px;
  out.height = crop.rows * cell_px;
  out.pixels.resize(static_cast<std::size_t>(out.width) * out.height);
  const int x0 = crop.col0 * cell_px;
  const int y0 = crop.row0 * cell_px;
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x)
      out.pixels[static_cast<std::size_t>(y) * out.width + x] = f.at(y0 + y, x0 + x);
  return out;
}

inline DensityMap crop_density(const DensityMap& m, const CellRect& crop) {
  const GridShape& s = m.shape();
  std::vector<double> v;
  v.reserve(static_cast<std::size_t>(crop.cells()));
  for (int r = crop.row0; r < crop.row0 + crop.rows; ++r)
    for (int c = crop.col0; c < crop.col0 + crop.cols; ++c) v.push_back(m.at(r, c));
  return DensityMap::from_values({crop.rows, crop.cols, s.cell_px}, std::move(v));
}

/// Values of a crop-level map on the crop's region cells, as a region-shaped map.
inline DensityMap region_density(const PatchCrop& pc, std::span<const double> crop_values) {
  std::vector<double> v;
  v.reserve(static_cast<std::size_t>(pc.region.cells()));
  for (int r = pc.region.row0; r < pc.region.row0 + pc.region.rows; ++r)
    for (int c = pc.region.col0; c < pc.region.col0 + pc.region.cols; ++c)
      v.push_back(crop_values[static_cast<std::size_t>(pc.shape.index(r - pc.crop.row0, c - pc.crop.col0))]);
  return DensityMap::from_values({pc.region.rows, pc.region.cols, pc.shape.cell_px}, std::move(v));
}

// ---------------------------------------------------------------------------
// Annotation budget and selection

struct LabeledPatch {
  int frame = 0;
  int patch = 0;
  friend auto operator<=>(const LabeledPatch&, const LabeledPatch&) = default;
};

struct AnnotationBudget {
  std::vector<LabeledPatch> labeled;   // in selection order
  std::vector<int> unlabeled_keyframes;  // ascending
  int total_keyframes = 0;
  int iteration = 0;

  [[nodiscard]] double annotation_ratio(int patches_per_frame) const {
    return total_keyframes == 0 ? 0.0
                                : static_cast<double>(labeled.size()) /
                                      (static_cast<double>(total_keyframes) * patches_per_frame);
  }
};

inline int fraction_count(double fraction, int total) {
  return static_cast<int>(std::ceil(fraction * total - 1e-9));
}

/// Labels one random patch in ceil(fraction * U) random keyframes.
inline AnnotationBudget initial_budget(std::vector<int> keyframes, const PatchGrid& grid, double fraction,
                                       std::uint64_t seed) {
  std::sort(keyframes.begin(), keyframes.end());
  AnnotationBudget b;
  b.total_keyframes = static_cast<int>(keyframes.size());
  Rng rng(seed, "active/initial");
  std::vector<int> order = keyframes;
  rng.shuffle(order.begin(), order.end());
  const int k = std::min(b.total_keyframes, fraction_count(fraction, b.total_keyframes));
  std::set<int> chosen;
  for (int i = 0; i < k; ++i) {
    const int t = order[static_cast<std::size_t>(i)];
    b.labeled.push_back({t, static_cast<int>(rng.below(static_cast<std::uint64_t>(grid.count())))});
    chosen.insert(t);
  }
  for (int t : keyframes)
    if (!chosen.count(t)) b.unlabeled_keyframes.push_back(t);
  return b;
}

/// Violation score E of every patch of keyframe t.
template <FlowModel M>
std::vector<double> patch_scores(const M& model, int t, const PatchGrid& grid) {
  const FlowField f_in = model.predict(t - 1, t);
  const FlowField f_out = model.predict(t, t + 1);
  const std::vector<double> v = conservation_violation_map(f_in, f_out);
  std::vector<double> e(static_cast<std::size_t>(grid.count()), 0.0);
  for (int k = 0; k < grid.count(); ++k) {
    const CellRect r = grid.rect(k);
    for (int rr = r.row0; rr < r.row0 + r.rows; ++rr)
      for (int cc = r.col0; cc < r.col0 + r.cols; ++cc)
        e[static_cast<std::size_t>(k)] += v[static_cast<std::size_t>(grid.shape.index(rr, cc))];
  }
  return e;
}

/// Moves the given keyframes from unlabeled to labeled with their patch.
inline void commit_selection(AnnotationBudget& b, const std::vector<LabeledPatch>& picks) {
  for (const auto& p : picks) {
    auto it = std::find(b.unlabeled_keyframes.begin(), b.unlabeled_keyframes.end(), p.frame);
    if (it == b.unlabeled_keyframes.end())
      throw ValueError("keyframe " + std::to_string(p.frame) + " is not unlabeled");
    b.unlabeled_keyframes.erase(it);
    b.labeled.push_back(p);
  }
  ++b.iteration;
}

/// Active selection: each unlabeled keyframe is scored by its largest patch
/// violation; the top ceil(fraction * U) keyframes get their argmax patch
/// labeled. Ties go to the lower frame index, then the lower patch index.
template <FlowModel M>
AnnotationBudget select_patches(const M& model, AnnotationBudget budget, const PatchGrid& grid,
                                double fraction = 0.15) {
  if (budget.unlabeled_keyframes.empty()) throw ExhaustedError("no unlabeled keyframes remain");
  struct Cand {
    double score;
    int frame;
    int patch;
  };
  std::vector<Cand> cands;
  for (int t : budget.unlabeled_keyframes) {
    const std::vector<double> e = patch_scores(model, t, grid);
    int best = 0;
    for (int k = 1; k < grid.count(); ++k)
      if (e[static_cast<std::size_t>(k)] > e[static_cast<std::size_t>(best)]) best = k;
    cands.push_back({e[static_cast<std::size_t>(best)], t, best});
  }
  std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.frame < b.frame;
  });
  const int k = std::min<int>(static_cast<int>(cands.size()), fraction_count(fraction, budget.total_keyframes));
  std::vector<LabeledPatch> picks;
  for (int i = 0; i < k; ++i) picks.push_back({cands[static_cast<std::size_t>(i)].frame, cands[static_cast<std::size_t>(i)].patch});
  commit_selection(budget, picks);
  return budget;
}

/// Control selector: random keyframes, random patch.
inline AnnotationBudget select_patches_random(AnnotationBudget budget, const PatchGrid& grid, double fraction,
                                              std::uint64_t seed) {
  if (budget.unlabeled_keyframes.empty()) throw ExhaustedError("no unlabeled keyframes remain");
  Rng rng(split_seed(split_seed(seed, "active/random"), static_cast<std::uint64_t>(budget.iteration)));
  std::vector<int> order = budget.unlabeled_keyframes;
  rng.shuffle(order.begin(), order.end());
  const int k = std::min<int>(static_cast<int>(order.size()), fraction_count(fraction, budget.total_keyframes));
  std::vector<LabeledPatch> picks;
  for (int i = 0; i < k; ++i)
    picks.push_back({order[static_cast<std::size_t>(i)], static_cast<int>(rng.below(static_cast<std::uint64_t>(grid.count())))});
  commit_selection(budget, picks);
  return budget;
}

// ---------------------------------------------------------------------------
// Training with patch annotations

struct PatchTrainConfig {
  int steps = 300;
  double learning_rate = 1e-4;        // generator, Adam
  double disc_learning_rate = 1e-4;  // discriminator, RMSProp
  LossWeights weights;
  std::uint64_t seed = 0;
  int max_super = 15;  // other patches a super-patch may contain
  double val_fraction = 0.4;
  int eval_every = 50;
  int disc_hidden = 16;
  LrSchedule lr_schedule = LrSchedule::constant;  // generator only

  void validate() const {
    if (steps < 0) throw ConfigError("steps must be >= 0");
    if (!(learning_rate >= 0.0) || !(disc_learning_rate >= 0.0)) throw ConfigError("learning rates must be >= 0");
    if (max_super < 1) throw ConfigError("max_super must be >= 1");
    if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must lie in [0, 1)");
    if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
    weights.validate();
  }
};

template <class T>
struct PatchTrainResult {
  std::vector<T> params;
  std::vector<double> disc_params;
  std::vector<LossLogRow> log;
  std::vector<LabeledPatch> train_split;
  std::vector<LabeledPatch> val_split;
  double best_val_mae = -1.0;  // -1 without a validation split
  int best_step = -1;
};

namespace detail {

// Density of a crop from passes f^{t-1,t} (incoming) and f^{t,t+1} (outgoing), averaged.
template <class T>
std::vector<double> crop_density_values(FlowGraph<T>& g, int pc, int cn) {
  const DensityMap a = density_from_flows(g.field(pc), SumMode::incoming);
  const DensityMap b = density_from_flows(g.field(cn), SumMode::outgoing);
  std::vector<double> m(a.values().size());
  for (std::size_t j = 0; j < m.size(); ++j) m[j] = 0.5 * (a.values()[j] + b.values()[j]);
  return m;
}

// Backpropagates a gradient on the averaged region density into the graph.
template <class T>
void add_density_grad(FlowGraph<T>& g, const PatchCrop& crop, int pc, int cn, std::span<const double> grad_region) {
  std::vector<double> gc(static_cast<std::size_t>(crop.shape.cells()), 0.0);
  std::size_t k = 0;
  for (int r = crop.region.row0; r < crop.region.row0 + crop.region.rows; ++r)
    for (int c = crop.region.col0; c < crop.region.col0 + crop.region.cols; ++c)
      gc[static_cast<std::size_t>(crop.shape.index(r - crop.crop.row0, c - crop.crop.col0))] = 0.5 * grad_region[k++];
  g.add_grad(pc, density_adjoint(gc, g.shape(), g.outside_mask(), SumMode::incoming));
  g.add_grad(cn, density_adjoint(gc, g.shape(), g.outside_mask(), SumMode::outgoing));
}

inline std::vector<double> padded_input(const DensityMap& region, const PatchGrid& grid) {
  std::vector<double> x(static_cast<std::size_t>(grid.max_cells()), 0.0);
  const GridShape& s = region.shape();
  for (int r = 0; r < s.rows; ++r)
    for (int c = 0; c < s.cols; ++c)
      x[static_cast<std::size_t>(r * grid.max_cols() + c)] = region.at(r, c);
  return x;
}

inline std::vector<double> unpad_grad(std::span<const double> gx, const GridShape& region, const PatchGrid& grid) {
  std::vector<double> g(static_cast<std::size_t>(region.cells()));
  for (int r = 0; r < region.rows; ++r)
    for (int c = 0; c < region.cols; ++c)
      g[static_cast<std::size_t>(region.index(r, c))] = gx[static_cast<std::size_t>(r * grid.max_cols() + c)];
  return g;
}

// A rectangle of patches (in patch units) containing patch k, with between 2
// and max_total patches.
inline CellRect draw_super_patch(const PatchGrid& grid, int k, int max_total, Rng& rng) {
  const int n = grid.n;
  std::vector<std::pair<int, int>> sizes;
  for (int h = 1; h <= n; ++h)
    for (int w = 1; w <= n; ++w)
      if (h * w >= 2 && h * w <= max_total) sizes.emplace_back(h, w);
  const auto [h, w] = sizes[static_cast<std::size_t>(rng.below(sizes.size()))];
  const int pr = k / n;
  const int pc = k % n;
  const int r_lo = std::max(0, pr - h + 1);
  const int r_hi = std::min(pr, n - h);
  const int c_lo = std::max(0, pc - w + 1);
  const int c_hi = std::min(pc, n - w);
  const int r0 = r_lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(r_hi - r_lo + 1)));
  const int c0 = c_lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(c_hi - c_lo + 1)));
  return {r0, c0, h, w};
}

template <class T>
double patch_count(const nn::FlowRegressor<T>& model, std::span<const T> params,
                   std::span<const ObservationFrame> frames, const GridShape& shape, const PatchCrop& crop, int t) {
  FlowGraph<T> g(model, params, crop.shape, crop.outside_mask,
                 [&](int s) { return crop_frame(frames[static_cast<std::size_t>(s)], crop.crop, shape.cell_px); });
  const int pc = g.flow(t - 1, t);
  const int cn = g.flow(t, t + 1);
  return region_density(crop, crop_density_values(g, pc, cn)).total();
}

}  // namespace detail

/// Training with one annotated patch per labeled keyframe. Each step:
/// supervised conservation loss on a labeled patch, target-free loss on a
/// random unlabeled patch, one RMSProp discriminator step, a random
/// super-patch count-consistency loss, then one Adam step on the overall
/// loss. The labeled set is split into training and validation patches; the
/// parameters with the best validation count MAE are returned.
template <class T>
PatchTrainResult<T> train_patch_annotated(const nn::FlowRegressor<T>& model, std::vector<T> params,
                                          std::span<const ObservationFrame> frames, const GridShape& shape,
                                          const std::vector<LabeledPatch>& labeled, const std::vector<int>& keyframes,
                                          const std::map<int, DensityMap>& targets, const PatchGrid& grid,
                                          const PatchTrainConfig& cfg, std::vector<double> disc_params = {}) {
  cfg.validate();
  grid.validate();
  if (!grid.shape.same_cells(shape)) throw RegionError("patch grid " + grid.shape.str() + " does not match grid " + shape.str());
  if (labeled.empty()) throw ConfigError("patch training needs at least one labeled patch");
  const int n = static_cast<int>(frames.size());
  std::set<LabeledPatch> labeled_set(labeled.begin(), labeled.end());
  for (const auto& lp : labeled) {
    if (lp.frame < 1 || lp.frame + 1 >= n)
      throw RegionError("labeled frame " + std::to_string(lp.frame) + " has no neighbours");
    if (lp.patch < 0 || lp.patch >= grid.count()) throw RegionError("patch index " + std::to_string(lp.patch) + " out of range");
    if (!targets.count(lp.frame)) throw AnnotationError("no annotation for labeled frame " + std::to_string(lp.frame));
  }
  std::vector<LabeledPatch> unlabeled_pool;
  for (int t : keyframes) {
    if (t < 1 || t + 1 >= n) continue;
    for (int k = 0; k < grid.count(); ++k)
      if (!labeled_set.count({t, k})) unlabeled_pool.push_back({t, k});
  }

  PatchTrainResult<T> res;
  res.params = std::move(params);
  {
    std::vector<LabeledPatch> order = labeled;
    Rng split(cfg.seed, "patch/split");
    split.shuffle(order.begin(), order.end());
    const int n_val = order.size() >= 2 ? static_cast<int>(std::floor(cfg.val_fraction * static_cast<double>(order.size()))) : 0;
    res.val_split.assign(order.begin(), order.begin() + n_val);
    res.train_split.assign(order.begin() + n_val, order.end());
  }
  const nn::Discriminator disc(grid.max_cells(), cfg.disc_hidden);
  res.disc_params = disc_params.empty() ? disc.init(split_seed(cfg.seed, "patch/disc")) : std::move(disc_params);
  nn::OptimizerState gen_opt = nn::OptimizerState::adam(res.params.size(), cfg.learning_rate);
  nn::OptimizerState disc_opt = nn::OptimizerState::rmsprop(res.disc_params.size(), cfg.disc_learning_rate);
  Rng rng(cfg.seed, "patch/sample");
  const LossWeights& w = cfg.weights;
  const std::vector<std::uint8_t> full_outside = boundary_mask(shape);

  auto frame_fn = [&](const PatchCrop& c) {
    return [&frames, &shape, crop = c.crop](int s) {
      return crop_frame(frames[static_cast<std::size_t>(s)], crop, shape.cell_px);
    };
  };

  auto validate_mae = [&]() {
    double s = 0.0;
    for (const auto& lp : res.val_split) {
      const PatchCrop c = make_crop(shape, grid.rect(lp.patch), 1, full_outside);
      const double pred = detail::patch_count<T>(model, res.params, frames, shape, c, lp.frame);
      s += std::abs(pred - targets.at(lp.frame).total(grid.rect(lp.patch)));
    }
    return s / static_cast<double>(res.val_split.size());
  };
  std::vector<T> best = res.params;
  auto consider = [&](int stepi) {
    if (res.val_split.empty()) return;
    const double mae = validate_mae();
    if (res.best_step < 0 || mae < res.best_val_mae) {
      res.best_val_mae = mae;
      res.best_step = stepi;
      best = res.params;
    }
  };

  for (int stepi = 0; stepi < cfg.steps; ++stepi) {
    if (stepi % cfg.eval_every == 0) consider(stepi);
    LossLogRow row;
    row.step = stepi;
    std::vector<std::unique_ptr<FlowGraph<T>>> graphs;

    // (1) supervised loss on a labeled patch
    const LabeledPatch A = res.train_split[static_cast<std::size_t>(rng.below(res.train_split.size()))];
    const CellRect a_rect = grid.rect(A.patch);
    const PatchCrop ca = make_crop(shape, a_rect, 1, full_outside);
    graphs.push_back(std::make_unique<FlowGraph<T>>(model, res.params, ca.shape, ca.outside_mask, frame_fn(ca)));
    FlowGraph<T>& ga = *graphs.back();
    const DensityMap a_target = crop_density(targets.at(A.frame), ca.crop);
    auto [la, a_pc] = add_combi(ga, A.frame, &a_target, w.alpha, ca.cell_mask);
    const int a_cn = ga.flow(A.frame, A.frame + 1);
    row.l_flow += la.l_flow;
    row.l_cycle += la.l_cycle;
    row.total += la.value;

    // (2) target-free loss on an unlabeled patch, (3) discriminator step
    if (!unlabeled_pool.empty()) {
      const LabeledPatch U = unlabeled_pool[static_cast<std::size_t>(rng.below(unlabeled_pool.size()))];
      const PatchCrop cu = make_crop(shape, grid.rect(U.patch), 1, full_outside);
      graphs.push_back(std::make_unique<FlowGraph<T>>(model, res.params, cu.shape, cu.outside_mask, frame_fn(cu)));
      FlowGraph<T>& gu = *graphs.back();
      auto [lu, u_pc] = add_combi(gu, U.frame, nullptr, w.alpha, cu.cell_mask);
      const int u_cn = gu.flow(U.frame, U.frame + 1);
      row.l_uflow += lu.l_uflow;
      row.l_cycle += lu.l_cycle;
      row.total += lu.value;
      if (w.delta > 0.0) {
        const DensityMap m_a = region_density(ca, detail::crop_density_values(ga, a_pc, a_cn));
        const DensityMap m_u = region_density(cu, detail::crop_density_values(gu, u_pc, u_cn));
        const std::vector<std::vector<double>> xa{detail::padded_input(m_a, grid)};
        const std::vector<std::vector<double>> xu{detail::padded_input(m_u, grid)};
        const AdversarialLoss adv = loss_adversarial(disc, res.disc_params, xa, xu);
        row.l_advers = adv.g_loss;
        row.total += w.delta * adv.g_loss;
        const std::vector<double> gm = detail::unpad_grad(adv.grad_unlabeled[0], m_u.shape(), grid);
        std::vector<double> gmw(gm.size());
        for (std::size_t i = 0; i < gm.size(); ++i) gmw[i] = w.delta * gm[i];
        detail::add_density_grad(gu, cu, u_pc, u_cn, gmw);
        nn::optimizer_step<double>(disc_opt, res.disc_params, adv.grad_d_params);
      }
    }

    // (4) super-patch count consistency
    if (w.gamma > 0.0) {
      const CellRect sp = detail::draw_super_patch(grid, A.patch, cfg.max_super + 1, rng);
      const CellRect first = grid.rect(sp.row0 * grid.n + sp.col0);
      const CellRect last = grid.rect((sp.row0 + sp.rows - 1) * grid.n + sp.col0 + sp.cols - 1);
      const CellRect s_rect{first.row0, first.col0, last.row0 + last.rows - first.row0, last.col0 + last.cols - first.col0};
      const PatchCrop cs = make_crop(shape, s_rect, 1, full_outside);
      graphs.push_back(std::make_unique<FlowGraph<T>>(model, res.params, cs.shape, cs.outside_mask, frame_fn(cs)));
      FlowGraph<T>& gs = *graphs.back();
      const int s_pc = gs.flow(A.frame - 1, A.frame);
      const int s_cn = gs.flow(A.frame, A.frame + 1);
      const RegionDensity super{s_rect, region_density(cs, detail::crop_density_values(gs, s_pc, s_cn))};
      std::vector<RegionDensity> parts;
      std::vector<PatchCrop> part_crops;
      std::vector<FlowGraph<T>*> part_graphs;
      std::vector<std::pair<int, int>> part_passes;
      for (int pr = sp.row0; pr < sp.row0 + sp.rows; ++pr)
        for (int pc = sp.col0; pc < sp.col0 + sp.cols; ++pc) {
          const int k = pr * grid.n + pc;
          if (k == A.patch) continue;
          part_crops.push_back(make_crop(shape, grid.rect(k), 1, full_outside));
          const PatchCrop& cp = part_crops.back();
          graphs.push_back(std::make_unique<FlowGraph<T>>(model, res.params, cp.shape, cp.outside_mask, frame_fn(cp)));
          FlowGraph<T>& gp = *graphs.back();
          const int p_pc = gp.flow(A.frame - 1, A.frame);
          const int p_cn = gp.flow(A.frame, A.frame + 1);
          parts.push_back({cp.region, region_density(cp, detail::crop_density_values(gp, p_pc, p_cn))});
          part_graphs.push_back(&gp);
          part_passes.emplace_back(p_pc, p_cn);
        }
      const double annotated = targets.at(A.frame).total(a_rect);
      const SpatialLoss ls = loss_spatial(parts, super, annotated, &a_rect);
      row.l_spatial = ls.value;
      row.total += w.gamma * ls.value;
      for (std::size_t i = 0; i < parts.size(); ++i) {
        const std::vector<double> g(static_cast<std::size_t>(part_crops[i].region.cells()), w.gamma * ls.grad_patch[i]);
        detail::add_density_grad(*part_graphs[i], part_crops[i], part_passes[i].first, part_passes[i].second, g);
      }
      const std::vector<double> g(static_cast<std::size_t>(s_rect.cells()), w.gamma * ls.grad_super);
      detail::add_density_grad(gs, cs, s_pc, s_cn, g);
    }

    // (5) generator step on the overall loss
    loss_overall({row.l_flow + row.l_uflow + w.alpha * row.l_cycle, row.l_spatial, row.l_advers}, w);
    res.log.push_back(row);
    std::vector<T> grad(res.params.size(), T(0));
    for (auto& g : graphs) g->backward(grad);
    gen_opt.learning_rate = scheduled_lr(cfg.learning_rate, cfg.lr_schedule, stepi, cfg.steps);
    nn::optimizer_step<T>(gen_opt, res.params, grad);
  }
  consider(cfg.steps);
  if (!res.val_split.empty()) res.params = std::move(best);
  return res;
}

// ---------------------------------------------------------------------------
// Active-learning loop

enum class Selector { active, random };

inline std::string to_string(Selector s) { return s == Selector::active ? "active" : "random"; }

inline Selector selector_from_string(const std::string& s) {
  if (s == "active") return Selector::active;
  if (s == "random") return Selector::random;
  throw ConfigError("unknown selector '" + s + "' (expected active or random)");
}

struct ActiveConfig {
  int patch_n = 4;
  double initial_fraction = 0.25;
  double step_fraction = 0.15;
  int iterations = 5;
  Selector selector = Selector::active;
  PatchTrainConfig train;
  bool warm_start = true;
  Reconstruction eval_mode = Reconstruction::average;

  void validate() const {
    if (patch_n < 2) throw ConfigError("patch_n must be >= 2");
    if (!(initial_fraction > 0.0 && initial_fraction <= 1.0)) throw ConfigError("initial_fraction must lie in (0, 1]");
    if (!(step_fraction > 0.0 && step_fraction <= 1.0)) throw ConfigError("step_fraction must lie in (0, 1]");
    if (iterations < 0) throw ConfigError("iterations must be >= 0");
    train.validate();
  }
};

struct ActiveIteration {
  int iteration = 0;
  double annotation_ratio = 0.0;
  double mae = 0.0;
  double rmse = 0.0;
  double best_val_mae = -1.0;
  std::vector<LabeledPatch> labeled;
};

template <class T>
struct ActiveResult {
  std::vector<ActiveIteration> curve;
  std::vector<T> params;
};

inline std::string active_curve_csv(std::span<const ActiveIteration> curve) {
  std::ostringstream os;
  os.precision(17);
  os << "iteration,annotation_ratio,MAE,RMSE\n";
  for (const auto& c : curve) os << c.iteration << ',' << c.annotation_ratio << ',' << c.mae << ',' << c.rmse << '\n';
  return os.str();
}

/// Initial random labeling, then `iterations` rounds of selection and
/// retraining. Each round is evaluated on the test frames.
template <class T>
ActiveResult<T> run_active_learning(const nn::FlowRegressor<T>& model, std::vector<T> params,
                                    std::span<const ObservationFrame> frames, const GridShape& shape,
                                    const std::vector<int>& train_keyframes, const std::map<int, DensityMap>& targets,
                                    std::span<const int> test_frames, std::span<const std::uint8_t> roi,
                                    const ActiveConfig& cfg) {
  cfg.validate();
  const PatchGrid grid{cfg.patch_n, shape};
  grid.validate();
  AnnotationBudget budget = initial_budget(train_keyframes, grid, cfg.initial_fraction, cfg.train.seed);
  ActiveResult<T> out;
  const std::vector<T> init = params;
  std::vector<T> current = std::move(params);
  std::vector<double> disc;
  for (int it = 0; it <= cfg.iterations; ++it) {
    PatchTrainConfig tc = cfg.train;
    tc.seed = split_seed(cfg.train.seed, static_cast<std::uint64_t>(it));
    auto tr = train_patch_annotated<T>(model, cfg.warm_start ? current : init, frames, shape, budget.labeled,
                                       train_keyframes, targets, grid, tc, cfg.warm_start ? disc : std::vector<double>{});
    current = std::move(tr.params);
    disc = std::move(tr.disc_params);
    const NetworkFlowModel<T> net{&model, current, frames, shape};
    const EvalResult ev = evaluate(net, test_frames, targets, roi, cfg.eval_mode);
    out.curve.push_back({it, budget.annotation_ratio(grid.count()), ev.mae, ev.rmse, tr.best_val_mae, budget.labeled});
    if (it == cfg.iterations || budget.unlabeled_keyframes.empty()) break;
    if (cfg.selector == Selector::active)
      budget = select_patches(net, std::move(budget), grid, cfg.step_fraction);
    else
      budget = select_patches_random(std::move(budget), grid, cfg.step_fraction, cfg.train.seed);
  }
  out.params = std::move(current);
  return out;
}

}  // namespace flowcount
