#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "flowcount/errors.hpp"
#include "flowcount/grid.hpp"
#include "flowcount/nn/models.hpp"

namespace flowcount {

struct LossWeights {
  double alpha = 1.0;    // cycle consistency
  double beta = 1e-4;    // optical-flow correlation
  double gamma = 1.0;    // super-patch count consistency
  double delta = 0.01;   // adversarial

  void validate() const {
    for (double w : {alpha, beta, gamma, delta})
      if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("loss weights must be finite and >= 0");
  }
  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

namespace detail {

inline bool counted(std::span<const std::uint8_t> mask, int j) {
  return mask.empty() || mask[static_cast<std::size_t>(j)] != 0;
}

inline void require_same(const FlowField& a, const FlowField& b, const char* what) {
  if (!a.shape().same_cells(b.shape()) || a.outside_mask() != b.outside_mask())
    throw ShapeError(std::string(what) + ": flow fields have shapes " + a.shape().str() + " and " +
                     b.shape().str());
}

inline void add_into(std::vector<double>& dst, const std::vector<double>& src, double w = 1.0) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += w * src[i];
}

}  // namespace detail

struct CombiLoss {
  double value = 0.0;
  double l_flow = 0.0;
  double l_uflow = 0.0;
  double l_cycle = 0.0;  // unweighted
  // Gradients with respect to the four input fields, (cell, channel) layout.
  std::array<std::vector<double>, 4> grads;
};

/// Conservation and cycle-consistency loss around frame t.
///   f_pc = f^{t-1,t}, f_cn = f^{t,t+1}, f_cp = f^{t,t-1}, f_nc = f^{t+1,t}.
/// With a target density the flow term compares both reconstructions of m^t
/// to it; without one, they are compared to each other. cell_mask, when not
/// empty, restricts every sum to cells j with a non-zero entry.
inline CombiLoss loss_combi(const FlowField& f_pc, const FlowField& f_cn, const FlowField& f_cp,
                            const FlowField& f_nc, const DensityMap* target, double alpha,
                            std::span<const std::uint8_t> cell_mask = {}) {
  detail::require_same(f_pc, f_cn, "loss_combi");
  detail::require_same(f_pc, f_cp, "loss_combi");
  detail::require_same(f_pc, f_nc, "loss_combi");
  const GridShape& s = f_pc.shape();
  const int cells = s.cells();
  if (target && !target->shape().same_cells(s))
    throw ShapeError("loss_combi: target " + target->shape().str() + " does not match flows " + s.str());
  if (!cell_mask.empty() && cell_mask.size() != static_cast<std::size_t>(cells))
    throw ShapeError("loss_combi: cell mask size mismatch");

  CombiLoss out;
  for (auto& g : out.grads) g.assign(static_cast<std::size_t>(cells) * kFlowChannels, 0.0);

  const DensityMap in = density_from_flows(f_pc, SumMode::incoming);
  const DensityMap outm = density_from_flows(f_cn, SumMode::outgoing);
  std::vector<double> g_in(static_cast<std::size_t>(cells), 0.0);
  std::vector<double> g_out(static_cast<std::size_t>(cells), 0.0);
  for (int j = 0; j < cells; ++j) {
    if (!detail::counted(cell_mask, j)) continue;
    const auto uj = static_cast<std::size_t>(j);
    if (target) {
      const double r1 = in.at(j) - target->at(j);
      const double r2 = outm.at(j) - target->at(j);
      out.l_flow += r1 * r1 + r2 * r2;
      g_in[uj] = 2.0 * r1;
      g_out[uj] = 2.0 * r2;
    } else {
      const double u = in.at(j) - outm.at(j);
      out.l_uflow += u * u;
      g_in[uj] = 2.0 * u;
      g_out[uj] = -2.0 * u;
    }
  }
  detail::add_into(out.grads[0], density_adjoint(g_in, s, f_pc.outside_mask(), SumMode::incoming));
  detail::add_into(out.grads[1], density_adjoint(g_out, s, f_cn.outside_mask(), SumMode::outgoing));

  // Cycle terms pair the flow i -> j of one direction in time with j -> i of
  // the other. The first sum is indexed by the destination j, the second by
  // the source j.
  for (int i = 0; i < cells; ++i) {
    const int r0 = i / s.cols;
    const int c0 = i % s.cols;
    for (int ch = 0; ch < kDirections; ++ch) {
      const int r = r0 + channel_dr(ch);
      const int c = c0 + channel_dc(ch);
      if (!s.contains(r, c)) continue;
      const int j = s.index(r, c);
      const int back = opposite_channel(ch);
      const std::size_t e_ij = static_cast<std::size_t>(i) * kFlowChannels + ch;
      const std::size_t e_ji = static_cast<std::size_t>(j) * kFlowChannels + back;
      if (detail::counted(cell_mask, j)) {
        const double d = f_pc.at(i, ch) - f_cp.at(j, back);
        out.l_cycle += d * d;
        out.grads[0][e_ij] += 2.0 * alpha * d;
        out.grads[2][e_ji] -= 2.0 * alpha * d;
      }
      if (detail::counted(cell_mask, i)) {
        const double d = f_cn.at(i, ch) - f_nc.at(j, back);
        out.l_cycle += d * d;
        out.grads[1][e_ij] += 2.0 * alpha * d;
        out.grads[3][e_ji] -= 2.0 * alpha * d;
      }
    }
  }
  out.value = out.l_flow + out.l_uflow + alpha * out.l_cycle;
  return out;
}

struct OpticalLoss {
  double value = 0.0;
  std::vector<double> grad_m_prev;
  std::vector<double> grad_m_cur;
  std::vector<double> grad_params;  // only filled when requested
};

/// Squared error between F_o(m_prev, m_cur) and a target optical flow,
/// counted only where m_cur > mask_eps. The mask is held constant.
inline OpticalLoss loss_optical(const nn::OpticalRegressor& fo, std::span<const double> fo_params,
                                const DensityMap& m_prev, const DensityMap& m_cur,
                                const OpticalFlowField& target, double mask_eps = 1e-4,
                                bool want_param_grad = false) {
  if (!target.shape.same_cells(m_cur.shape()))
    throw ShapeError("loss_optical: target optical flow " + target.shape.str() + " does not match density " +
                     m_cur.shape().str());
  const auto pass = fo.forward(fo_params, m_prev, m_cur);
  OpticalLoss out;
  std::vector<double> g(pass.out.uv.size(), 0.0);
  for (int j = 0; j < m_cur.shape().cells(); ++j) {
    if (!(m_cur.at(j) > mask_eps)) continue;
    for (int k = 0; k < 2; ++k) {
      const std::size_t e = 2 * static_cast<std::size_t>(j) + static_cast<std::size_t>(k);
      const double d = pass.out.uv[e] - target.uv[e];
      out.value += d * d;
      g[e] = 2.0 * d;
    }
  }
  auto grad = fo.backward(fo_params, pass, g, true);
  out.grad_m_prev = std::move(grad.m_prev);
  out.grad_m_cur = std::move(grad.m_cur);
  if (want_param_grad) out.grad_params = std::move(grad.params);
  return out;
}

/// A density map covering a rectangle of grid cells.
struct RegionDensity {
  CellRect rect;
  DensityMap density;
};

struct SpatialLoss {
  double value = 0.0;
  double residual = 0.0;
  // d value / d cell, the same for every cell of a map.
  std::vector<double> grad_patch;  // one per listed patch
  double grad_super = 0.0;
};

/// Count consistency of a super-patch: its predicted total must equal the
/// predicted totals of its unannotated patches plus the annotated count.
/// The listed patches together with annotated_rect (when given) must tile
/// the super-patch exactly.
inline SpatialLoss loss_spatial(std::span<const RegionDensity> patches, const RegionDensity& super,
                                double annotated_total = 0.0,
                                const CellRect* annotated_rect = nullptr) {
  auto check_map = [](const RegionDensity& r) {
    if (r.density.shape().rows != r.rect.rows || r.density.shape().cols != r.rect.cols)
      throw RegionError("density of region " + r.rect.str() + " has shape " + r.density.shape().str());
  };
  check_map(super);
  std::vector<CellRect> parts;
  for (const auto& p : patches) {
    check_map(p);
    parts.push_back(p.rect);
  }
  if (annotated_rect) parts.push_back(*annotated_rect);
  long area = 0;
  for (std::size_t a = 0; a < parts.size(); ++a) {
    const CellRect& r = parts[a];
    if (r.row0 < super.rect.row0 || r.col0 < super.rect.col0 ||
        r.row0 + r.rows > super.rect.row0 + super.rect.rows || r.col0 + r.cols > super.rect.col0 + super.rect.cols)
      throw RegionError("patch " + r.str() + " is not inside super-patch " + super.rect.str());
    for (std::size_t b = 0; b < a; ++b)
      if (r.overlaps(parts[b])) throw RegionError("patches " + r.str() + " and " + parts[b].str() + " overlap");
    area += r.cells();
  }
  if (area != super.rect.cells())
    throw RegionError("patches cover " + std::to_string(area) + " cells of super-patch " + super.rect.str() +
                      " with " + std::to_string(super.rect.cells()));
  SpatialLoss out;
  double sum = annotated_total;
  for (const auto& p : patches) sum += p.density.total();
  out.residual = sum - super.density.total();
  out.value = out.residual * out.residual;
  out.grad_patch.assign(patches.size(), 2.0 * out.residual);
  out.grad_super = -2.0 * out.residual;
  return out;
}

struct AdversarialLoss {
  double d_loss = 0.0;  // discriminator objective
  double g_loss = 0.0;  // non-saturating generator objective on unlabeled inputs
  std::vector<double> grad_d_params;               // of d_loss
  std::vector<std::vector<double>> grad_unlabeled;  // of g_loss, per unlabeled input
};

inline constexpr double kProbClamp = 1e-7;

/// Inputs are discriminator input vectors (flattened, padded patch densities).
inline AdversarialLoss loss_adversarial(const nn::Discriminator& disc, std::span<const double> params,
                                        std::span<const std::vector<double>> labeled,
                                        std::span<const std::vector<double>> unlabeled) {
  AdversarialLoss out;
  out.grad_d_params.assign(disc.num_params(), 0.0);
  const double lo = kProbClamp;
  const double hi = 1.0 - kProbClamp;
  std::vector<double> scratch;
  for (const auto& x : labeled) {
    const auto p = disc.forward(params, x);
    const double pc = std::clamp(p.prob, lo, hi);
    out.d_loss -= std::log(pc);
    if (p.prob > lo && p.prob < hi) disc.backward(params, p, -(1.0 - p.prob), out.grad_d_params, {});
  }
  for (const auto& x : unlabeled) {
    const auto p = disc.forward(params, x);
    const double pc = std::clamp(p.prob, lo, hi);
    out.d_loss -= std::log(1.0 - pc);
    out.g_loss -= std::log(pc);
    const bool inside = p.prob > lo && p.prob < hi;
    if (inside) disc.backward(params, p, p.prob, out.grad_d_params, {});
    std::vector<double> gx(x.size(), 0.0);
    scratch.assign(disc.num_params(), 0.0);
    if (inside) disc.backward(params, p, -(1.0 - p.prob), scratch, gx);
    out.grad_unlabeled.push_back(std::move(gx));
  }
  return out;
}

struct LossComponents {
  double combi = 0.0;
  double spatial = 0.0;
  double adversarial = 0.0;
};

/// combi + gamma * spatial + delta * adversarial. Gradients superpose with the
/// same weights (see superpose).
inline double loss_overall(const LossComponents& c, const LossWeights& w) {
  const std::pair<const char*, double> parts[] = {
      {"combi", c.combi}, {"spatial", c.spatial}, {"adversarial", c.adversarial}};
  for (const auto& [name, v] : parts)
    if (!std::isfinite(v)) throw NumericError(std::string("loss component '") + name + "' is not finite");
  return c.combi + w.gamma * c.spatial + w.delta * c.adversarial;
}

/// dst += w * src for a gradient vector.
inline void superpose(std::vector<double>& dst, std::span<const double> src, double w) {
  if (dst.size() != src.size()) throw ShapeError("gradient size mismatch");
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += w * src[i];
}

struct WeakLoss {
  double value = 0.0;
  std::vector<double> grad_prev;
  std::vector<double> grad_cur;
  std::vector<double> grad_next;
};

/// Hinge form of the looser density-only constraint: a cell may not hold more
/// people than its neighbourhood held a frame earlier or holds a frame later.
inline WeakLoss loss_weak_baseline(const DensityMap& m_prev, const DensityMap& m_cur, const DensityMap& m_next) {
  if (!m_prev.shape().same_cells(m_cur.shape()) || !m_next.shape().same_cells(m_cur.shape()))
    throw ShapeError("loss_weak_baseline: density maps differ in shape");
  const GridShape& s = m_cur.shape();
  WeakLoss out;
  const auto n = static_cast<std::size_t>(s.cells());
  out.grad_prev.assign(n, 0.0);
  out.grad_cur.assign(n, 0.0);
  out.grad_next.assign(n, 0.0);
  for (int j = 0; j < s.cells(); ++j) {
    const std::vector<int> nb = neighbor_cells(j, s);
    double sp = 0.0;
    double sn = 0.0;
    for (int i : nb) {
      sp += m_prev.at(i);
      sn += m_next.at(i);
    }
    const double hp = m_cur.at(j) - sp;
    const double hn = m_cur.at(j) - sn;
    if (hp > 0.0) {
      out.value += hp;
      out.grad_cur[static_cast<std::size_t>(j)] += 1.0;
      for (int i : nb) out.grad_prev[static_cast<std::size_t>(i)] -= 1.0;
    }
    if (hn > 0.0) {
      out.value += hn;
      out.grad_cur[static_cast<std::size_t>(j)] += 1.0;
      for (int i : nb) out.grad_next[static_cast<std::size_t>(i)] -= 1.0;
    }
  }
  return out;
}

}  // namespace flowcount
