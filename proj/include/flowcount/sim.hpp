#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "flowcount/density.hpp"
#include "flowcount/errors.hpp"
#include "flowcount/grid.hpp"
#include "flowcount/rng.hpp"

namespace flowcount {

enum class MotionModel { lanes, swirl, random_walk };

inline std::string to_string(MotionModel m) {
  switch (m) {
    case MotionModel::lanes: return "lanes";
    case MotionModel::swirl: return "swirl";
    case MotionModel::random_walk: return "random-walk";
  }
  return "?";
}

inline MotionModel motion_model_from_string(const std::string& s) {
  if (s == "lanes") return MotionModel::lanes;
  if (s == "swirl") return MotionModel::swirl;
  if (s == "random-walk" || s == "random_walk") return MotionModel::random_walk;
  throw ConfigError("unknown motion model '" + s + "'");
}

/// Synthetic crowd. Boundary traffic is a balanced exchange: whenever an
/// agent leaves the grid through a boundary cell, a newcomer enters that same
/// cell in the same step, so the OUTSIDE channel carries exits and entries
/// alike and conservation holds exactly on every cell.
struct SimConfig {
  GridShape shape{16, 16, 8};
  int n_agents = 200;
  double speed_max = 0.6;     // cells per frame, at most 1
  double entry_rate = 0.0;    // spontaneous boundary exchanges per frame
  bool exit_enabled = true;   // false: agents bounce off the border
  MotionModel motion_model = MotionModel::lanes;
  std::uint64_t seed = 1;
  int n_frames = 30;
  double steer_noise = 0.02;     // std of velocity noise, cells per frame
  double blob_peak = 0.2;        // rasterised intensity of one agent
  double platoon_spread = 3.5;   // lanes: std of a platoon along x, in cells

  void validate() const {
    shape.validate();
    if (n_agents < 0) throw ConfigError("n_agents must be >= 0");
    if (!(speed_max > 0.0 && speed_max <= 1.0))
      throw ConfigError("speed_max must lie in (0, 1] cells per frame");
    if (!(entry_rate >= 0.0)) throw ConfigError("entry_rate must be >= 0");
    if (entry_rate > 0.0 && !exit_enabled)
      throw ConfigError("entry_rate > 0 needs exit_enabled: entries are paired with exits");
    if (n_frames < 1) throw ConfigError("n_frames must be >= 1");
    if (!(steer_noise >= 0.0)) throw ConfigError("steer_noise must be >= 0");
    if (!(blob_peak > 0.0)) throw ConfigError("blob_peak must be > 0");
  }
};

struct Agent {
  std::uint64_t id = 0;
  double x = 0.0;  // cell units, column axis
  double y = 0.0;  // cell units, row axis
  double vx = 0.0;
  double vy = 0.0;
  friend bool operator==(const Agent&, const Agent&) = default;
};

struct SimState {
  std::vector<Agent> agents;
  int frame_index = 0;
  std::uint64_t next_id = 0;
  friend bool operator==(const SimState&, const SimState&) = default;
};

/// Grayscale observation in [0, 1], row-major.
struct ObservationFrame {
  int width = 0;
  int height = 0;
  std::vector<double> pixels;

  [[nodiscard]] double at(int y, int x) const {
    return pixels[static_cast<std::size_t>(y) * width + x];
  }
  friend bool operator==(const ObservationFrame&, const ObservationFrame&) = default;
};

inline int agent_cell(const Agent& a, const GridShape& s) {
  const int c = static_cast<int>(std::floor(a.x));
  const int r = static_cast<int>(std::floor(a.y));
  if (!s.contains(r, c))
    throw AssumptionViolated("agent " + std::to_string(a.id) + " at (" + std::to_string(a.x) +
                             ", " + std::to_string(a.y) + ") is outside grid " + s.str());
  return s.index(r, c);
}

namespace detail {

inline void clamp_speed(Agent& a, double vmax) {
  const double s = std::hypot(a.vx, a.vy);
  if (s > vmax) {
    const double k = vmax / s;
    a.vx *= k;
    a.vy *= k;
  }
}

// Keeps a coordinate strictly inside [0, n).
inline double inside(double v, int n) {
  const double hi = std::nextafter(static_cast<double>(n), 0.0);
  return std::clamp(v, 0.0, hi);
}

inline int lane_count(const GridShape& s) { return std::max(1, s.rows / 4); }

inline void swirl_velocity(Agent& a, const SimConfig& cfg) {
  const double cx = cfg.shape.cols / 2.0;
  const double cy = cfg.shape.rows / 2.0;
  const double rx = a.x - cx;
  const double ry = a.y - cy;
  const double r = std::hypot(rx, ry);
  if (r < 1e-9) {
    a.vx = a.vy = 0.0;
    return;
  }
  // Counter-clockwise on screen (y grows downwards). The inward term cancels
  // the outward drift of a discrete rotation step.
  const double s = 0.8 * cfg.speed_max * std::min(1.0, r);
  const double tx = ry / r;
  const double ty = -rx / r;
  const double inward = s * s / (2.0 * r);
  a.vx = s * tx - inward * rx / r;
  a.vy = s * ty - inward * ry / r;
}

inline void steer(Agent& a, const SimConfig& cfg, Rng& rng) {
  switch (cfg.motion_model) {
    case MotionModel::lanes: {
      const int n = lane_count(cfg.shape);
      const double lane_h = static_cast<double>(cfg.shape.rows) / n;
      const int lane = std::min(n - 1, static_cast<int>(std::floor(a.y / lane_h)));
      const double centre = (lane + 0.5) * lane_h;
      a.vy = 0.2 * (centre - a.y) + cfg.steer_noise * rng.normal();
      break;
    }
    case MotionModel::swirl:
      swirl_velocity(a, cfg);
      a.vx += cfg.steer_noise * rng.normal();
      a.vy += cfg.steer_noise * rng.normal();
      break;
    case MotionModel::random_walk:
      a.vx += (cfg.steer_noise + 0.15 * cfg.speed_max) * rng.normal();
      a.vy += (cfg.steer_noise + 0.15 * cfg.speed_max) * rng.normal();
      break;
  }
  clamp_speed(a, cfg.speed_max);
}

// Velocity of a newcomer entering boundary cell (r, c): the velocity
// component that would carry it straight back out is flipped.
inline void inward(Agent& a, int r, int c, const GridShape& s) {
  if (c == 0 && a.vx < 0) a.vx = -a.vx;
  if (c == s.cols - 1 && a.vx > 0) a.vx = -a.vx;
  if (r == 0 && a.vy < 0) a.vy = -a.vy;
  if (r == s.rows - 1 && a.vy > 0) a.vy = -a.vy;
}

inline Agent spawn_in_cell(std::uint64_t id, int cell, const Agent& leaving, const SimConfig& cfg,
                           Rng& rng) {
  const GridShape& s = cfg.shape;
  const int r = cell / s.cols;
  const int c = cell % s.cols;
  Agent a;
  a.id = id;
  a.x = c + 0.001 + 0.998 * rng.uniform();
  a.y = r + 0.001 + 0.998 * rng.uniform();
  switch (cfg.motion_model) {
    case MotionModel::lanes:
      a.vx = -leaving.vx;
      a.vy = 0.0;
      break;
    case MotionModel::swirl:
      swirl_velocity(a, cfg);
      break;
    case MotionModel::random_walk: {
      const double ang = rng.uniform(0.0, 2.0 * std::numbers::pi);
      const double sp = cfg.speed_max * rng.uniform(0.3, 1.0);
      a.vx = sp * std::cos(ang);
      a.vy = sp * std::sin(ang);
      break;
    }
  }
  inward(a, r, c, s);
  clamp_speed(a, cfg.speed_max);
  return a;
}

}  // namespace detail

/// Seeded initial crowd. Lanes: horizontal bands four rows high walking in
/// alternating directions, each band's agents bunched into one platoon.
inline SimState initial_state(const SimConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed, "sim/init");
  const GridShape& s = cfg.shape;
  SimState st;
  st.agents.reserve(static_cast<std::size_t>(cfg.n_agents));
  const int lanes = detail::lane_count(s);
  const double lane_h = static_cast<double>(s.rows) / lanes;
  std::vector<double> lane_x(static_cast<std::size_t>(lanes));
  std::vector<double> lane_speed(static_cast<std::size_t>(lanes));
  for (int l = 0; l < lanes; ++l) {
    lane_x[static_cast<std::size_t>(l)] = rng.uniform(0.0, s.cols);
    lane_speed[static_cast<std::size_t>(l)] = cfg.speed_max * rng.uniform(0.5, 0.95);
  }
  for (int i = 0; i < cfg.n_agents; ++i) {
    Agent a;
    a.id = st.next_id++;
    switch (cfg.motion_model) {
      case MotionModel::lanes: {
        const int l = i % lanes;
        double x = rng.normal(lane_x[static_cast<std::size_t>(l)], cfg.platoon_spread);
        if (x < 0) x = -x;
        if (x >= s.cols) x = 2.0 * s.cols - x;
        a.x = detail::inside(x, s.cols);
        a.y = detail::inside(l * lane_h + rng.uniform(0.05, 0.95) * lane_h, s.rows);
        const double dir = (l % 2 == 0) ? 1.0 : -1.0;
        a.vx = dir * lane_speed[static_cast<std::size_t>(l)] * (1.0 + 0.03 * rng.normal());
        a.vy = 0.0;
        break;
      }
      case MotionModel::swirl: {
        const double rmax = 0.45 * std::min(s.rows, s.cols);
        const double rad = rmax * std::sqrt(rng.uniform(0.05, 1.0));
        const double ang = rng.uniform(0.0, 2.0 * std::numbers::pi);
        a.x = detail::inside(s.cols / 2.0 + rad * std::cos(ang), s.cols);
        a.y = detail::inside(s.rows / 2.0 + rad * std::sin(ang), s.rows);
        detail::swirl_velocity(a, cfg);
        break;
      }
      case MotionModel::random_walk: {
        a.x = detail::inside(rng.uniform(0.0, s.cols), s.cols);
        a.y = detail::inside(rng.uniform(0.0, s.rows), s.rows);
        const double ang = rng.uniform(0.0, 2.0 * std::numbers::pi);
        const double sp = cfg.speed_max * rng.uniform(0.0, 1.0);
        a.vx = sp * std::cos(ang);
        a.vy = sp * std::sin(ang);
        break;
      }
    }
    detail::clamp_speed(a, cfg.speed_max);
    st.agents.push_back(a);
  }
  return st;
}

/// Advances the crowd one frame: every agent moves by its velocity, boundary
/// exchanges happen, then velocities are steered for the next step. Pure in
/// (state, config): the randomness of step k derives from (seed, k).
inline SimState step(const SimState& state, const SimConfig& cfg) {
  cfg.validate();
  const GridShape& s = cfg.shape;
  Rng rng(split_seed(split_seed(cfg.seed, "sim/step"), static_cast<std::uint64_t>(state.frame_index)));
  SimState next;
  next.frame_index = state.frame_index + 1;
  next.next_id = state.next_id;
  next.agents.reserve(state.agents.size());

  std::vector<std::uint8_t> turnover(state.agents.size(), 0);
  if (cfg.entry_rate > 0.0) {
    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < state.agents.size(); ++i) {
      const int cell = agent_cell(state.agents[i], s);
      if (s.is_boundary(cell / s.cols, cell % s.cols)) candidates.push_back(i);
    }
    const int k = std::min<int>(rng.poisson(cfg.entry_rate), static_cast<int>(candidates.size()));
    rng.shuffle(candidates.begin(), candidates.end());
    for (int i = 0; i < k; ++i) turnover[candidates[static_cast<std::size_t>(i)]] = 1;
  }

  for (std::size_t i = 0; i < state.agents.size(); ++i) {
    const Agent& a = state.agents[i];
    const int cell = agent_cell(a, s);
    if (turnover[i]) {
      next.agents.push_back(detail::spawn_in_cell(next.next_id++, cell, a, cfg, rng));
      continue;
    }
    Agent b = a;
    b.x = a.x + a.vx;
    b.y = a.y + a.vy;
    const bool off = b.x < 0.0 || b.y < 0.0 || b.x >= s.cols || b.y >= s.rows;
    if (off && cfg.exit_enabled) {
      next.agents.push_back(detail::spawn_in_cell(next.next_id++, cell, a, cfg, rng));
      continue;
    }
    if (off) {
      if (b.x < 0.0) { b.x = -b.x; b.vx = -b.vx; }
      if (b.x >= s.cols) { b.x = 2.0 * s.cols - b.x; b.vx = -b.vx; }
      if (b.y < 0.0) { b.y = -b.y; b.vy = -b.vy; }
      if (b.y >= s.rows) { b.y = 2.0 * s.rows - b.y; b.vy = -b.vy; }
      b.x = detail::inside(b.x, s.cols);
      b.y = detail::inside(b.y, s.rows);
    }
    detail::steer(b, cfg, rng);
    next.agents.push_back(b);
  }
  return next;
}

/// Exact people flows between two states, matched by agent id. Agents only
/// in prev left through their cell; agents only in next entered theirs; the
/// two must balance cell by cell and are recorded once on OUTSIDE.
inline FlowField ground_truth_flow(const SimState& prev, const SimState& next,
                                   const GridShape& shape) {
  FlowField f(shape, Direction::forward);
  std::unordered_map<std::uint64_t, const Agent*> after;
  after.reserve(next.agents.size());
  for (const Agent& a : next.agents) after.emplace(a.id, &a);
  std::vector<double> values(static_cast<std::size_t>(shape.cells()) * kFlowChannels, 0.0);
  std::vector<int> exits(static_cast<std::size_t>(shape.cells()), 0);
  std::vector<int> entries(static_cast<std::size_t>(shape.cells()), 0);
  std::unordered_map<std::uint64_t, bool> seen;
  for (const Agent& a : prev.agents) {
    const int from = agent_cell(a, shape);
    auto it = after.find(a.id);
    if (it == after.end()) {
      ++exits[static_cast<std::size_t>(from)];
      continue;
    }
    seen[a.id] = true;
    const int to = agent_cell(*it->second, shape);
    const int dr = to / shape.cols - from / shape.cols;
    const int dc = to % shape.cols - from % shape.cols;
    if (std::abs(dr) > 1 || std::abs(dc) > 1)
      throw AssumptionViolated("agent " + std::to_string(a.id) + " moved " + std::to_string(dr) +
                               "," + std::to_string(dc) + " cells in one frame");
    values[static_cast<std::size_t>(from) * kFlowChannels + channel_for_offset(dr, dc)] += 1.0;
  }
  for (const Agent& a : next.agents)
    if (!seen.count(a.id)) ++entries[static_cast<std::size_t>(agent_cell(a, shape))];
  for (int j = 0; j < shape.cells(); ++j) {
    const auto uj = static_cast<std::size_t>(j);
    if (exits[uj] != entries[uj])
      throw AssumptionViolated("cell " + std::to_string(j) + " has " + std::to_string(exits[uj]) +
                               " exits but " + std::to_string(entries[uj]) +
                               " entries; boundary exchanges must balance");
    if (exits[uj] > 0 && !f.allowed(j, kOutside))
      throw AssumptionViolated("agents entered or left through interior cell " + std::to_string(j));
    values[uj * kFlowChannels + kOutside] = exits[uj];
  }
  return FlowField::from_values(shape, std::move(values), Direction::forward);
}

/// Mean pixel displacement of the agents starting in each cell; zero where a
/// cell starts empty. Agents that leave the grid are ignored.
inline OpticalFlowField ground_truth_optical(const SimState& prev, const SimState& next,
                                             const GridShape& shape) {
  OpticalFlowField o(shape);
  std::unordered_map<std::uint64_t, const Agent*> after;
  for (const Agent& a : next.agents) after.emplace(a.id, &a);
  std::vector<int> n(static_cast<std::size_t>(shape.cells()), 0);
  for (const Agent& a : prev.agents) {
    auto it = after.find(a.id);
    if (it == after.end()) continue;
    const auto j = static_cast<std::size_t>(agent_cell(a, shape));
    o.uv[2 * j] += (it->second->x - a.x) * shape.cell_px;
    o.uv[2 * j + 1] += (it->second->y - a.y) * shape.cell_px;
    ++n[j];
  }
  for (std::size_t j = 0; j < n.size(); ++j)
    if (n[j] > 0) {
      o.uv[2 * j] /= n[j];
      o.uv[2 * j + 1] /= n[j];
    }
  return o;
}

/// Renders every agent as a Gaussian blob (pixel sigma = cell_px / 2, cut at
/// 3 sigma) of height blob_peak on black, then clamps to [0, 1].
inline ObservationFrame rasterize(const SimState& state, const SimConfig& cfg) {
  const GridShape& s = cfg.shape;
  ObservationFrame img{s.image_width(), s.image_height(),
                       std::vector<double>(static_cast<std::size_t>(s.image_width()) * s.image_height(), 0.0)};
  const double sigma = s.cell_px / 2.0;
  const double radius = 3.0 * sigma;
  const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
  for (const Agent& a : state.agents) {
    const double px = a.x * s.cell_px;
    const double py = a.y * s.cell_px;
    const int x0 = std::max(0, static_cast<int>(std::floor(px - radius)));
    const int x1 = std::min(img.width - 1, static_cast<int>(std::ceil(px + radius)));
    const int y0 = std::max(0, static_cast<int>(std::floor(py - radius)));
    const int y1 = std::min(img.height - 1, static_cast<int>(std::ceil(py + radius)));
    for (int y = y0; y <= y1; ++y) {
      const double dy = (y + 0.5) - py;
      for (int x = x0; x <= x1; ++x) {
        const double dx = (x + 0.5) - px;
        const double d2 = dx * dx + dy * dy;
        if (d2 <= radius * radius)
          img.pixels[static_cast<std::size_t>(y) * img.width + x] += cfg.blob_peak * std::exp(-d2 * inv2s2);
      }
    }
  }
  for (double& v : img.pixels) v = std::clamp(v, 0.0, 1.0);
  return img;
}

/// Head annotations of a state: agent positions in pixels.
inline AnnotationFrame annotate(const SimState& state, const GridShape& shape) {
  AnnotationFrame f;
  f.time_index = state.frame_index;
  f.heads.reserve(state.agents.size());
  for (const Agent& a : state.agents) f.heads.push_back({a.x * shape.cell_px, a.y * shape.cell_px});
  return f;
}

}  // namespace flowcount
