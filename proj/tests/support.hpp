#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "flowcount/flowcount.hpp"

namespace fc_test {

using namespace flowcount;

/// Random valid flow field: every allowed channel uniform in [0, scale).
inline FlowField random_flow(const GridShape& s, Rng& rng, double scale = 1.0,
                             Direction d = Direction::forward) {
  FlowField f(s, d);
  for (int j = 0; j < s.cells(); ++j)
    for (int ch = 0; ch < kFlowChannels; ++ch)
      if (f.allowed(j, ch)) f.set(j, ch, rng.uniform(0.0, scale));
  return f;
}

inline DensityMap random_density(const GridShape& s, Rng& rng, double scale = 1.0) {
  std::vector<double> v(static_cast<std::size_t>(s.cells()));
  for (double& x : v) x = rng.uniform(0.0, scale);
  return DensityMap::from_values(s, std::move(v));
}

inline ObservationFrame random_frame(const GridShape& s, Rng& rng) {
  ObservationFrame f;
  f.width = s.image_width();
  f.height = s.image_height();
  f.pixels.resize(static_cast<std::size_t>(f.width) * f.height);
  for (double& p : f.pixels) p = rng.uniform();
  return f;
}

/// Quarter turn clockwise of a square grid: (r, c) -> (c, n-1-r).
inline int rot_cell(int j, const GridShape& s) {
  const int r = j / s.cols;
  const int c = j % s.cols;
  return s.index(c, s.rows - 1 - r);
}

inline int rot_channel(int ch) {
  if (ch == kOutside) return ch;
  return channel_for_offset(channel_dc(ch), -channel_dr(ch));
}

inline FlowField rotate(const FlowField& f) {
  const GridShape& s = f.shape();
  std::vector<double> v(f.values().size(), 0.0);
  for (int j = 0; j < s.cells(); ++j)
    for (int ch = 0; ch < kFlowChannels; ++ch)
      v[static_cast<std::size_t>(rot_cell(j, s)) * kFlowChannels + rot_channel(ch)] = f.at(j, ch);
  return FlowField::from_values(s, std::move(v), f.direction());
}

inline DensityMap rotate(const DensityMap& m) {
  const GridShape& s = m.shape();
  std::vector<double> v(m.values().size(), 0.0);
  for (int j = 0; j < s.cells(); ++j) v[static_cast<std::size_t>(rot_cell(j, s))] = m.at(j);
  return DensityMap::from_values(s, std::move(v));
}

struct GradCheck {
  double max_rel = 0.0;
  int checked = 0;
  int skipped = 0;  // coordinates whose step crosses a ReLU kink
};

inline double rel_error(double a, double n) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-6});
}

/// Central differences of f at x against the analytic gradient. With
/// skip_kinks, coordinates where the two one-sided slopes disagree (the step
/// crosses a non-differentiable point) are skipped and counted.
inline GradCheck check_gradient(const std::function<double(std::span<const double>)>& f,
                                std::vector<double> x, std::span<const double> analytic, double h = 1e-4,
                                bool skip_kinks = false, std::span<const std::size_t> coords = {}) {
  GradCheck r;
  const double f0 = skip_kinks ? f(x) : 0.0;
  auto one = [&](std::size_t i) {
    const double xi = x[i];
    x[i] = xi + h;
    const double fp = f(x);
    x[i] = xi - h;
    const double fm = f(x);
    x[i] = xi;
    if (skip_kinks) {
      const double d1 = (fp - f0) / h;
      const double d2 = (f0 - fm) / h;
      if (std::abs(d1 - d2) > 1e-2 * (std::abs(d1) + std::abs(d2)) + 1e-6) {
        ++r.skipped;
        return;
      }
    }
    const double num = (fp - fm) / (2.0 * h);
    r.max_rel = std::max(r.max_rel, rel_error(analytic[i], num));
    ++r.checked;
  };
  if (coords.empty())
    for (std::size_t i = 0; i < x.size(); ++i) one(i);
  else
    for (std::size_t i : coords) one(i);
  return r;
}

/// Central differences that skip a coordinate when the step changes the
/// on/off pattern of any rectifier, so only smooth pieces are compared.
inline GradCheck check_gradient_piecewise(const std::function<double(std::span<const double>)>& f,
                                          const std::function<std::vector<bool>(std::span<const double>)>& pattern,
                                          std::vector<double> x, std::span<const double> analytic,
                                          std::span<const std::size_t> coords, double h = 1e-4) {
  GradCheck r;
  const std::vector<bool> p0 = pattern(x);
  for (std::size_t i : coords) {
    const double xi = x[i];
    x[i] = xi + h;
    const double fp = f(x);
    const bool same_p = pattern(x) == p0;
    x[i] = xi - h;
    const double fm = f(x);
    const bool same_m = pattern(x) == p0;
    x[i] = xi;
    if (!same_p || !same_m) {
      ++r.skipped;
      continue;
    }
    r.max_rel = std::max(r.max_rel, rel_error(analytic[i], (fp - fm) / (2.0 * h)));
    ++r.checked;
  }
  return r;
}

/// Rectifier pattern of a flow regressor pass: every hidden unit and every
/// rectified output.
template <class T>
std::vector<bool> flow_pattern(const nn::FlowRegressor<T>& model, std::span<const T> params,
                               const ObservationFrame& a, const ObservationFrame& b, const GridShape& s) {
  const auto ta = model.encode(params, model.image(a, s));
  const auto tb = model.encode(params, model.image(b, s));
  const auto pass = model.decode(params, ta, tb, s);
  std::vector<bool> bits;
  for (const auto* tape : {&ta, &tb, &pass.dec})
    for (const auto& layer : tape->layers)
      for (T v : layer.out.data) bits.push_back(v > T(0));
  return bits;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("flowcount_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace fc_test
