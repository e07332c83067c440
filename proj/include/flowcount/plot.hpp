#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <sstream>
#include <string>
#include <vector>

#include "flowcount/errors.hpp"
#include "flowcount/pgm.hpp"

namespace flowcount {

struct CurvePoint {
  int iteration = 0;
  double annotation_ratio = 0.0;
  double mae = 0.0;
  double rmse = 0.0;
};

inline constexpr const char* kCurveHeader = "iteration,annotation_ratio,MAE,RMSE";

/// Parses the learning-curve CSV written by train-active.
inline std::vector<CurvePoint> parse_curve_csv(const std::string& text, const std::string& name = "<csv>") {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw ParseError(name + ": empty file, expected header '" + kCurveHeader + "'");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kCurveHeader) throw ParseError(name + ": line 1: expected header '" + std::string(kCurveHeader) + "'");
  std::vector<CurvePoint> out;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
    if (f.size() != 4) throw ParseError(name + ": line " + std::to_string(lineno) + ": expected 4 fields");
    auto num = [&](const std::string& s) {
      char* end = nullptr;
      const double v = std::strtod(s.c_str(), &end);
      if (s.empty() || *end != '\0' || !std::isfinite(v))
        throw ParseError(name + ": line " + std::to_string(lineno) + ": bad number '" + s + "'");
      return v;
    };
    const double it = num(f[0]);
    if (it != std::floor(it)) throw ParseError(name + ": line " + std::to_string(lineno) + ": iteration must be an integer");
    out.push_back({static_cast<int>(it), num(f[1]), num(f[2]), num(f[3])});
  }
  return out;
}

struct PlotStyle {
  int width = 320;
  int height = 240;
  int margin = 24;
  std::uint8_t background = 255;
  std::uint8_t axis_ink = 0;
  std::uint8_t curve_ink = 96;
};

namespace detail {

inline void put(Gray8& g, int x, int y, std::uint8_t v) {
  if (x >= 0 && y >= 0 && x < g.width && y < g.height) g.pixels[static_cast<std::size_t>(y) * g.width + x] = v;
}

inline void line(Gray8& g, int x0, int y0, int x1, int y1, std::uint8_t v) {
  const int dx = std::abs(x1 - x0);
  const int dy = -std::abs(y1 - y0);
  const int sx = x0 < x1 ? 1 : -1;
  const int sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  for (;;) {
    put(g, x0, y0, v);
    if (x0 == x1 && y0 == y1) break;
    const int e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y0 += sy;
    }
  }
}

}  // namespace detail

/// MAE against annotation ratio. The y axis starts at zero; an empty curve
/// gives the axes alone.
inline Gray8 plot_curve(const std::vector<CurvePoint>& pts, const PlotStyle& st = {}) {
  Gray8 g{st.width, st.height,
          std::vector<std::uint8_t>(static_cast<std::size_t>(st.width) * st.height, st.background)};
  const int x0 = st.margin;
  const int x1 = st.width - st.margin;
  const int y0 = st.height - st.margin;  // bottom
  const int y1 = st.margin;              // top
  detail::line(g, x0, y0, x1, y0, st.axis_ink);
  detail::line(g, x0, y0, x0, y1, st.axis_ink);
  if (pts.empty()) return g;
  double xmin = pts.front().annotation_ratio, xmax = xmin, ymax = 0.0;
  for (const auto& p : pts) {
    xmin = std::min(xmin, p.annotation_ratio);
    xmax = std::max(xmax, p.annotation_ratio);
    ymax = std::max(ymax, p.mae);
  }
  if (ymax <= 0.0) ymax = 1.0;
  auto px = [&](double r) {
    if (xmax == xmin) return (x0 + x1) / 2;
    return x0 + 1 + static_cast<int>(std::lround((r - xmin) / (xmax - xmin) * (x1 - x0 - 2)));
  };
  auto py = [&](double m) { return y0 - 1 - static_cast<int>(std::lround(m / ymax * (y0 - y1 - 2))); };
  for (std::size_t i = 0; i + 1 < pts.size(); ++i)
    detail::line(g, px(pts[i].annotation_ratio), py(pts[i].mae), px(pts[i + 1].annotation_ratio), py(pts[i + 1].mae),
                 st.curve_ink);
  if (pts.size() == 1) detail::put(g, px(pts[0].annotation_ratio), py(pts[0].mae), st.curve_ink);
  return g;
}

/// Long-format table: one row per (curve, iteration, metric).
inline std::string tidy_curves(const std::vector<std::pair<std::string, std::vector<CurvePoint>>>& curves) {
  std::ostringstream os;
  os.precision(17);
  os << "curve,iteration,annotation_ratio,metric,value\n";
  for (const auto& [name, pts] : curves)
    for (const auto& p : pts) {
      os << name << ',' << p.iteration << ',' << p.annotation_ratio << ",MAE," << p.mae << '\n';
      os << name << ',' << p.iteration << ',' << p.annotation_ratio << ",RMSE," << p.rmse << '\n';
    }
  return os.str();
}

}  // namespace flowcount
