#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "flowcount/errors.hpp"
#include "flowcount/grid.hpp"

namespace flowcount {

struct Point {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Point&, const Point&) = default;
};

/// Head annotations of one frame, in pixel coordinates.
struct AnnotationFrame {
  int time_index = 0;
  std::vector<Point> heads;
  std::optional<std::vector<std::uint8_t>> roi_mask;

  friend bool operator==(const AnnotationFrame&, const AnnotationFrame&) = default;
};

/// Gaussian kernel. sigma is in cells for image-plane rendering and in ground
/// units (metres) for ground-plane rendering; the kernel is cut to zero beyond
/// truncation_radius * sigma and not renormalised.
struct KernelSpec {
  double sigma = 2.0;
  double truncation_radius = 4.0;

  void validate() const {
    if (!(sigma > 0.0) || !std::isfinite(sigma)) throw ValueError("kernel sigma must be > 0");
    if (!(truncation_radius >= 3.0)) throw ValueError("kernel truncation radius must be >= 3");
  }
};

/// 2D isotropic Gaussian density N(d | 0, sigma^2 I) at squared distance d2.
inline double gaussian2d(double d2, double sigma) {
  const double s2 = sigma * sigma;
  return std::exp(-0.5 * d2 / s2) / (2.0 * std::numbers::pi * s2);
}

/// Mass of a 2D Gaussian lying beyond radius k*sigma.
inline double gaussian_tail_mass(double k) { return std::exp(-0.5 * k * k); }

class Homography {
 public:
  Homography() : h_{1, 0, 0, 0, 1, 0, 0, 0, 1} {}
  explicit Homography(std::array<double, 9> h) : h_(h) {
    for (double v : h_)
      if (!std::isfinite(v)) throw ValueError("homography entries must be finite");
    if (!(std::abs(determinant()) > 1e-12)) throw ValueError("homography is singular");
  }

  static Homography translation(double tx, double ty) {
    return Homography({1, 0, tx, 0, 1, ty, 0, 0, 1});
  }

  [[nodiscard]] const std::array<double, 9>& matrix() const { return h_; }
  [[nodiscard]] double operator()(int r, int c) const { return h_[static_cast<std::size_t>(r * 3 + c)]; }

  [[nodiscard]] double determinant() const {
    const auto& a = h_;
    return a[0] * (a[4] * a[8] - a[5] * a[7]) - a[1] * (a[3] * a[8] - a[5] * a[6]) +
           a[2] * (a[3] * a[7] - a[4] * a[6]);
  }

  [[nodiscard]] Homography inverse() const {
    const auto& a = h_;
    const double det = determinant();
    std::array<double, 9> inv{
        (a[4] * a[8] - a[5] * a[7]) / det, (a[2] * a[7] - a[1] * a[8]) / det,
        (a[1] * a[5] - a[2] * a[4]) / det, (a[5] * a[6] - a[3] * a[8]) / det,
        (a[0] * a[8] - a[2] * a[6]) / det, (a[2] * a[3] - a[0] * a[5]) / det,
        (a[3] * a[7] - a[4] * a[6]) / det, (a[1] * a[6] - a[0] * a[7]) / det,
        (a[0] * a[4] - a[1] * a[3]) / det};
    return Homography(inv);
  }

  /// Projects one point; throws HorizonError when it maps to infinity.
  [[nodiscard]] Point apply(Point p) const {
    const auto& a = h_;
    const double w = a[6] * p.x + a[7] * p.y + a[8];
    if (!(std::abs(w) >= 1e-12)) throw HorizonError("point maps to the horizon");
    return {(a[0] * p.x + a[1] * p.y + a[2]) / w, (a[3] * p.x + a[4] * p.y + a[5]) / w};
  }

 private:
  std::array<double, 9> h_;
};

inline std::vector<Point> map_points(std::span<const Point> points, const Homography& h) {
  std::vector<Point> out;
  out.reserve(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    try {
      out.push_back(h.apply(points[i]));
    } catch (const HorizonError&) {
      throw HorizonError("point " + std::to_string(i) + " (" + std::to_string(points[i].x) +
                         ", " + std::to_string(points[i].y) + ") maps to the horizon");
    }
  }
  return out;
}

/// Sums truncated Gaussians centred on points given in cell units, evaluated
/// at cell centres (c + 0.5, r + 0.5). Both image- and ground-plane rendering
/// go through here, so they agree bitwise when the geometry coincides.
inline DensityMap render_cell_points(std::span<const Point> cell_points, double sigma_cells,
                                     double truncation_radius, const GridShape& shape) {
  std::vector<double> m(static_cast<std::size_t>(shape.cells()), 0.0);
  const double radius = truncation_radius * sigma_cells;
  const double r2max = radius * radius;
  for (const Point& p : cell_points) {
    const int c_lo = std::max(0, static_cast<int>(std::floor(p.x - 0.5 - radius)));
    const int c_hi = std::min(shape.cols - 1, static_cast<int>(std::ceil(p.x - 0.5 + radius)));
    const int r_lo = std::max(0, static_cast<int>(std::floor(p.y - 0.5 - radius)));
    const int r_hi = std::min(shape.rows - 1, static_cast<int>(std::ceil(p.y - 0.5 + radius)));
    for (int r = r_lo; r <= r_hi; ++r) {
      const double dy = (r + 0.5) - p.y;
      for (int c = c_lo; c <= c_hi; ++c) {
        const double dx = (c + 0.5) - p.x;
        const double d2 = dx * dx + dy * dy;
        if (d2 <= r2max) m[static_cast<std::size_t>(shape.index(r, c))] += gaussian2d(d2, sigma_cells);
      }
    }
  }
  return DensityMap::from_values(shape, std::move(m));
}

inline bool inside_image(Point p, const GridShape& shape) {
  return p.x >= 0.0 && p.y >= 0.0 && p.x < shape.image_width() && p.y < shape.image_height();
}

inline void check_frame(const AnnotationFrame& frame, const GridShape& shape) {
  if (frame.roi_mask && frame.roi_mask->size() != static_cast<std::size_t>(shape.cells()))
    throw AnnotationError("ROI mask of frame " + std::to_string(frame.time_index) +
                          " does not match grid " + shape.str());
  for (std::size_t i = 0; i < frame.heads.size(); ++i) {
    const Point& p = frame.heads[i];
    if (!std::isfinite(p.x) || !std::isfinite(p.y) || !inside_image(p, shape))
      throw AnnotationError("head " + std::to_string(i) + " of frame " +
                            std::to_string(frame.time_index) + " at (" + std::to_string(p.x) +
                            ", " + std::to_string(p.y) + ") lies outside the " +
                            std::to_string(shape.image_width()) + "x" +
                            std::to_string(shape.image_height()) + " image");
  }
}

/// Ground-truth density in the image plane: one Gaussian per head, sigma in
/// cells, sampled at cell centres.
inline DensityMap render_density(const AnnotationFrame& frame, const KernelSpec& kernel,
                                 const GridShape& shape) {
  kernel.validate();
  shape.validate();
  check_frame(frame, shape);
  std::vector<Point> cells;
  cells.reserve(frame.heads.size());
  const double px = shape.cell_px;
  for (const Point& p : frame.heads) cells.push_back({p.x / px, p.y / px});
  return render_cell_points(cells, kernel.sigma, kernel.truncation_radius, shape);
}

/// Unsmoothed per-cell head counts (floor binning).
inline DensityMap count_heads(const AnnotationFrame& frame, const GridShape& shape) {
  check_frame(frame, shape);
  std::vector<double> m(static_cast<std::size_t>(shape.cells()), 0.0);
  for (const Point& p : frame.heads) {
    const int c = static_cast<int>(std::floor(p.x / shape.cell_px));
    const int r = static_cast<int>(std::floor(p.y / shape.cell_px));
    m[static_cast<std::size_t>(shape.index(r, c))] += 1.0;
  }
  return DensityMap::from_values(shape, std::move(m));
}

struct GroundDensity {
  DensityMap density;
  int clipped = 0;  // mapped heads that fell outside the ground grid
};

/// Ground-plane density: heads are mapped through h, then rendered on a grid
/// of square cells of side cell_m with one scene-wide sigma (in the same
/// ground units as cell_m).
inline GroundDensity render_ground_density(const AnnotationFrame& frame, const Homography& h,
                                           const KernelSpec& kernel, const GridShape& ground_shape,
                                           double cell_m = 0.30) {
  kernel.validate();
  ground_shape.validate();
  if (!(cell_m > 0.0)) throw ValueError("ground cell size must be > 0");
  const std::vector<Point> mapped = map_points(frame.heads, h);
  GroundDensity out{DensityMap(ground_shape), 0};
  std::vector<Point> cells;
  cells.reserve(mapped.size());
  for (const Point& g : mapped) {
    if (!std::isfinite(g.x) || !std::isfinite(g.y))
      throw HorizonError("mapped head is not finite");
    const Point c{g.x / cell_m, g.y / cell_m};
    if (c.x < 0.0 || c.y < 0.0 || c.x >= ground_shape.cols || c.y >= ground_shape.rows) {
      ++out.clipped;
      continue;
    }
    cells.push_back(c);
  }
  out.density = render_cell_points(cells, kernel.sigma / cell_m, kernel.truncation_radius,
                                   ground_shape);
  return out;
}

/// Bilinear sample of a per-cell optical flow at a pixel position; cell
/// values sit at cell centres and the field is clamped at the border.
inline Point sample_optical(const OpticalFlowField& o, Point p) {
  const GridShape& s = o.shape;
  const double gx = std::clamp(p.x / s.cell_px - 0.5, 0.0, static_cast<double>(s.cols - 1));
  const double gy = std::clamp(p.y / s.cell_px - 0.5, 0.0, static_cast<double>(s.rows - 1));
  const int c0 = static_cast<int>(std::floor(gx));
  const int r0 = static_cast<int>(std::floor(gy));
  const int c1 = std::min(c0 + 1, s.cols - 1);
  const int r1 = std::min(r0 + 1, s.rows - 1);
  const double ax = gx - c0;
  const double ay = gy - r0;
  Point out;
  for (int k = 0; k < 2; ++k) {
    auto at = [&](int r, int c) { return o.uv[static_cast<std::size_t>(s.index(r, c)) * 2 + k]; };
    const double top = (1.0 - ax) * at(r0, c0) + ax * at(r0, c1);
    const double bot = (1.0 - ax) * at(r1, c0) + ax * at(r1, c1);
    (k == 0 ? out.x : out.y) = (1.0 - ay) * top + ay * bot;
  }
  return out;
}

struct WarpResult {
  AnnotationFrame frame;
  int dropped = 0;
};

/// Moves every head along the optical flow (direction +1 forward in time, -1
/// backward); heads leaving the image are dropped and counted.
inline WarpResult warp_heads(const AnnotationFrame& frame, const OpticalFlowField& optical,
                             int direction) {
  if (direction != 1 && direction != -1) throw ValueError("warp direction must be +1 or -1");
  WarpResult out;
  out.frame.time_index = frame.time_index + direction;
  out.frame.roi_mask = frame.roi_mask;
  for (const Point& p : frame.heads) {
    const Point d = sample_optical(optical, p);
    const Point q{p.x + direction * d.x, p.y + direction * d.y};
    if (std::isfinite(q.x) && std::isfinite(q.y) && inside_image(q, optical.shape))
      out.frame.heads.push_back(q);
    else
      ++out.dropped;
  }
  return out;
}

}  // namespace flowcount
