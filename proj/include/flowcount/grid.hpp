#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "flowcount/errors.hpp"

namespace flowcount {

/// Regular grid of square cells laid over an image. Cell (r, c) covers pixels
/// [c*cell_px, (c+1)*cell_px) x [r*cell_px, (r+1)*cell_px).
struct GridShape {
  int rows = 1;
  int cols = 1;
  int cell_px = 8;

  void validate() const {
    if (rows < 1 || cols < 1 || cell_px < 1)
      throw ShapeError("grid shape needs rows, cols, cell_px >= 1, got " + str());
  }

  [[nodiscard]] int cells() const { return rows * cols; }
  [[nodiscard]] int index(int r, int c) const { return r * cols + c; }
  [[nodiscard]] bool contains(int r, int c) const {
    return r >= 0 && r < rows && c >= 0 && c < cols;
  }
  [[nodiscard]] bool is_boundary(int r, int c) const {
    return r == 0 || c == 0 || r == rows - 1 || c == cols - 1;
  }
  [[nodiscard]] int image_height() const { return rows * cell_px; }
  [[nodiscard]] int image_width() const { return cols * cell_px; }
  [[nodiscard]] std::string str() const {
    return std::to_string(rows) + "x" + std::to_string(cols) + "@" + std::to_string(cell_px);
  }

  /// Same cell layout; cell_px is ignored because flows and densities are
  /// defined per cell.
  [[nodiscard]] bool same_cells(const GridShape& o) const {
    return rows == o.rows && cols == o.cols;
  }
  friend bool operator==(const GridShape&, const GridShape&) = default;
};

// Flow channels. The nine directional channels are the 3x3 neighbourhood in
// row-major order; SELF is the fifth. OUTSIDE carries exchanges with the
// world beyond the grid.
enum class Channel : int { NW = 0, N, NE, W, SELF, E, SW, S, SE, OUTSIDE };

inline constexpr int kFlowChannels = 10;
inline constexpr int kDirections = 9;
inline constexpr int kSelf = static_cast<int>(Channel::SELF);
inline constexpr int kOutside = static_cast<int>(Channel::OUTSIDE);

constexpr int channel_dr(int ch) { return ch / 3 - 1; }
constexpr int channel_dc(int ch) { return ch % 3 - 1; }
constexpr int channel_for_offset(int dr, int dc) { return (dr + 1) * 3 + (dc + 1); }
/// Channel pointing the other way; reversing an offset mirrors the index.
constexpr int opposite_channel(int ch) { return kDirections - 1 - ch; }

enum class Direction { forward, backward };

constexpr Direction toggled(Direction d) {
  return d == Direction::forward ? Direction::backward : Direction::forward;
}

struct CellRect {
  int row0 = 0;
  int col0 = 0;
  int rows = 0;
  int cols = 0;

  [[nodiscard]] int cells() const { return rows * cols; }
  [[nodiscard]] bool contains(int r, int c) const {
    return r >= row0 && r < row0 + rows && c >= col0 && c < col0 + cols;
  }
  [[nodiscard]] bool within(const GridShape& s) const {
    return rows >= 1 && cols >= 1 && row0 >= 0 && col0 >= 0 && row0 + rows <= s.rows &&
           col0 + cols <= s.cols;
  }
  [[nodiscard]] bool overlaps(const CellRect& o) const {
    return row0 < o.row0 + o.rows && o.row0 < row0 + rows && col0 < o.col0 + o.cols &&
           o.col0 < col0 + cols;
  }
  [[nodiscard]] std::string str() const {
    return "[" + std::to_string(row0) + "," + std::to_string(col0) + " " +
           std::to_string(rows) + "x" + std::to_string(cols) + "]";
  }
  friend bool operator==(const CellRect&, const CellRect&) = default;
};

/// Cells allowed to carry OUTSIDE flow: the grid boundary.
inline std::vector<std::uint8_t> boundary_mask(const GridShape& shape) {
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(shape.cells()), 0);
  for (int r = 0; r < shape.rows; ++r)
    for (int c = 0; c < shape.cols; ++c)
      if (shape.is_boundary(r, c)) mask[static_cast<std::size_t>(shape.index(r, c))] = 1;
  return mask;
}

/// People flows for one frame pair, stored at the source cell: cell i holds
/// the ten flows f_{i,.}. Values are non-negative, directional channels that
/// leave the grid are zero, and OUTSIDE is zero except on cells of the
/// outside mask (the grid boundary unless a custom mask is supplied).
class FlowField {
 public:
  FlowField() : FlowField(GridShape{}) {}

  explicit FlowField(GridShape shape, Direction direction = Direction::forward,
                     std::vector<std::uint8_t> outside_mask = {})
      : shape_(shape), direction_(direction), outside_mask_(std::move(outside_mask)) {
    shape_.validate();
    if (outside_mask_.empty()) outside_mask_ = boundary_mask(shape_);
    if (outside_mask_.size() != static_cast<std::size_t>(shape_.cells()))
      throw ShapeError("outside mask size does not match grid " + shape_.str());
    values_.assign(static_cast<std::size_t>(shape_.cells()) * kFlowChannels, 0.0);
  }

  /// Builds a field from a flat (row, col, channel) array, checking every
  /// invariant.
  static FlowField from_values(GridShape shape, std::vector<double> values,
                               Direction direction = Direction::forward,
                               std::vector<std::uint8_t> outside_mask = {}) {
    FlowField f(shape, direction, std::move(outside_mask));
    if (values.size() != f.values_.size())
      throw ShapeError("flow array has " + std::to_string(values.size()) + " values, grid " +
                       shape.str() + " needs " + std::to_string(f.values_.size()));
    for (int j = 0; j < shape.cells(); ++j)
      for (int ch = 0; ch < kFlowChannels; ++ch)
        f.check(j, ch, values[static_cast<std::size_t>(j) * kFlowChannels + ch]);
    f.values_ = std::move(values);
    return f;
  }

  /// Like from_values but silently zeroes channels the grid does not allow
  /// and negative entries. For model outputs that are already rectified.
  static FlowField masked(GridShape shape, std::vector<double> values,
                          Direction direction = Direction::forward,
                          std::vector<std::uint8_t> outside_mask = {}) {
    FlowField f(shape, direction, std::move(outside_mask));
    if (values.size() != f.values_.size()) throw ShapeError("flow array size mismatch");
    for (int j = 0; j < shape.cells(); ++j)
      for (int ch = 0; ch < kFlowChannels; ++ch) {
        double& v = values[static_cast<std::size_t>(j) * kFlowChannels + ch];
        if (!f.allowed(j, ch) || !(v > 0.0)) v = 0.0;
      }
    f.values_ = std::move(values);
    return f;
  }

  [[nodiscard]] const GridShape& shape() const { return shape_; }
  [[nodiscard]] Direction direction() const { return direction_; }
  [[nodiscard]] std::span<const double> values() const { return values_; }
  [[nodiscard]] const std::vector<std::uint8_t>& outside_mask() const { return outside_mask_; }

  [[nodiscard]] double at(int cell, int ch) const {
    return values_[static_cast<std::size_t>(cell) * kFlowChannels + ch];
  }
  [[nodiscard]] double at(int r, int c, Channel ch) const {
    return at(shape_.index(r, c), static_cast<int>(ch));
  }

  /// Whether channel ch of cell may be non-zero.
  [[nodiscard]] bool allowed(int cell, int ch) const {
    if (ch == kOutside) return outside_mask_[static_cast<std::size_t>(cell)] != 0;
    const int r = cell / shape_.cols + channel_dr(ch);
    const int c = cell % shape_.cols + channel_dc(ch);
    return shape_.contains(r, c);
  }

  void set(int cell, int ch, double v) {
    if (cell < 0 || cell >= shape_.cells() || ch < 0 || ch >= kFlowChannels)
      throw IndexError("flow index out of range");
    check(cell, ch, v);
    values_[static_cast<std::size_t>(cell) * kFlowChannels + ch] = v;
  }
  void set(int r, int c, Channel ch, double v) { set(shape_.index(r, c), static_cast<int>(ch), v); }
  void add(int cell, int ch, double v) { set(cell, ch, at(cell, ch) + v); }

  [[nodiscard]] double total() const {
    double s = 0.0;
    for (double v : values_) s += v;
    return s;
  }

  friend bool operator==(const FlowField& a, const FlowField& b) {
    return a.shape_.same_cells(b.shape_) && a.direction_ == b.direction_ &&
           a.outside_mask_ == b.outside_mask_ && a.values_ == b.values_;
  }

 private:
  void check(int cell, int ch, double v) const {
    if (!std::isfinite(v) || v < 0.0)
      throw ValueError("flow values must be finite and non-negative, got " + std::to_string(v));
    if (v != 0.0 && !allowed(cell, ch))
      throw ValueError("channel " + std::to_string(ch) + " of cell " + std::to_string(cell) +
                       " leaves the grid and must be zero");
  }

  GridShape shape_;
  Direction direction_ = Direction::forward;
  std::vector<std::uint8_t> outside_mask_;
  std::vector<double> values_;
};

/// People count per cell.
class DensityMap {
 public:
  DensityMap() : DensityMap(GridShape{}) {}
  explicit DensityMap(GridShape shape) : shape_(shape) {
    shape_.validate();
    values_.assign(static_cast<std::size_t>(shape_.cells()), 0.0);
  }

  static DensityMap from_values(GridShape shape, std::vector<double> values) {
    DensityMap m(shape);
    if (values.size() != m.values_.size())
      throw ShapeError("density array has " + std::to_string(values.size()) +
                       " values, grid " + shape.str() + " needs " +
                       std::to_string(m.values_.size()));
    for (double v : values)
      if (!std::isfinite(v) || v < 0.0)
        throw ValueError("density values must be finite and non-negative");
    m.values_ = std::move(values);
    return m;
  }

  [[nodiscard]] const GridShape& shape() const { return shape_; }
  [[nodiscard]] std::span<const double> values() const { return values_; }
  [[nodiscard]] double at(int cell) const { return values_[static_cast<std::size_t>(cell)]; }
  [[nodiscard]] double at(int r, int c) const { return at(shape_.index(r, c)); }

  void set(int cell, double v) {
    if (cell < 0 || cell >= shape_.cells()) throw IndexError("density index out of range");
    if (!std::isfinite(v) || v < 0.0) throw ValueError("density must be finite, >= 0");
    values_[static_cast<std::size_t>(cell)] = v;
  }

  [[nodiscard]] double total() const {
    double s = 0.0;
    for (double v : values_) s += v;
    return s;
  }

  /// Sum over cells whose mask entry is set; an empty mask selects all cells.
  [[nodiscard]] double total(std::span<const std::uint8_t> roi) const {
    if (roi.empty()) return total();
    if (roi.size() != values_.size()) throw ShapeError("ROI mask does not match density grid");
    double s = 0.0;
    for (std::size_t j = 0; j < values_.size(); ++j)
      if (roi[j]) s += values_[j];
    return s;
  }

  [[nodiscard]] double total(const CellRect& rect) const {
    if (!rect.within(shape_)) throw RegionError("rect " + rect.str() + " outside grid");
    double s = 0.0;
    for (int r = rect.row0; r < rect.row0 + rect.rows; ++r)
      for (int c = rect.col0; c < rect.col0 + rect.cols; ++c) s += at(r, c);
    return s;
  }

  friend bool operator==(const DensityMap& a, const DensityMap& b) {
    return a.shape_.same_cells(b.shape_) && a.values_ == b.values_;
  }

 private:
  GridShape shape_;
  std::vector<double> values_;
};

/// Per-cell optical flow in pixels per frame, stored (u, v) per cell.
struct OpticalFlowField {
  GridShape shape;
  std::vector<double> uv;

  OpticalFlowField() : OpticalFlowField(GridShape{}) {}
  explicit OpticalFlowField(GridShape s)
      : shape(s), uv(static_cast<std::size_t>(s.cells()) * 2, 0.0) {
    shape.validate();
  }

  [[nodiscard]] double u(int cell) const { return uv[static_cast<std::size_t>(cell) * 2]; }
  [[nodiscard]] double v(int cell) const { return uv[static_cast<std::size_t>(cell) * 2 + 1]; }

  friend bool operator==(const OpticalFlowField& a, const OpticalFlowField& b) {
    return a.shape.same_cells(b.shape) && a.uv == b.uv;
  }
};

// ---------------------------------------------------------------------------
// Flow algebra

/// All in-grid cells within Chebyshev distance 1 of j, j included, ascending.
inline std::vector<int> neighbor_cells(int j, const GridShape& shape) {
  if (j < 0 || j >= shape.cells())
    throw IndexError("cell " + std::to_string(j) + " not in grid " + shape.str());
  std::vector<int> out;
  const int r0 = j / shape.cols;
  const int c0 = j % shape.cols;
  for (int ch = 0; ch < kDirections; ++ch) {
    const int r = r0 + channel_dr(ch);
    const int c = c0 + channel_dc(ch);
    if (shape.contains(r, c)) out.push_back(shape.index(r, c));
  }
  return out;
}

enum class SumMode { incoming, outgoing };

namespace detail {

// Visits the flow entries summed into cell j, in a fixed order: for incoming,
// the neighbour reached by offset(ch) contributes its channel pointing back
// at j; for outgoing, j's own channel ch. OUTSIDE comes last. Both modes use
// the same channel order so reverse_flow identities hold bitwise.
template <class Fn>
void for_each_term(const GridShape& shape, std::span<const std::uint8_t> outside_mask, int j,
                   SumMode mode, Fn&& fn) {
  const int r0 = j / shape.cols;
  const int c0 = j % shape.cols;
  for (int ch = 0; ch < kDirections; ++ch) {
    const int r = r0 + channel_dr(ch);
    const int c = c0 + channel_dc(ch);
    if (!shape.contains(r, c)) continue;
    if (mode == SumMode::incoming)
      fn(shape.index(r, c), opposite_channel(ch));
    else
      fn(j, ch);
  }
  if (outside_mask[static_cast<std::size_t>(j)]) fn(j, kOutside);
}

}  // namespace detail

/// Per-cell people count implied by a flow field: incoming sums the flows
/// arriving at each cell, outgoing the flows leaving it.
inline DensityMap density_from_flows(const FlowField& f, SumMode mode) {
  const GridShape& shape = f.shape();
  std::vector<double> m(static_cast<std::size_t>(shape.cells()), 0.0);
  for (int j = 0; j < shape.cells(); ++j) {
    double s = 0.0;
    detail::for_each_term(shape, f.outside_mask(), j, mode,
                          [&](int cell, int ch) { s += f.at(cell, ch); });
    m[static_cast<std::size_t>(j)] = s;
  }
  return DensityMap::from_values(shape, std::move(m));
}

/// Adjoint of density_from_flows: the gradient with respect to the flow array
/// given a gradient with respect to the density.
inline std::vector<double> density_adjoint(std::span<const double> grad_density,
                                           const GridShape& shape,
                                           std::span<const std::uint8_t> outside_mask,
                                           SumMode mode) {
  if (grad_density.size() != static_cast<std::size_t>(shape.cells()))
    throw ShapeError("density gradient size mismatch");
  std::vector<double> g(static_cast<std::size_t>(shape.cells()) * kFlowChannels, 0.0);
  for (int j = 0; j < shape.cells(); ++j) {
    const double gj = grad_density[static_cast<std::size_t>(j)];
    if (gj == 0.0) continue;
    detail::for_each_term(shape, outside_mask, j, mode, [&](int cell, int ch) {
      g[static_cast<std::size_t>(cell) * kFlowChannels + ch] += gj;
    });
  }
  return g;
}

/// Flow field of the same motion played backwards in time: the flow i -> j
/// becomes j -> i. OUTSIDE exchanges keep their cell.
inline FlowField reverse_flow(const FlowField& f) {
  const GridShape& shape = f.shape();
  std::vector<double> out(f.values().begin(), f.values().end());
  for (int i = 0; i < shape.cells(); ++i) {
    const int r0 = i / shape.cols;
    const int c0 = i % shape.cols;
    for (int ch = 0; ch < kDirections; ++ch) {
      const int r = r0 + channel_dr(ch);
      const int c = c0 + channel_dc(ch);
      if (!shape.contains(r, c)) continue;
      out[static_cast<std::size_t>(shape.index(r, c)) * kFlowChannels + opposite_channel(ch)] =
          f.at(i, ch);
    }
  }
  return FlowField::from_values(shape, std::move(out), toggled(f.direction()), f.outside_mask());
}

inline DensityMap average_bidirectional(const DensityMap& fwd, const DensityMap& bwd) {
  if (!fwd.shape().same_cells(bwd.shape()))
    throw ShapeError("cannot average density maps of shapes " + fwd.shape().str() + " and " +
                     bwd.shape().str());
  std::vector<double> m(fwd.values().size());
  for (std::size_t j = 0; j < m.size(); ++j) m[j] = 0.5 * (fwd.values()[j] + bwd.values()[j]);
  return DensityMap::from_values(fwd.shape(), std::move(m));
}

/// |incoming(f_in) - outgoing(f_out)| per cell, where f_in covers (t-1, t)
/// and f_out covers (t, t+1).
inline std::vector<double> conservation_violation_map(const FlowField& f_in,
                                                      const FlowField& f_out) {
  if (!f_in.shape().same_cells(f_out.shape()))
    throw ShapeError("flow fields have shapes " + f_in.shape().str() + " and " +
                     f_out.shape().str());
  const DensityMap in = density_from_flows(f_in, SumMode::incoming);
  const DensityMap out = density_from_flows(f_out, SumMode::outgoing);
  std::vector<double> v(in.values().size());
  for (std::size_t j = 0; j < v.size(); ++j) v[j] = std::abs(in.values()[j] - out.values()[j]);
  return v;
}

}  // namespace flowcount
