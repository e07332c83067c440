#pragma once

// FLC1 binary maps: a 16-byte header (magic "FLC1", then rows, cols and
// channels as little-endian uint32) followed by rows*cols*channels
// little-endian float32 values in (row, col, channel) order. CSV export
// writes one row per cell.

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "flowcount/errors.hpp"
#include "flowcount/grid.hpp"

namespace flowcount {

struct FlcArray {
  int rows = 0;
  int cols = 0;
  int channels = 0;
  std::vector<float> values;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file_bytes(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("short write to " + path.string());
}

inline std::vector<float> to_f32(std::span<const double> v) {
  std::vector<float> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(v[i]);
  return out;
}

inline std::vector<double> to_f64(const std::vector<float>& v) {
  return {v.begin(), v.end()};
}

}  // namespace detail

inline std::string encode_flc(const FlcArray& a) {
  const std::size_t n = static_cast<std::size_t>(a.rows) * a.cols * a.channels;
  if (a.values.size() != n) throw ShapeError("FLC1 payload size mismatch");
  std::string out = "FLC1";
  detail::put_u32(out, static_cast<std::uint32_t>(a.rows));
  detail::put_u32(out, static_cast<std::uint32_t>(a.cols));
  detail::put_u32(out, static_cast<std::uint32_t>(a.channels));
  out.reserve(16 + 4 * n);
  for (float f : a.values) detail::put_u32(out, std::bit_cast<std::uint32_t>(f));
  return out;
}

inline FlcArray decode_flc(const std::string& bytes, const std::string& name = "<buffer>") {
  if (bytes.size() < 16) throw ParseError(name + ": truncated FLC1 header at offset 0");
  if (bytes.compare(0, 4, "FLC1") != 0) throw ParseError(name + ": bad FLC1 magic at offset 0");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  FlcArray a;
  a.rows = static_cast<int>(detail::get_u32(p + 4));
  a.cols = static_cast<int>(detail::get_u32(p + 8));
  a.channels = static_cast<int>(detail::get_u32(p + 12));
  if (a.rows < 1 || a.cols < 1 || a.channels < 1)
    throw ParseError(name + ": invalid FLC1 dimensions at offset 4");
  const std::size_t n = static_cast<std::size_t>(a.rows) * a.cols * a.channels;
  if (bytes.size() != 16 + 4 * n)
    throw ParseError(name + ": FLC1 payload is " + std::to_string(bytes.size() - 16) +
                     " bytes, expected " + std::to_string(4 * n) + " at offset 16");
  a.values.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    a.values[i] = std::bit_cast<float>(detail::get_u32(p + 16 + 4 * i));
  return a;
}

inline FlcArray to_flc(const FlowField& f) {
  return {f.shape().rows, f.shape().cols, kFlowChannels, detail::to_f32(f.values())};
}
inline FlcArray to_flc(const DensityMap& m) {
  return {m.shape().rows, m.shape().cols, 1, detail::to_f32(m.values())};
}
inline FlcArray to_flc(const OpticalFlowField& o) {
  return {o.shape.rows, o.shape.cols, 2, detail::to_f32(o.uv)};
}

inline FlowField flow_from_flc(const FlcArray& a, int cell_px = 8,
                               Direction dir = Direction::forward) {
  if (a.channels != kFlowChannels) throw ParseError("FLC1 flow needs 10 channels");
  return FlowField::from_values({a.rows, a.cols, cell_px}, detail::to_f64(a.values), dir);
}
inline DensityMap density_from_flc(const FlcArray& a, int cell_px = 8) {
  if (a.channels != 1) throw ParseError("FLC1 density needs 1 channel");
  return DensityMap::from_values({a.rows, a.cols, cell_px}, detail::to_f64(a.values));
}
inline OpticalFlowField optical_from_flc(const FlcArray& a, int cell_px = 8) {
  if (a.channels != 2) throw ParseError("FLC1 optical flow needs 2 channels");
  OpticalFlowField o({a.rows, a.cols, cell_px});
  o.uv = detail::to_f64(a.values);
  return o;
}

template <class Map>
void write_flc(const std::filesystem::path& path, const Map& m) {
  detail::write_file_bytes(path, encode_flc(to_flc(m)));
}

inline FlcArray read_flc(const std::filesystem::path& path) {
  return decode_flc(detail::read_file_bytes(path), path.string());
}

/// One line per cell: row,col,then one column per channel.
inline std::string to_csv(const FlcArray& a, const std::vector<std::string>& channel_names) {
  std::ostringstream os;
  os << "row,col";
  for (int ch = 0; ch < a.channels; ++ch)
    os << ',' << (ch < static_cast<int>(channel_names.size()) ? channel_names[ch]
                                                              : "c" + std::to_string(ch));
  os << '\n';
  os << std::setprecision(9);
  for (int r = 0; r < a.rows; ++r)
    for (int c = 0; c < a.cols; ++c) {
      os << r << ',' << c;
      for (int ch = 0; ch < a.channels; ++ch)
        os << ',' << a.values[(static_cast<std::size_t>(r) * a.cols + c) * a.channels + ch];
      os << '\n';
    }
  return os.str();
}

inline std::string to_csv(const FlowField& f) {
  return to_csv(to_flc(f), {"NW", "N", "NE", "W", "SELF", "E", "SW", "S", "SE", "OUTSIDE"});
}
inline std::string to_csv(const DensityMap& m) { return to_csv(to_flc(m), {"count"}); }
inline std::string to_csv(const OpticalFlowField& o) { return to_csv(to_flc(o), {"u", "v"}); }

}  // namespace flowcount
