#pragma once

// Sequence directory layout:
//   sequence.json            grid, frame count, keyframe interval, seed
//   annotations.json         head annotations (see annotation_io.hpp)
//   frames/frame_NNNN.pgm    8-bit observations
//   flows/flow_NNNN.flc      optional ground-truth flows f^{t,t+1}
//   optical/optical_NNNN.flc optional optical flow o^{t,t+1}

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "flowcount/annotation_io.hpp"
#include "flowcount/density.hpp"
#include "flowcount/errors.hpp"
#include "flowcount/flc_io.hpp"
#include "flowcount/grid.hpp"
#include "flowcount/pgm.hpp"
#include "flowcount/sim.hpp"

namespace flowcount {

struct Sequence {
  GridShape shape;
  std::vector<ObservationFrame> frames;
  AnnotationSequence annotations;
  std::vector<FlowField> flows;             // flows[t] = f^{t,t+1}; empty when unknown
  std::vector<OpticalFlowField> optical;    // optical[t] = o^{t,t+1}; empty when unknown
  int keyframe_interval = 1;
  std::uint64_t seed = 0;

  [[nodiscard]] int size() const { return static_cast<int>(frames.size()); }
};

/// Quantises to 8 bits and back, so exported frames reload bit-exactly.
inline ObservationFrame quantize(const ObservationFrame& f) {
  ObservationFrame q = f;
  for (double& v : q.pixels) v = std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
  return q;
}

inline Gray8 to_gray8(const ObservationFrame& f) {
  Gray8 g{f.width, f.height, std::vector<std::uint8_t>(f.pixels.size())};
  for (std::size_t i = 0; i < f.pixels.size(); ++i)
    g.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(f.pixels[i], 0.0, 1.0) * 255.0));
  return g;
}

inline ObservationFrame from_gray8(const Gray8& g) {
  ObservationFrame f{g.width, g.height, std::vector<double>(g.pixels.size())};
  for (std::size_t i = 0; i < g.pixels.size(); ++i) f.pixels[i] = g.pixels[i] / 255.0;
  return f;
}

inline OpticalFlowField round_to_float(OpticalFlowField o) {
  for (double& v : o.uv) v = static_cast<double>(static_cast<float>(v));
  return o;
}

/// Simulated sequence. Every V-th frame is annotated; states are kept so
/// callers can build their own oracles.
struct SimulatedSequence {
  Sequence seq;
  std::vector<SimState> states;
};

inline SimulatedSequence simulate_sequence(const SimConfig& cfg, int keyframe_interval = 1) {
  cfg.validate();
  if (keyframe_interval < 1) throw ConfigError("keyframe interval must be >= 1");
  SimulatedSequence out;
  Sequence& s = out.seq;
  s.shape = cfg.shape;
  s.seed = cfg.seed;
  s.keyframe_interval = keyframe_interval;
  s.annotations.image_w = cfg.shape.image_width();
  s.annotations.image_h = cfg.shape.image_height();
  out.states.reserve(static_cast<std::size_t>(cfg.n_frames));
  out.states.push_back(initial_state(cfg));
  for (int t = 1; t < cfg.n_frames; ++t) out.states.push_back(step(out.states.back(), cfg));
  for (int t = 0; t < cfg.n_frames; ++t) {
    const SimState& st = out.states[static_cast<std::size_t>(t)];
    s.frames.push_back(quantize(rasterize(st, cfg)));
    if (t % keyframe_interval == 0) s.annotations.frames.push_back(annotate(st, cfg.shape));
    if (t + 1 < cfg.n_frames) {
      const SimState& nx = out.states[static_cast<std::size_t>(t) + 1];
      s.flows.push_back(ground_truth_flow(st, nx, cfg.shape));
      s.optical.push_back(round_to_float(ground_truth_optical(st, nx, cfg.shape)));
    }
  }
  return out;
}

inline Sequence generate_sequence(const SimConfig& cfg, int keyframe_interval = 1) {
  return simulate_sequence(cfg, keyframe_interval).seq;
}

/// Density targets of every annotated frame.
inline std::map<int, DensityMap> density_targets(const Sequence& s, const KernelSpec& kernel) {
  std::map<int, DensityMap> out;
  for (const auto& f : s.annotations.frames) out.emplace(f.time_index, render_density(f, kernel, s.shape));
  return out;
}

/// Unsmoothed per-cell head counts of every annotated frame.
inline std::map<int, DensityMap> count_targets(const Sequence& s) {
  std::map<int, DensityMap> out;
  for (const auto& f : s.annotations.frames) out.emplace(f.time_index, count_heads(f, s.shape));
  return out;
}

/// Largest V such that every annotated frame index is a multiple of V and
/// annotations are spaced exactly V apart.
inline int infer_keyframe_interval(const std::vector<int>& annotated) {
  if (annotated.size() < 2) return 1;
  int g = 0;
  for (std::size_t i = 1; i < annotated.size(); ++i) g = std::gcd(g, annotated[i] - annotated[i - 1]);
  return g > 0 ? g : 1;
}

inline std::string frame_name(const char* stem, int t, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%04d.%s", stem, t, ext);
  return buf;
}

inline void export_sequence(const Sequence& s, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "frames");
  nlohmann::json meta = {{"grid", {{"rows", s.shape.rows}, {"cols", s.shape.cols}, {"cell_px", s.shape.cell_px}}},
                         {"n_frames", s.size()},
                         {"keyframe_interval", s.keyframe_interval},
                         {"seed", s.seed}};
  {
    std::ofstream out(dir / "sequence.json", std::ios::trunc);
    if (!out) throw Error("cannot write " + (dir / "sequence.json").string());
    out << meta.dump(1) << '\n';
  }
  write_annotations(dir / "annotations.json", s.annotations);
  for (int t = 0; t < s.size(); ++t)
    write_pgm(dir / "frames" / frame_name("frame", t, "pgm"), to_gray8(s.frames[static_cast<std::size_t>(t)]));
  if (!s.flows.empty()) {
    fs::create_directories(dir / "flows");
    for (std::size_t t = 0; t < s.flows.size(); ++t)
      write_flc(dir / "flows" / frame_name("flow", static_cast<int>(t), "flc"), s.flows[t]);
  }
  if (!s.optical.empty()) {
    fs::create_directories(dir / "optical");
    for (std::size_t t = 0; t < s.optical.size(); ++t)
      write_flc(dir / "optical" / frame_name("optical", static_cast<int>(t), "flc"), s.optical[t]);
  }
}

struct LoadedDataset {
  Sequence seq;
  int inferred_interval = 1;
};

inline LoadedDataset load_dataset(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  const fs::path meta_path = dir / "sequence.json";
  std::ifstream in(meta_path);
  if (!in) throw ParseError("cannot open " + meta_path.string());
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(meta_path.string() + ": JSON parse error at offset " + std::to_string(e.byte));
  }
  LoadedDataset out;
  Sequence& s = out.seq;
  std::optional<int> declared;
  int n = 0;
  try {
    for (auto it = meta.begin(); it != meta.end(); ++it)
      if (it.key() != "grid" && it.key() != "n_frames" && it.key() != "keyframe_interval" && it.key() != "seed")
        throw ParseError(meta_path.string() + ": unknown key '" + it.key() + "'");
    const auto& g = meta.at("grid");
    s.shape = GridShape{g.at("rows").get<int>(), g.at("cols").get<int>(), g.value("cell_px", 8)};
    n = meta.at("n_frames").get<int>();
    if (meta.contains("keyframe_interval")) declared = meta["keyframe_interval"].get<int>();
    s.seed = meta.value("seed", std::uint64_t{0});
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(meta_path.string() + ": " + e.what());
  }
  try {
    s.shape.validate();
  } catch (const Error& e) {
    throw ParseError(meta_path.string() + ": " + e.what());
  }
  if (n < 1) throw ParseError(meta_path.string() + ": n_frames must be >= 1");
  if (declared && *declared < 1) throw ParseError(meta_path.string() + ": keyframe_interval must be >= 1");

  s.annotations = read_annotations(dir / "annotations.json");
  std::vector<int> annotated;
  for (const auto& f : s.annotations.frames) {
    if (f.time_index < 0 || f.time_index >= n)
      throw ParseError((dir / "annotations.json").string() + ": annotated frame " + std::to_string(f.time_index) +
                       " outside 0.." + std::to_string(n - 1));
    try {
      check_frame(f, s.shape);
    } catch (const AnnotationError& e) {
      throw ParseError((dir / "annotations.json").string() + ": " + e.what());
    }
    annotated.push_back(f.time_index);
  }
  std::sort(annotated.begin(), annotated.end());
  out.inferred_interval = infer_keyframe_interval(annotated);
  s.keyframe_interval = declared.value_or(out.inferred_interval);
  for (int t = 0; t < n; t += s.keyframe_interval)
    if (!std::binary_search(annotated.begin(), annotated.end(), t))
      throw ParseError((dir / "annotations.json").string() + ": missing annotation for keyframe " + std::to_string(t) +
                       " (interval " + std::to_string(s.keyframe_interval) + ")");

  for (int t = 0; t < n; ++t) {
    const fs::path p = dir / "frames" / frame_name("frame", t, "pgm");
    const Gray8 g = read_pgm(p);
    if (g.width != s.shape.image_width() || g.height != s.shape.image_height())
      throw ShapeError(p.string() + ": frame is " + std::to_string(g.width) + "x" + std::to_string(g.height) +
                       ", grid " + s.shape.str() + " needs " + std::to_string(s.shape.image_width()) + "x" +
                       std::to_string(s.shape.image_height()));
    s.frames.push_back(from_gray8(g));
  }
  auto load_flc = [&](const std::string& sub, const char* stem, auto convert, auto& sink) {
    if (!fs::exists(dir / sub)) return;
    for (int t = 0; t + 1 < n; ++t) {
      const fs::path p = dir / sub / frame_name(stem, t, "flc");
      const FlcArray a = read_flc(p);
      if (a.rows != s.shape.rows || a.cols != s.shape.cols)
        throw ShapeError(p.string() + ": array is " + std::to_string(a.rows) + "x" + std::to_string(a.cols) +
                         ", grid is " + s.shape.str());
      try {
        sink.push_back(convert(a));
      } catch (const ParseError&) {
        throw;
      } catch (const Error& e) {
        throw ParseError(p.string() + ": " + e.what());
      }
    }
  };
  load_flc("flows", "flow", [&](const FlcArray& a) { return flow_from_flc(a, s.shape.cell_px); }, s.flows);
  load_flc("optical", "optical", [&](const FlcArray& a) { return optical_from_flc(a, s.shape.cell_px); }, s.optical);
  return out;
}

}  // namespace flowcount
