#pragma once

// Annotation documents, one per sequence:
//   {"frames": [{"t": 0, "heads": [[x, y], ...]}, ...],
//    "homography": [9 reals, row-major] (optional),
//    "fps": 30, "image_w": 128, "image_h": 128}

#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "flowcount/density.hpp"
#include "flowcount/errors.hpp"

namespace flowcount {

struct AnnotationSequence {
  std::vector<AnnotationFrame> frames;
  std::optional<Homography> homography;
  double fps = 30.0;
  int image_w = 0;
  int image_h = 0;

  [[nodiscard]] const AnnotationFrame* find(int t) const {
    for (const auto& f : frames)
      if (f.time_index == t) return &f;
    return nullptr;
  }
};

inline nlohmann::json annotations_to_json(const AnnotationSequence& seq) {
  nlohmann::json frames = nlohmann::json::array();
  for (const auto& f : seq.frames) {
    nlohmann::json heads = nlohmann::json::array();
    for (const auto& p : f.heads) heads.push_back({p.x, p.y});
    frames.push_back({{"t", f.time_index}, {"heads", std::move(heads)}});
  }
  nlohmann::json doc = {{"frames", std::move(frames)},
                        {"fps", seq.fps},
                        {"image_w", seq.image_w},
                        {"image_h", seq.image_h}};
  if (seq.homography) doc["homography"] = seq.homography->matrix();
  return doc;
}

inline AnnotationSequence annotations_from_json(const nlohmann::json& doc,
                                                const std::string& name = "<json>") {
  auto fail = [&](const std::string& what) { throw ParseError(name + ": " + what); };
  if (!doc.is_object()) fail("annotation document must be an object");
  for (auto it = doc.begin(); it != doc.end(); ++it) {
    const std::string& k = it.key();
    if (k != "frames" && k != "homography" && k != "fps" && k != "image_w" && k != "image_h")
      fail("unknown key '" + k + "'");
  }
  AnnotationSequence seq;
  try {
    if (!doc.contains("frames") || !doc["frames"].is_array()) fail("missing 'frames' array");
    seq.fps = doc.value("fps", 30.0);
    seq.image_w = doc.value("image_w", 0);
    seq.image_h = doc.value("image_h", 0);
    for (std::size_t i = 0; i < doc["frames"].size(); ++i) {
      const auto& jf = doc["frames"][i];
      if (!jf.is_object() || !jf.contains("t") || !jf.contains("heads"))
        fail("frame " + std::to_string(i) + " needs 't' and 'heads'");
      AnnotationFrame f;
      f.time_index = jf["t"].get<int>();
      for (const auto& h : jf["heads"]) {
        if (!h.is_array() || h.size() != 2) fail("head of frame " + std::to_string(i) + " is not [x, y]");
        f.heads.push_back({h[0].get<double>(), h[1].get<double>()});
      }
      seq.frames.push_back(std::move(f));
    }
    if (doc.contains("homography") && !doc["homography"].is_null()) {
      const auto& jh = doc["homography"];
      if (!jh.is_array() || jh.size() != 9) fail("homography must hold 9 numbers");
      std::array<double, 9> h{};
      for (std::size_t i = 0; i < 9; ++i) h[i] = jh[i].get<double>();
      seq.homography = Homography(h);
    }
  } catch (const nlohmann::json::exception& e) {
    fail(std::string("malformed annotation: ") + e.what());
  } catch (const ValueError& e) {
    fail(e.what());
  }
  return seq;
}

inline AnnotationSequence read_annotations(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path.string() + ": JSON parse error at offset " + std::to_string(e.byte) +
                     ": " + e.what());
  }
  return annotations_from_json(doc, path.string());
}

inline void write_annotations(const std::filesystem::path& path, const AnnotationSequence& seq) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << annotations_to_json(seq).dump(1) << '\n';
}

}  // namespace flowcount
