#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "flowcount/errors.hpp"
#include "flowcount/flc_io.hpp"

namespace flowcount::nn {

/// Parameter file: "FCKP", uint32 header length, JSON architecture header,
/// uint64 parameter count, then the parameters as little-endian float64.
struct Checkpoint {
  nlohmann::json header;
  std::vector<double> params;
  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

inline std::string encode_checkpoint(const Checkpoint& c) {
  const std::string h = c.header.dump();
  std::string out = "FCKP";
  detail::put_u32(out, static_cast<std::uint32_t>(h.size()));
  out += h;
  const auto n = static_cast<std::uint64_t>(c.params.size());
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((n >> (8 * i)) & 0xFF));
  for (double v : c.params) {
    std::uint64_t b;
    std::memcpy(&b, &v, sizeof b);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((b >> (8 * i)) & 0xFF));
  }
  return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes, const std::string& name = "<buffer>") {
  auto fail = [&](std::size_t off, const std::string& what) {
    throw ParseError(name + ": offset " + std::to_string(off) + ": " + what);
  };
  if (bytes.size() < 8 || bytes.compare(0, 4, "FCKP") != 0) fail(0, "missing FCKP magic");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::uint32_t hl = detail::get_u32(p + 4);
  std::size_t off = 8;
  if (bytes.size() < off + hl + 8) fail(off, "truncated header");
  Checkpoint c;
  try {
    c.header = nlohmann::json::parse(bytes.substr(off, hl));
  } catch (const nlohmann::json::parse_error& e) {
    fail(off + e.byte, "bad JSON header");
  }
  off += hl;
  std::uint64_t n = 0;
  for (int i = 0; i < 8; ++i) n |= static_cast<std::uint64_t>(p[off + static_cast<std::size_t>(i)]) << (8 * i);
  off += 8;
  if ((bytes.size() - off) / 8 < n || bytes.size() - off != n * 8)
    fail(off, "expected " + std::to_string(n) + " float64 parameters, found " +
                  std::to_string((bytes.size() - off) / 8) + " (" + std::to_string(bytes.size() - off) + " bytes)");
  c.params.resize(static_cast<std::size_t>(n));
  for (std::size_t k = 0; k < c.params.size(); ++k) {
    std::uint64_t b = 0;
    for (int i = 0; i < 8; ++i) b |= static_cast<std::uint64_t>(p[off + 8 * k + static_cast<std::size_t>(i)]) << (8 * i);
    std::memcpy(&c.params[k], &b, sizeof b);
  }
  return c;
}

inline void write_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  detail::write_file_bytes(path, encode_checkpoint(c));
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(detail::read_file_bytes(path), path.string());
}

template <class T>
std::vector<double> to_double(std::span<const T> p) {
  return std::vector<double>(p.begin(), p.end());
}

template <class T>
std::vector<T> from_double(std::span<const double> p) {
  std::vector<T> out(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) out[i] = static_cast<T>(p[i]);
  return out;
}

}  // namespace flowcount::nn
