#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "flowcount/errors.hpp"
#include "flowcount/grid.hpp"
#include "flowcount/nn/conv.hpp"
#include "flowcount/rng.hpp"
#include "flowcount/sim.hpp"

namespace flowcount::nn {

template <class T>
void glorot_fill(std::span<T> w, int fan_in, int fan_out, Rng& rng) {
  const double a = std::sqrt(6.0 / (fan_in + fan_out));
  for (T& v : w) v = static_cast<T>(rng.uniform(-a, a));
}

template <class T>
void init_stack(const ConvStack& stack, std::span<T> params, Rng& rng) {
  std::size_t off = 0;
  for (const ConvSpec& l : stack.layers) {
    glorot_fill(params.subspan(off, l.weight_count()), l.cin * 9, l.cout * 9, rng);
    for (std::size_t i = 0; i < static_cast<std::size_t>(l.cout); ++i)
      params[off + l.weight_count() + i] = T(0);
    off += l.param_count();
  }
}

inline nlohmann::json stack_json(const ConvStack& s) {
  nlohmann::json a = nlohmann::json::array();
  for (const ConvSpec& l : s.layers)
    a.push_back({{"cin", l.cin}, {"cout", l.cout}, {"stride", l.stride}, {"relu", l.relu}});
  return a;
}

/// Architecture of the flow regressor: a strided encoder run on each frame
/// with shared weights, then a two-layer decoder on the concatenated
/// features that emits 10 flow channels per cell.
struct FlowLayout {
  int cell_px = 8;
  std::vector<int> enc_channels{8, 16, 16};
  int dec_hidden = 16;

  static FlowLayout for_cell_px(int cell_px) {
    FlowLayout l;
    l.cell_px = cell_px;
    l.enc_channels.clear();
    for (int s = 1, w = 8; s < cell_px; s *= 2, w = std::min(16, w * 2)) l.enc_channels.push_back(w);
    return l;
  }

  void validate() const {
    if (cell_px < 2 || (cell_px & (cell_px - 1)) != 0)
      throw ConfigError("cell_px must be a power of two >= 2, got " + std::to_string(cell_px));
    int layers = 0;
    for (int s = 1; s < cell_px; s *= 2) ++layers;
    if (static_cast<int>(enc_channels.size()) != layers)
      throw ConfigError("cell_px " + std::to_string(cell_px) + " needs " + std::to_string(layers) +
                        " stride-2 encoder layers");
    for (int c : enc_channels)
      if (c < 1) throw ConfigError("encoder widths must be positive");
    if (dec_hidden < 1) throw ConfigError("decoder width must be positive");
  }

  [[nodiscard]] ConvStack encoder() const {
    ConvStack s;
    int cin = 1;
    for (int c : enc_channels) {
      s.layers.push_back({cin, c, 2, true});
      cin = c;
    }
    return s;
  }
  [[nodiscard]] ConvStack decoder() const {
    ConvStack s;
    s.layers.push_back({2 * enc_channels.back(), dec_hidden, 1, true});
    s.layers.push_back({dec_hidden, kFlowChannels, 1, false});
    return s;
  }

  [[nodiscard]] nlohmann::json to_json() const {
    return {{"model", "flow"},
            {"cell_px", cell_px},
            {"enc_channels", enc_channels},
            {"dec_hidden", dec_hidden},
            {"encoder", stack_json(encoder())},
            {"decoder", stack_json(decoder())}};
  }
  friend bool operator==(const FlowLayout&, const FlowLayout&) = default;
};

/// Cell-major (cell, channel) mask of the flow entries a grid allows.
inline std::vector<std::uint8_t> allowed_entries(const GridShape& shape,
                                                 const std::vector<std::uint8_t>& outside_mask) {
  const FlowField probe(shape, Direction::forward, outside_mask);
  std::vector<std::uint8_t> m(static_cast<std::size_t>(shape.cells()) * kFlowChannels);
  for (int j = 0; j < shape.cells(); ++j)
    for (int ch = 0; ch < kFlowChannels; ++ch)
      m[static_cast<std::size_t>(j) * kFlowChannels + ch] = probe.allowed(j, ch) ? 1 : 0;
  return m;
}

template <class T>
struct FlowPass {
  StackTape<T> dec;
  std::vector<std::uint8_t> allowed;
  std::vector<double> flow;  // (cell, channel), rectified and masked
  GridShape shape;
  std::vector<std::uint8_t> outside_mask;

  [[nodiscard]] FlowField field(Direction d = Direction::forward) const {
    return FlowField::from_values(shape, flow, d, outside_mask);
  }
};

template <class T>
class FlowRegressor {
 public:
  FlowRegressor() : FlowRegressor(FlowLayout{}) {}
  explicit FlowRegressor(FlowLayout layout)
      : layout_(std::move(layout)), enc_(layout_.encoder()), dec_(layout_.decoder()) {
    layout_.validate();
  }

  [[nodiscard]] const FlowLayout& layout() const { return layout_; }
  [[nodiscard]] std::size_t encoder_params() const { return enc_.param_count(); }
  [[nodiscard]] std::size_t num_params() const { return enc_.param_count() + dec_.param_count(); }

  [[nodiscard]] std::vector<T> init(std::uint64_t seed) const {
    std::vector<T> p(num_params());
    Rng rng(seed, "init/flow");
    init_stack<T>(enc_, std::span<T>(p).subspan(0, enc_.param_count()), rng);
    init_stack<T>(dec_, std::span<T>(p).subspan(enc_.param_count()), rng);
    return p;
  }

  [[nodiscard]] Tensor<T> image(const ObservationFrame& f, const GridShape& shape) const {
    if (shape.cell_px != layout_.cell_px)
      throw ShapeError("grid cell_px " + std::to_string(shape.cell_px) + " differs from model cell_px " +
                       std::to_string(layout_.cell_px));
    if (f.width != shape.image_width() || f.height != shape.image_height() ||
        f.pixels.size() != static_cast<std::size_t>(f.width) * f.height)
      throw ShapeError("frame is " + std::to_string(f.width) + "x" + std::to_string(f.height) +
                       ", grid " + shape.str() + " needs " + std::to_string(shape.image_width()) + "x" +
                       std::to_string(shape.image_height()));
    Tensor<T> t(1, f.height, f.width);
    for (std::size_t i = 0; i < f.pixels.size(); ++i) t.data[i] = static_cast<T>(f.pixels[i]);
    return t;
  }

  [[nodiscard]] StackTape<T> encode(std::span<const T> params, const Tensor<T>& img) const {
    check_params(params);
    return stack_forward<T>(enc_, params.subspan(0, enc_.param_count()), img);
  }

  [[nodiscard]] FlowPass<T> decode(std::span<const T> params, const StackTape<T>& a,
                                   const StackTape<T>& b, const GridShape& shape,
                                   const std::vector<std::uint8_t>& outside_mask = {}) const {
    check_params(params);
    const Tensor<T>& fa = a.output();
    const Tensor<T>& fb = b.output();
    if (fa.h != shape.rows || fa.w != shape.cols || fb.h != shape.rows || fb.w != shape.cols)
      throw ShapeError("encoded features do not match grid " + shape.str());
    Tensor<T> cat(fa.c + fb.c, fa.h, fa.w);
    std::copy(fa.data.begin(), fa.data.end(), cat.data.begin());
    std::copy(fb.data.begin(), fb.data.end(), cat.data.begin() + static_cast<std::ptrdiff_t>(fa.size()));
    FlowPass<T> pass;
    pass.dec = stack_forward<T>(dec_, params.subspan(enc_.param_count()), cat);
    pass.shape = shape;
    pass.outside_mask = outside_mask.empty() ? boundary_mask(shape) : outside_mask;
    pass.allowed = allowed_entries(shape, pass.outside_mask);
    const Tensor<T>& z = pass.dec.output();
    const int cells = shape.cells();
    pass.flow.assign(static_cast<std::size_t>(cells) * kFlowChannels, 0.0);
    for (int ch = 0; ch < kFlowChannels; ++ch) {
      const T* zc = z.channel(ch);
      for (int j = 0; j < cells; ++j) {
        const std::size_t e = static_cast<std::size_t>(j) * kFlowChannels + ch;
        if (pass.allowed[e] && zc[j] > T(0)) pass.flow[e] = static_cast<double>(zc[j]);
      }
    }
    return pass;
  }

  /// Backpropagates a gradient on the flow values through the decoder.
  /// Parameter gradients accumulate into grad_params; feature gradients are
  /// added to grad_a / grad_b (allocated on first use).
  void decode_backward(std::span<const T> params, const FlowPass<T>& pass,
                       std::span<const double> grad_flow, std::span<T> grad_params, Tensor<T>& grad_a,
                       Tensor<T>& grad_b) const {
    if (grad_flow.size() != pass.flow.size()) throw ShapeError("flow gradient size mismatch");
    for (double g : grad_flow)
      if (!std::isfinite(g)) throw NumericError("non-finite upstream flow gradient");
    const Tensor<T>& z = pass.dec.output();
    Tensor<T> gz(z.c, z.h, z.w);
    const int cells = pass.shape.cells();
    for (int ch = 0; ch < kFlowChannels; ++ch) {
      const T* zc = z.channel(ch);
      T* gc = gz.channel(ch);
      for (int j = 0; j < cells; ++j) {
        const std::size_t e = static_cast<std::size_t>(j) * kFlowChannels + ch;
        if (pass.allowed[e] && zc[j] > T(0)) gc[j] = static_cast<T>(grad_flow[e]);
      }
    }
    Tensor<T> gcat = stack_backward<T>(dec_, params.subspan(enc_.param_count()), pass.dec, std::move(gz),
                                       grad_params.subspan(enc_.param_count()), true);
    const int ca = gcat.c / 2;
    add_slice(gcat, 0, ca, grad_a);
    add_slice(gcat, ca, gcat.c - ca, grad_b);
  }

  void encode_backward(std::span<const T> params, const StackTape<T>& tape, const Tensor<T>& grad_feat,
                       std::span<T> grad_params) const {
    if (grad_feat.size() == 0) return;
    stack_backward<T>(enc_, params.subspan(0, enc_.param_count()), tape, grad_feat,
                      grad_params.subspan(0, enc_.param_count()), false);
  }

  [[nodiscard]] FlowPass<T> forward(std::span<const T> params, const ObservationFrame& prev,
                                    const ObservationFrame& cur, const GridShape& shape,
                                    const std::vector<std::uint8_t>& outside_mask = {}) const {
    const auto a = encode(params, image(prev, shape));
    const auto b = encode(params, image(cur, shape));
    return decode(params, a, b, shape, outside_mask);
  }

 private:
  void check_params(std::span<const T> params) const {
    if (params.size() != num_params())
      throw ShapeError("flow regressor needs " + std::to_string(num_params()) + " parameters, got " +
                       std::to_string(params.size()));
  }

  static void add_slice(const Tensor<T>& src, int c0, int nc, Tensor<T>& dst) {
    if (dst.c != nc || dst.h != src.h || dst.w != src.w) dst = Tensor<T>(nc, src.h, src.w);
    const T* s = src.channel(c0);
    for (std::size_t i = 0; i < dst.size(); ++i) dst.data[i] += s[i];
  }

  FlowLayout layout_;
  ConvStack enc_;
  ConvStack dec_;
};

/// Predicted flows between two frames; always a valid FlowField.
template <class T>
FlowField flow_forward(const FlowRegressor<T>& model, std::span<const T> params, const ObservationFrame& prev,
                       const ObservationFrame& cur, const GridShape& shape,
                       const std::vector<std::uint8_t>& outside_mask = {}) {
  return model.forward(params, prev, cur, shape, outside_mask).field();
}

/// Gradient of <flow_forward(params, prev, cur), grad_out> with respect to params.
template <class T>
std::vector<T> flow_backward(const FlowRegressor<T>& model, std::span<const T> params,
                             const ObservationFrame& prev, const ObservationFrame& cur,
                             const GridShape& shape, std::span<const double> grad_out,
                             const std::vector<std::uint8_t>& outside_mask = {}) {
  const auto a = model.encode(params, model.image(prev, shape));
  const auto b = model.encode(params, model.image(cur, shape));
  const auto pass = model.decode(params, a, b, shape, outside_mask);
  std::vector<T> g(model.num_params(), T(0));
  Tensor<T> ga, gb;
  model.decode_backward(params, pass, grad_out, g, ga, gb);
  model.encode_backward(params, a, ga, g);
  model.encode_backward(params, b, gb, g);
  return g;
}

// ---------------------------------------------------------------------------

/// Maps a pair of density maps to a per-cell optical flow (pixels per frame).
class OpticalRegressor {
 public:
  explicit OpticalRegressor(int hidden = 8) : hidden_(hidden) {
    if (hidden < 1) throw ConfigError("optical regressor width must be positive");
    stack_.layers = {{2, hidden, 1, true}, {hidden, hidden, 1, true}, {hidden, 2, 1, false}};
  }

  [[nodiscard]] std::size_t num_params() const { return stack_.param_count(); }
  [[nodiscard]] int hidden() const { return hidden_; }

  [[nodiscard]] std::vector<double> init(std::uint64_t seed) const {
    std::vector<double> p(num_params());
    Rng rng(seed, "init/optical");
    init_stack<double>(stack_, p, rng);
    return p;
  }

  [[nodiscard]] nlohmann::json to_json() const {
    return {{"model", "optical"}, {"hidden", hidden_}, {"layers", stack_json(stack_)}};
  }

  struct Pass {
    StackTape<double> tape;
    OpticalFlowField out;
  };

  [[nodiscard]] Pass forward(std::span<const double> params, const DensityMap& m_prev,
                             const DensityMap& m_cur) const {
    if (params.size() != num_params()) throw ShapeError("optical regressor parameter count mismatch");
    if (!m_prev.shape().same_cells(m_cur.shape()))
      throw ShapeError("density maps have shapes " + m_prev.shape().str() + " and " + m_cur.shape().str());
    const GridShape& s = m_cur.shape();
    Tensor<double> x(2, s.rows, s.cols);
    std::copy(m_prev.values().begin(), m_prev.values().end(), x.channel(0));
    std::copy(m_cur.values().begin(), m_cur.values().end(), x.channel(1));
    Pass p{stack_forward<double>(stack_, params, x), OpticalFlowField(s)};
    const Tensor<double>& y = p.tape.output();
    for (int j = 0; j < s.cells(); ++j) {
      p.out.uv[2 * static_cast<std::size_t>(j)] = y.channel(0)[j];
      p.out.uv[2 * static_cast<std::size_t>(j) + 1] = y.channel(1)[j];
    }
    return p;
  }

  struct Grad {
    std::vector<double> params;
    std::vector<double> m_prev;
    std::vector<double> m_cur;
  };

  /// grad_uv is (cell, component) like OpticalFlowField::uv.
  [[nodiscard]] Grad backward(std::span<const double> params, const Pass& pass,
                              std::span<const double> grad_uv, bool want_input = true) const {
    const GridShape& s = pass.out.shape;
    if (grad_uv.size() != pass.out.uv.size()) throw ShapeError("optical gradient size mismatch");
    Tensor<double> g(2, s.rows, s.cols);
    for (int j = 0; j < s.cells(); ++j) {
      g.channel(0)[j] = grad_uv[2 * static_cast<std::size_t>(j)];
      g.channel(1)[j] = grad_uv[2 * static_cast<std::size_t>(j) + 1];
    }
    Grad out;
    out.params.assign(num_params(), 0.0);
    Tensor<double> gx = stack_backward<double>(stack_, params, pass.tape, std::move(g), out.params, want_input);
    if (want_input) {
      out.m_prev.assign(gx.channel(0), gx.channel(0) + s.cells());
      out.m_cur.assign(gx.channel(1), gx.channel(1) + s.cells());
    }
    return out;
  }

 private:
  int hidden_;
  ConvStack stack_;
};

inline OpticalFlowField optical_forward(const OpticalRegressor& fo, std::span<const double> params,
                                        const DensityMap& m_prev, const DensityMap& m_cur) {
  return fo.forward(params, m_prev, m_cur).out;
}

// ---------------------------------------------------------------------------

inline double sigmoid(double z) {
  return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

/// One-hidden-layer perceptron on a flattened patch density map, returning
/// the probability that the density comes from an annotated patch.
class Discriminator {
 public:
  Discriminator(int inputs, int hidden = 16) : in_(inputs), hid_(hidden) {
    if (inputs < 1 || hidden < 1) throw ConfigError("discriminator sizes must be positive");
  }

  [[nodiscard]] int inputs() const { return in_; }
  [[nodiscard]] int hidden() const { return hid_; }
  [[nodiscard]] std::size_t num_params() const {
    return static_cast<std::size_t>(hid_) * in_ + 2 * static_cast<std::size_t>(hid_) + 1;
  }

  [[nodiscard]] std::vector<double> init(std::uint64_t seed) const {
    std::vector<double> p(num_params(), 0.0);
    Rng rng(seed, "init/discriminator");
    glorot_fill<double>(std::span<double>(p).subspan(0, static_cast<std::size_t>(hid_) * in_), in_, hid_, rng);
    glorot_fill<double>(std::span<double>(p).subspan(static_cast<std::size_t>(hid_) * (in_ + 1), hid_), hid_, 1, rng);
    return p;
  }

  [[nodiscard]] nlohmann::json to_json() const {
    return {{"model", "discriminator"}, {"inputs", in_}, {"hidden", hid_}};
  }

  struct Pass {
    std::vector<double> x;
    std::vector<double> h;  // tanh activations
    double logit = 0.0;
    double prob = 0.5;
  };

  [[nodiscard]] Pass forward(std::span<const double> params, std::span<const double> x) const {
    if (params.size() != num_params()) throw ShapeError("discriminator parameter count mismatch");
    if (x.size() != static_cast<std::size_t>(in_))
      throw ShapeError("discriminator expects " + std::to_string(in_) + " inputs, got " +
                       std::to_string(x.size()));
    Pass p;
    p.x.assign(x.begin(), x.end());
    p.h.resize(static_cast<std::size_t>(hid_));
    const double* w1 = params.data();
    const double* b1 = w1 + static_cast<std::size_t>(hid_) * in_;
    const double* w2 = b1 + hid_;
    const double b2 = w2[hid_];
    double z = b2;
    for (int k = 0; k < hid_; ++k) {
      double a = b1[k];
      const double* row = w1 + static_cast<std::size_t>(k) * in_;
      for (int i = 0; i < in_; ++i) a += row[i] * x[static_cast<std::size_t>(i)];
      p.h[static_cast<std::size_t>(k)] = std::tanh(a);
      z += w2[k] * p.h[static_cast<std::size_t>(k)];
    }
    p.logit = z;
    p.prob = sigmoid(z);
    return p;
  }

  /// Accumulates the gradient of a loss with dL/dlogit = g_logit.
  void backward(std::span<const double> params, const Pass& p, double g_logit, std::span<double> grad_params,
                std::span<double> grad_x) const {
    const double* w1 = params.data();
    const double* w2 = w1 + static_cast<std::size_t>(hid_) * (in_ + 1);
    double* gw1 = grad_params.data();
    double* gb1 = gw1 + static_cast<std::size_t>(hid_) * in_;
    double* gw2 = gb1 + hid_;
    gw2[hid_] += g_logit;
    for (int k = 0; k < hid_; ++k) {
      const double hk = p.h[static_cast<std::size_t>(k)];
      gw2[k] += g_logit * hk;
      const double ga = g_logit * w2[k] * (1.0 - hk * hk);
      gb1[k] += ga;
      const double* row = w1 + static_cast<std::size_t>(k) * in_;
      double* grow = gw1 + static_cast<std::size_t>(k) * in_;
      for (int i = 0; i < in_; ++i) {
        grow[i] += ga * p.x[static_cast<std::size_t>(i)];
        if (!grad_x.empty()) grad_x[static_cast<std::size_t>(i)] += ga * row[i];
      }
    }
  }

 private:
  int in_;
  int hid_;
};

inline double discriminator_forward(const Discriminator& d, std::span<const double> params,
                                    const DensityMap& patch_density) {
  return d.forward(params, patch_density.values()).prob;
}

}  // namespace flowcount::nn
