#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "flowcount/errors.hpp"

namespace flowcount::nn {

/// Dense channel-major (C, H, W) feature map.
template <class T>
struct Tensor {
  int c = 0;
  int h = 0;
  int w = 0;
  std::vector<T> data;

  Tensor() = default;
  Tensor(int c_, int h_, int w_) : c(c_), h(h_), w(w_), data(static_cast<std::size_t>(c_) * h_ * w_, T(0)) {}

  [[nodiscard]] std::size_t size() const { return data.size(); }
  [[nodiscard]] int plane() const { return h * w; }
  T* channel(int k) { return data.data() + static_cast<std::size_t>(k) * plane(); }
  const T* channel(int k) const { return data.data() + static_cast<std::size_t>(k) * plane(); }
};

/// 3x3 convolution, zero padding 1.
struct ConvSpec {
  int cin = 1;
  int cout = 1;
  int stride = 1;
  bool relu = true;

  [[nodiscard]] std::size_t weight_count() const { return static_cast<std::size_t>(cout) * cin * 9; }
  [[nodiscard]] std::size_t param_count() const { return weight_count() + static_cast<std::size_t>(cout); }
  [[nodiscard]] int out_size(int n) const { return (n - 1) / stride + 1; }
};

template <class T>
struct ConvTape {
  Tensor<T> col;  // (cin*9) x (oh*ow) patch matrix of the layer input
  Tensor<T> out;  // layer output after the optional ReLU
  int in_h = 0;
  int in_w = 0;
};

template <class T>
Tensor<T> im2col(const Tensor<T>& x, int stride) {
  const int oh = (x.h - 1) / stride + 1;
  const int ow = (x.w - 1) / stride + 1;
  Tensor<T> col(x.c * 9, oh, ow);
  for (int ci = 0; ci < x.c; ++ci) {
    const T* src = x.channel(ci);
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        T* dst = col.channel(ci * 9 + ky * 3 + kx);
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride + ky - 1;
          T* row = dst + static_cast<std::size_t>(oy) * ow;
          if (iy < 0 || iy >= x.h) continue;
          const T* srow = src + static_cast<std::size_t>(iy) * x.w;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride + kx - 1;
            if (ix >= 0 && ix < x.w) row[ox] = srow[ix];
          }
        }
      }
  }
  return col;
}

template <class T>
void col2im_add(const Tensor<T>& gcol, int stride, Tensor<T>& gx) {
  const int oh = gcol.h;
  const int ow = gcol.w;
  for (int ci = 0; ci < gx.c; ++ci) {
    T* dst = gx.channel(ci);
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        const T* src = gcol.channel(ci * 9 + ky * 3 + kx);
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride + ky - 1;
          if (iy < 0 || iy >= gx.h) continue;
          const T* srow = src + static_cast<std::size_t>(oy) * ow;
          T* drow = dst + static_cast<std::size_t>(iy) * gx.w;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride + kx - 1;
            if (ix >= 0 && ix < gx.w) drow[ix] += srow[ox];
          }
        }
      }
  }
}

/// params holds the layer's weights (cout x cin x 3 x 3) followed by biases.
template <class T>
ConvTape<T> conv_forward(const ConvSpec& spec, std::span<const T> params, const Tensor<T>& x) {
  if (x.c != spec.cin)
    throw ShapeError("conv layer expects " + std::to_string(spec.cin) + " input channels, got " +
                     std::to_string(x.c));
  ConvTape<T> tape;
  tape.in_h = x.h;
  tape.in_w = x.w;
  tape.col = im2col(x, spec.stride);
  const int p = tape.col.plane();
  const int k = spec.cin * 9;
  tape.out = Tensor<T>(spec.cout, tape.col.h, tape.col.w);
  const T* wt = params.data();
  const T* bias = params.data() + spec.weight_count();
  for (int co = 0; co < spec.cout; ++co) {
    T* y = tape.out.channel(co);
    std::fill(y, y + p, bias[co]);
    const T* wrow = wt + static_cast<std::size_t>(co) * k;
    for (int kk = 0; kk < k; ++kk) {
      const T a = wrow[kk];
      if (a == T(0)) continue;
      const T* c = tape.col.channel(kk);
      for (int i = 0; i < p; ++i) y[i] += a * c[i];
    }
    if (spec.relu)
      for (int i = 0; i < p; ++i) y[i] = y[i] > T(0) ? y[i] : T(0);
  }
  return tape;
}

/// Accumulates parameter gradients into grad_params and, when grad_in is
/// given, the input gradient into it. grad_out is with respect to the layer
/// output (after the ReLU) and is consumed.
template <class T>
void conv_backward(const ConvSpec& spec, std::span<const T> params, const ConvTape<T>& tape,
                   Tensor<T>& grad_out, std::span<T> grad_params, Tensor<T>* grad_in) {
  const int p = tape.col.plane();
  const int k = spec.cin * 9;
  if (spec.relu)
    for (int co = 0; co < spec.cout; ++co) {
      T* g = grad_out.channel(co);
      const T* y = tape.out.channel(co);
      for (int i = 0; i < p; ++i)
        if (!(y[i] > T(0))) g[i] = T(0);
    }
  T* gw = grad_params.data();
  T* gb = grad_params.data() + spec.weight_count();
  for (int co = 0; co < spec.cout; ++co) {
    const T* g = grad_out.channel(co);
    T sb = T(0);
    for (int i = 0; i < p; ++i) sb += g[i];
    gb[co] += sb;
    T* gwrow = gw + static_cast<std::size_t>(co) * k;
    for (int kk = 0; kk < k; ++kk) {
      const T* c = tape.col.channel(kk);
      T s = T(0);
      for (int i = 0; i < p; ++i) s += g[i] * c[i];
      gwrow[kk] += s;
    }
  }
  if (!grad_in) return;
  Tensor<T> gcol(k, tape.col.h, tape.col.w);
  const T* wt = params.data();
  for (int co = 0; co < spec.cout; ++co) {
    const T* g = grad_out.channel(co);
    const T* wrow = wt + static_cast<std::size_t>(co) * k;
    for (int kk = 0; kk < k; ++kk) {
      const T a = wrow[kk];
      if (a == T(0)) continue;
      T* gc = gcol.channel(kk);
      for (int i = 0; i < p; ++i) gc[i] += a * g[i];
    }
  }
  if (grad_in->c != spec.cin || grad_in->h != tape.in_h || grad_in->w != tape.in_w)
    *grad_in = Tensor<T>(spec.cin, tape.in_h, tape.in_w);
  col2im_add(gcol, spec.stride, *grad_in);
}

/// A chain of 3x3 convolutions sharing one flat parameter vector.
struct ConvStack {
  std::vector<ConvSpec> layers;

  [[nodiscard]] std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.param_count();
    return n;
  }
};

template <class T>
struct StackTape {
  std::vector<ConvTape<T>> layers;
  [[nodiscard]] const Tensor<T>& output() const { return layers.back().out; }
};

template <class T>
StackTape<T> stack_forward(const ConvStack& stack, std::span<const T> params, const Tensor<T>& x) {
  StackTape<T> tape;
  tape.layers.reserve(stack.layers.size());
  std::size_t off = 0;
  const Tensor<T>* in = &x;
  for (const ConvSpec& l : stack.layers) {
    tape.layers.push_back(conv_forward<T>(l, params.subspan(off, l.param_count()), *in));
    in = &tape.layers.back().out;
    off += l.param_count();
  }
  return tape;
}

/// Returns the input gradient when want_input is set, otherwise an empty
/// tensor. grad_out is consumed.
template <class T>
Tensor<T> stack_backward(const ConvStack& stack, std::span<const T> params, const StackTape<T>& tape,
                         Tensor<T> grad_out, std::span<T> grad_params, bool want_input) {
  std::vector<std::size_t> offs;
  std::size_t off = 0;
  for (const ConvSpec& l : stack.layers) {
    offs.push_back(off);
    off += l.param_count();
  }
  Tensor<T> g = std::move(grad_out);
  for (std::size_t li = stack.layers.size(); li-- > 0;) {
    const ConvSpec& l = stack.layers[li];
    const bool need_in = li > 0 || want_input;
    Tensor<T> gin;
    conv_backward<T>(l, params.subspan(offs[li], l.param_count()), tape.layers[li], g,
                     grad_params.subspan(offs[li], l.param_count()), need_in ? &gin : nullptr);
    g = std::move(gin);
  }
  return g;
}

}  // namespace flowcount::nn
