#include "msinet/layers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "msinet/error.hpp"
#include "msinet/numerics/ops.hpp"
#include "numerics/gemm.hpp"

namespace msinet {

template <typename T>
void fill_normal(Tensor<T>& t, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.values()) v = static_cast<T>(dist(rng));
}

template <typename T>
Conv2dParams<T> Conv2dParams<T>::create(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
                                        std::size_t padding, std::size_t groups, bool with_bias, Rng& rng) {
  if (groups == 0 || in % groups != 0 || out % groups != 0)
    throw ArgumentError("conv2d: channels " + std::to_string(in) + "->" + std::to_string(out) +
                        " not divisible by groups " + std::to_string(groups));
  Conv2dParams p;
  p.weight = Tensor<T>({out, in / groups, kernel, kernel});
  const double fan_out = static_cast<double>(out * kernel * kernel) / static_cast<double>(groups);
  fill_normal(p.weight, std::sqrt(2.0 / fan_out), rng);
  p.weight.set_requires_grad(true);
  if (with_bias) {
    p.bias = Tensor<T>({out});
    p.bias->set_requires_grad(true);
  }
  p.stride = stride;
  p.padding = padding;
  p.groups = groups;
  return p;
}

template <typename T>
void Conv2dParams<T>::collect(const std::string& prefix, NamedTensors<T>& out) {
  out.push_back({prefix + ".weight", &weight, true});
  if (bias) out.push_back({prefix + ".bias", &*bias, true});
}

template <typename T>
BatchNormState<T> BatchNormState<T>::create(std::size_t channels) {
  BatchNormState s;
  s.gamma = Tensor<T>({channels}, T(1));
  s.beta = Tensor<T>({channels}, T(0));
  s.running_mean = Tensor<T>({channels}, T(0));
  s.running_var = Tensor<T>({channels}, T(1));
  s.gamma.set_requires_grad(true);
  s.beta.set_requires_grad(true);
  return s;
}

template <typename T>
void BatchNormState<T>::collect(const std::string& prefix, NamedTensors<T>& out) {
  out.push_back({prefix + ".gamma", &gamma, true});
  out.push_back({prefix + ".beta", &beta, true});
  out.push_back({prefix + ".running_mean", &running_mean, false});
  out.push_back({prefix + ".running_var", &running_var, false});
}

template <typename T>
LinearParams<T> LinearParams<T>::create(std::size_t in, std::size_t out, bool with_bias, double stddev, Rng& rng) {
  LinearParams p;
  p.weight = Tensor<T>({out, in});
  fill_normal(p.weight, stddev, rng);
  p.weight.set_requires_grad(true);
  if (with_bias) {
    p.bias = Tensor<T>({out});
    p.bias->set_requires_grad(true);
  }
  return p;
}

template <typename T>
void LinearParams<T>::collect(const std::string& prefix, NamedTensors<T>& out) {
  out.push_back({prefix + ".weight", &weight, true});
  if (bias) out.push_back({prefix + ".bias", &*bias, true});
}

namespace {

struct ConvGeometry {
  std::size_t batch, in_ch, h, w, out_ch, kh, kw, stride, pad, groups, oh, ow;
  std::size_t in_per_group() const { return in_ch / groups; }
  std::size_t out_per_group() const { return out_ch / groups; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0 && groups == 1; }
};

// Valid output columns [lo, hi) for kernel column kx.
inline void column_range(const ConvGeometry& g, std::size_t kx, std::size_t& lo, std::size_t& hi) {
  // ix = ox*stride + kx - pad must lie in [0, w)
  const long long s = static_cast<long long>(g.stride);
  const long long off = static_cast<long long>(kx) - static_cast<long long>(g.pad);
  long long first = off >= 0 ? 0 : (-off + s - 1) / s;
  long long last = (static_cast<long long>(g.w) - 1 - off);
  last = last < 0 ? -1 : last / s;
  first = std::max<long long>(first, 0);
  last = std::min<long long>(last, static_cast<long long>(g.ow) - 1);
  lo = static_cast<std::size_t>(first);
  hi = last < first ? lo : static_cast<std::size_t>(last + 1);
}

// Column buffer for one image: rows (ic, ky, kx), columns output positions.
// When `transposed`, the layout is [positions, rows] instead.
template <typename T>
void im2col(const ConvGeometry& g, const T* x, T* col, bool transposed) {
  const std::size_t positions = g.oh * g.ow, rows = g.in_ch * g.kh * g.kw;
  std::size_t r = 0;
  for (std::size_t ic = 0; ic < g.in_ch; ++ic)
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx, ++r) {
        std::size_t lo, hi;
        column_range(g, kx, lo, hi);
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long long iy = static_cast<long long>(oy * g.stride + ky) - static_cast<long long>(g.pad);
          const bool row_ok = iy >= 0 && iy < static_cast<long long>(g.h);
          const T* xrow = row_ok ? x + (ic * g.h + static_cast<std::size_t>(iy)) * g.w : nullptr;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            T v = T(0);
            if (row_ok && ox >= lo && ox < hi) v = xrow[ox * g.stride + kx - g.pad];
            const std::size_t pos = oy * g.ow + ox;
            if (transposed)
              col[pos * rows + r] = v;
            else
              col[r * positions + pos] = v;
          }
        }
      }
}

// Scatter-add of a [rows, positions] column gradient back to the image.
template <typename T>
void col2im_add(const ConvGeometry& g, const T* col, T* dx) {
  const std::size_t positions = g.oh * g.ow;
  std::size_t r = 0;
  for (std::size_t ic = 0; ic < g.in_ch; ++ic)
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx, ++r) {
        std::size_t lo, hi;
        column_range(g, kx, lo, hi);
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long long iy = static_cast<long long>(oy * g.stride + ky) - static_cast<long long>(g.pad);
          if (iy < 0 || iy >= static_cast<long long>(g.h)) continue;
          T* dxrow = dx + (ic * g.h + static_cast<std::size_t>(iy)) * g.w;
          const T* crow = col + r * positions + oy * g.ow;
          for (std::size_t ox = lo; ox < hi; ++ox) dxrow[ox * g.stride + kx - g.pad] += crow[ox];
        }
      }
}

template <typename T>
void conv_forward(const ConvGeometry& g, const T* x, const T* w, T* y) {
  const std::size_t icg = g.in_per_group(), ocg = g.out_per_group();
  const std::size_t in_plane = g.h * g.w, out_plane = g.oh * g.ow;
  if (g.pointwise()) {
    for (std::size_t b = 0; b < g.batch; ++b)
      detail::gemm_acc(false, false, g.out_ch, in_plane, g.in_ch, w, x + b * g.in_ch * in_plane,
                       y + b * g.out_ch * out_plane);
    return;
  }
  if (g.groups == 1) {
    const std::size_t rows = g.in_ch * g.kh * g.kw;
    std::vector<T> col(rows * out_plane);
    for (std::size_t b = 0; b < g.batch; ++b) {
      im2col(g, x + b * g.in_ch * in_plane, col.data(), false);
      detail::gemm_acc(false, false, g.out_ch, out_plane, rows, w, col.data(), y + b * g.out_ch * out_plane);
    }
    return;
  }
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t oc = 0; oc < g.out_ch; ++oc) {
      const std::size_t grp = oc / ocg;
      T* yp = y + (b * g.out_ch + oc) * out_plane;
      for (std::size_t ic = 0; ic < icg; ++ic) {
        const T* xp = x + (b * g.in_ch + grp * icg + ic) * in_plane;
        const T* wp = w + (oc * icg + ic) * g.kh * g.kw;
        for (std::size_t ky = 0; ky < g.kh; ++ky)
          for (std::size_t kx = 0; kx < g.kw; ++kx) {
            const T wv = wp[ky * g.kw + kx];
            std::size_t lo, hi;
            column_range(g, kx, lo, hi);
            for (std::size_t oy = 0; oy < g.oh; ++oy) {
              const long long iy = static_cast<long long>(oy * g.stride + ky) - static_cast<long long>(g.pad);
              if (iy < 0 || iy >= static_cast<long long>(g.h)) continue;
              const std::ptrdiff_t rowoff = static_cast<std::ptrdiff_t>(iy * static_cast<long long>(g.w) +
                                                                     static_cast<long long>(kx) -
                                                                     static_cast<long long>(g.pad));
              T* yrow = yp + oy * g.ow;
              for (std::size_t ox = lo; ox < hi; ++ox)
                yrow[ox] += wv * xp[rowoff + static_cast<std::ptrdiff_t>(ox * g.stride)];
            }
          }
      }
    }
}

template <typename T>
void conv_backward(const ConvGeometry& g, const T* x, const T* w, const T* dy, T* dx, T* dw) {
  const std::size_t icg = g.in_per_group(), ocg = g.out_per_group();
  const std::size_t in_plane = g.h * g.w, out_plane = g.oh * g.ow;
  if (g.pointwise()) {
    for (std::size_t b = 0; b < g.batch; ++b)
      detail::gemm_backward(false, false, g.out_ch, in_plane, g.in_ch, w, x + b * g.in_ch * in_plane,
                            dy + b * g.out_ch * out_plane, dw, dx ? dx + b * g.in_ch * in_plane : nullptr);
    return;
  }
  if (g.groups == 1) {
    const std::size_t rows = g.in_ch * g.kh * g.kw;
    std::vector<T> col(rows * out_plane), dcol(dx ? rows * out_plane : 0);
    for (std::size_t b = 0; b < g.batch; ++b) {
      const T* dyb = dy + b * g.out_ch * out_plane;
      if (dw) {
        im2col(g, x + b * g.in_ch * in_plane, col.data(), true);
        detail::gemm_acc(false, false, g.out_ch, rows, out_plane, dyb, col.data(), dw);
      }
      if (dx) {
        std::fill(dcol.begin(), dcol.end(), T(0));
        detail::gemm_acc(true, false, rows, out_plane, g.out_ch, w, dyb, dcol.data());
        col2im_add(g, dcol.data(), dx + b * g.in_ch * in_plane);
      }
    }
    return;
  }
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t oc = 0; oc < g.out_ch; ++oc) {
      const std::size_t grp = oc / ocg;
      const T* dyp = dy + (b * g.out_ch + oc) * out_plane;
      for (std::size_t ic = 0; ic < icg; ++ic) {
        const std::size_t xoff = (b * g.in_ch + grp * icg + ic) * in_plane;
        const T* xp = x + xoff;
        const T* wp = w + (oc * icg + ic) * g.kh * g.kw;
        T* dwp = dw ? dw + (oc * icg + ic) * g.kh * g.kw : nullptr;
        for (std::size_t ky = 0; ky < g.kh; ++ky)
          for (std::size_t kx = 0; kx < g.kw; ++kx) {
            const T wv = wp[ky * g.kw + kx];
            std::size_t lo, hi;
            column_range(g, kx, lo, hi);
            T acc = T(0);
            for (std::size_t oy = 0; oy < g.oh; ++oy) {
              const long long iy = static_cast<long long>(oy * g.stride + ky) - static_cast<long long>(g.pad);
              if (iy < 0 || iy >= static_cast<long long>(g.h)) continue;
              const std::ptrdiff_t rowoff = static_cast<std::ptrdiff_t>(iy * static_cast<long long>(g.w) +
                                                                     static_cast<long long>(kx) -
                                                                     static_cast<long long>(g.pad));
              const T* dyrow = dyp + oy * g.ow;
              if (dwp)
                for (std::size_t ox = lo; ox < hi; ++ox)
                  acc += dyrow[ox] * xp[rowoff + static_cast<std::ptrdiff_t>(ox * g.stride)];
              if (dx) {
                T* dxp = dx + xoff;
                for (std::size_t ox = lo; ox < hi; ++ox)
                  dxp[rowoff + static_cast<std::ptrdiff_t>(ox * g.stride)] += wv * dyrow[ox];
              }
            }
            if (dwp) dwp[ky * g.kw + kx] += acc;
          }
      }
    }
}

}  // namespace

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> weight, std::optional<Var<T>> bias, std::size_t stride, std::size_t padding,
              std::size_t groups) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  if (xs.size() != 4) throw ArgumentError("conv2d: input must be [B,C,H,W], got " + shape_to_string(xs));
  if (ws.size() != 4) throw ArgumentError("conv2d: weight must be [O,C/g,kH,kW]");
  if (groups == 0 || stride == 0) throw ArgumentError("conv2d: groups and stride must be positive");
  if (xs[1] % groups != 0 || ws[0] % groups != 0 || ws[1] * groups != xs[1])
    throw ArgumentError("conv2d: channel/group mismatch: input " + shape_to_string(xs) + ", weight " +
                        shape_to_string(ws) + ", groups " + std::to_string(groups));
  if (xs[2] + 2 * padding < ws[2] || xs[3] + 2 * padding < ws[3])
    throw ArgumentError("conv2d: kernel larger than padded input");
  ConvGeometry g{xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], ws[3], stride, padding, groups, 0, 0};
  g.oh = (g.h + 2 * padding - g.kh) / stride + 1;
  g.ow = (g.w + 2 * padding - g.kw) / stride + 1;
  if (bias && (bias->value().rank() != 1 || bias->shape()[0] != g.out_ch))
    throw ArgumentError("conv2d: bias must be [out_channels]");

  Tensor<T> out({g.batch, g.out_ch, g.oh, g.ow});
  conv_forward(g, x.value().data(), weight.value().data(), out.data());
  if (bias) {
    const std::size_t plane = g.oh * g.ow;
    for (std::size_t b = 0; b < g.batch; ++b)
      for (std::size_t oc = 0; oc < g.out_ch; ++oc) {
        const T bv = bias->value()[oc];
        T* p = out.data() + (b * g.out_ch + oc) * plane;
        for (std::size_t i = 0; i < plane; ++i) p[i] += bv;
      }
  }
  std::vector<Var<T>> parents{x, weight};
  if (bias) parents.push_back(*bias);
  const std::size_t bias_id = bias ? bias->id : 0;
  const bool has_bias = bias.has_value();
  return x.tape->record(
      std::move(out), parents,
      [g, xi = x.id, wi = weight.id, bias_id, has_bias](Tape<T>& t, std::size_t self) {
        auto dy = t.grad(self);
        T* dx = t.requires_grad(xi) ? t.grad(xi).data() : nullptr;
        T* dw = t.requires_grad(wi) ? t.grad(wi).data() : nullptr;
        if (dx || dw) conv_backward(g, t.value(xi).data(), t.value(wi).data(), dy.data(), dx, dw);
        if (has_bias && t.requires_grad(bias_id)) {
          auto db = t.grad(bias_id);
          const std::size_t plane = g.oh * g.ow;
          for (std::size_t b = 0; b < g.batch; ++b)
            for (std::size_t oc = 0; oc < g.out_ch; ++oc) {
              const T* p = dy.data() + (b * g.out_ch + oc) * plane;
              T acc = T(0);
              for (std::size_t i = 0; i < plane; ++i) acc += p[i];
              db[oc] += acc;
            }
        }
      },
      "conv2d");
}

template <typename T>
Var<T> conv2d(Var<T> x, Conv2dParams<T>& p) {
  Tape<T>& tape = *x.tape;
  std::optional<Var<T>> b;
  if (p.bias) b = tape.param(*p.bias);
  return conv2d(x, tape.param(p.weight), b, p.stride, p.padding, p.groups);
}

template <typename T>
Var<T> depthwise_conv2d(Var<T> x, Conv2dParams<T>& p) {
  if (x.value().rank() != 4 || p.groups != x.shape()[1] || p.out_channels() != x.shape()[1] ||
      p.in_channels() != x.shape()[1])
    throw ArgumentError("depthwise_conv2d: requires groups == in_channels == out_channels");
  return conv2d(x, p);
}

template <typename T>
Var<T> maxpool2d(Var<T> x, std::size_t kernel, std::size_t stride, std::size_t padding) {
  const Shape& xs = x.shape();
  if (xs.size() != 4) throw ArgumentError("maxpool2d: input must be [B,C,H,W]");
  if (kernel == 0 || stride == 0) throw ArgumentError("maxpool2d: kernel and stride must be positive");
  if (xs[2] + 2 * padding < kernel || xs[3] + 2 * padding < kernel)
    throw ArgumentError("maxpool2d: window larger than padded input");
  const std::size_t planes = xs[0] * xs[1], h = xs[2], w = xs[3];
  const std::size_t oh = (h + 2 * padding - kernel) / stride + 1, ow = (w + 2 * padding - kernel) / stride + 1;
  Tensor<T> out({xs[0], xs[1], oh, ow});
  std::vector<std::size_t> arg(out.numel());
  const T* xv = x.value().data();
  for (std::size_t pl = 0; pl < planes; ++pl)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        T best = -std::numeric_limits<T>::infinity();
        std::size_t best_i = std::numeric_limits<std::size_t>::max();
        for (std::size_t ky = 0; ky < kernel; ++ky) {
          const long long iy = static_cast<long long>(oy * stride + ky) - static_cast<long long>(padding);
          if (iy < 0 || iy >= static_cast<long long>(h)) continue;
          for (std::size_t kx = 0; kx < kernel; ++kx) {
            const long long ix = static_cast<long long>(ox * stride + kx) - static_cast<long long>(padding);
            if (ix < 0 || ix >= static_cast<long long>(w)) continue;
            const std::size_t i = pl * h * w + static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix);
            if (best_i == std::numeric_limits<std::size_t>::max() || xv[i] > best) {
              best = xv[i];
              best_i = i;
            }
          }
        }
        if (best_i == std::numeric_limits<std::size_t>::max())
          throw ArgumentError("maxpool2d: window covers only padding");
        const std::size_t o = (pl * oh + oy) * ow + ox;
        out[o] = best;
        arg[o] = best_i;
      }
  return x.tape->record(
      std::move(out), {x},
      [xi = x.id, arg = std::move(arg)](Tape<T>& t, std::size_t self) {
        auto g = t.grad(self);
        auto gx = t.grad(xi);
        for (std::size_t i = 0; i < g.size(); ++i) gx[arg[i]] += g[i];
      },
      "maxpool2d");
}

template <typename T>
Var<T> avgpool2d(Var<T> x, std::size_t kernel, std::size_t stride) {
  const Shape& xs = x.shape();
  if (xs.size() != 4) throw ArgumentError("avgpool2d: input must be [B,C,H,W]");
  if (kernel == 0 || stride == 0 || xs[2] < kernel || xs[3] < kernel)
    throw ArgumentError("avgpool2d: window larger than input");
  const std::size_t planes = xs[0] * xs[1], h = xs[2], w = xs[3];
  const std::size_t oh = (h - kernel) / stride + 1, ow = (w - kernel) / stride + 1;
  const T inv = T(1) / static_cast<T>(kernel * kernel);
  Tensor<T> out({xs[0], xs[1], oh, ow});
  const T* xv = x.value().data();
  for (std::size_t pl = 0; pl < planes; ++pl)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        T acc = T(0);
        for (std::size_t ky = 0; ky < kernel; ++ky)
          for (std::size_t kx = 0; kx < kernel; ++kx) acc += xv[pl * h * w + (oy * stride + ky) * w + ox * stride + kx];
        out[(pl * oh + oy) * ow + ox] = acc * inv;
      }
  return x.tape->record(
      std::move(out), {x},
      [xi = x.id, planes, h, w, oh, ow, kernel, stride, inv](Tape<T>& t, std::size_t self) {
        auto g = t.grad(self);
        auto gx = t.grad(xi);
        for (std::size_t pl = 0; pl < planes; ++pl)
          for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const T gv = g[(pl * oh + oy) * ow + ox] * inv;
              for (std::size_t ky = 0; ky < kernel; ++ky)
                for (std::size_t kx = 0; kx < kernel; ++kx)
                  gx[pl * h * w + (oy * stride + ky) * w + ox * stride + kx] += gv;
            }
      },
      "avgpool2d");
}

template <typename T>
Var<T> global_avgpool(Var<T> x) {
  const Shape& xs = x.shape();
  if (xs.size() != 4) throw ArgumentError("global_avgpool: input must be [B,C,H,W]");
  const std::size_t planes = xs[0] * xs[1], plane = xs[2] * xs[3];
  Tensor<T> out({xs[0], xs[1]});
  const T* xv = x.value().data();
  for (std::size_t p = 0; p < planes; ++p) {
    T acc = T(0);
    for (std::size_t i = 0; i < plane; ++i) acc += xv[p * plane + i];
    out[p] = acc / static_cast<T>(plane);
  }
  return x.tape->record(
      std::move(out), {x},
      [xi = x.id, planes, plane](Tape<T>& t, std::size_t self) {
        auto g = t.grad(self);
        auto gx = t.grad(xi);
        const T inv = T(1) / static_cast<T>(plane);
        for (std::size_t p = 0; p < planes; ++p)
          for (std::size_t i = 0; i < plane; ++i) gx[p * plane + i] += g[p] * inv;
      },
      "global_avgpool");
}

template <typename T>
Var<T> batchnorm(Var<T> x, BatchNormState<T>& s) {
  const Shape& xs = x.shape();
  if (xs.size() != 2 && xs.size() != 4) throw ArgumentError("batchnorm: input must be [B,C] or [B,C,H,W]");
  const std::size_t batch = xs[0], channels = xs[1];
  const std::size_t spatial = xs.size() == 4 ? xs[2] * xs[3] : 1;
  if (s.gamma.numel() != channels) throw ArgumentError("batchnorm: channel count mismatch");
  const bool train = s.mode == NormMode::Train;
  if (train && batch < 2) throw ArgumentError("batchnorm: train mode needs a batch of at least 2");
  const std::size_t count = batch * spatial;
  const T eps = static_cast<T>(s.eps);
  const T* xv = x.value().data();

  std::vector<T> mean(channels), invstd(channels);
  if (train) {
    for (std::size_t c = 0; c < channels; ++c) {
      T acc = T(0);
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < spatial; ++i) acc += xv[(b * channels + c) * spatial + i];
      const T mu = acc / static_cast<T>(count);
      T var = T(0);
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < spatial; ++i) {
          const T d = xv[(b * channels + c) * spatial + i] - mu;
          var += d * d;
        }
      var /= static_cast<T>(count);
      mean[c] = mu;
      invstd[c] = T(1) / std::sqrt(var + eps);
      if (s.update_running) {
        const T m = static_cast<T>(s.momentum);
        const T unbiased = var * static_cast<T>(count) / static_cast<T>(count - 1);
        s.running_mean[c] = (T(1) - m) * s.running_mean[c] + m * mu;
        s.running_var[c] = (T(1) - m) * s.running_var[c] + m * unbiased;
      }
    }
  } else {
    for (std::size_t c = 0; c < channels; ++c) {
      mean[c] = s.running_mean[c];
      invstd[c] = T(1) / std::sqrt(std::max(s.running_var[c], T(0)) + eps);
    }
  }

  Tensor<T> out(xs);
  std::vector<T> xhat(x.numel());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t i = 0; i < spatial; ++i) {
        const std::size_t k = (b * channels + c) * spatial + i;
        xhat[k] = (xv[k] - mean[c]) * invstd[c];
        out[k] = xhat[k] * s.gamma[c] + s.beta[c];
      }
  Tape<T>& tape = *x.tape;
  Var<T> gamma = tape.param(s.gamma);
  Var<T> beta = tape.param(s.beta);
  return tape.record(
      std::move(out), {x, gamma, beta},
      [xi = x.id, gi = gamma.id, bi = beta.id, batch, channels, spatial, count, train,
       invstd = std::move(invstd), xhat = std::move(xhat)](Tape<T>& t, std::size_t self) {
        auto g = t.grad(self);
        const auto& gam = t.value(gi);
        std::vector<T> sum_g(channels, T(0)), sum_gx(channels, T(0));
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t c = 0; c < channels; ++c)
            for (std::size_t i = 0; i < spatial; ++i) {
              const std::size_t k = (b * channels + c) * spatial + i;
              sum_g[c] += g[k];
              sum_gx[c] += g[k] * xhat[k];
            }
        if (t.requires_grad(gi)) {
          auto gg = t.grad(gi);
          for (std::size_t c = 0; c < channels; ++c) gg[c] += sum_gx[c];
        }
        if (t.requires_grad(bi)) {
          auto gb = t.grad(bi);
          for (std::size_t c = 0; c < channels; ++c) gb[c] += sum_g[c];
        }
        if (t.requires_grad(xi)) {
          auto gx = t.grad(xi);
          const T n = static_cast<T>(count);
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t c = 0; c < channels; ++c) {
              const T k1 = gam[c] * invstd[c];
              for (std::size_t i = 0; i < spatial; ++i) {
                const std::size_t k = (b * channels + c) * spatial + i;
                if (train)
                  gx[k] += k1 * (g[k] - sum_g[c] / n - xhat[k] * sum_gx[c] / n);
                else
                  gx[k] += k1 * g[k];
              }
            }
        }
      },
      "batchnorm");
}

template <typename T>
Var<T> linear(Var<T> x, LinearParams<T>& p) {
  if (x.value().rank() != 2 || x.shape()[1] != p.weight.dim(1))
    throw ArgumentError("linear: input " + shape_to_string(x.shape()) + " does not match weight " +
                        shape_to_string(p.weight.shape()));
  Tape<T>& tape = *x.tape;
  Var<T> y = ops::matmul(x, tape.param(p.weight), false, true);
  if (!p.bias) return y;
  const std::size_t batch = x.shape()[0], out = p.weight.dim(0);
  Var<T> b = tape.param(*p.bias);
  Tensor<T> v = y.value();
  for (std::size_t i = 0; i < batch; ++i)
    for (std::size_t j = 0; j < out; ++j) v[i * out + j] += b.value()[j];
  return tape.record(
      std::move(v), {y, b},
      [yi = y.id, bi = b.id, batch, out](Tape<T>& t, std::size_t self) {
        auto g = t.grad(self);
        if (t.requires_grad(yi)) {
          auto gy = t.grad(yi);
          for (std::size_t i = 0; i < g.size(); ++i) gy[i] += g[i];
        }
        if (t.requires_grad(bi)) {
          auto gb = t.grad(bi);
          for (std::size_t i = 0; i < batch; ++i)
            for (std::size_t j = 0; j < out; ++j) gb[j] += g[i * out + j];
        }
      },
      "linear_bias");
}

template <typename T>
ConvBlock<T> ConvBlock<T>::create(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
                                  std::size_t padding, std::size_t groups, bool relu, Rng& rng) {
  ConvBlock b;
  b.conv = Conv2dParams<T>::create(in, out, kernel, stride, padding, groups, false, rng);
  b.norm = BatchNormState<T>::create(out);
  b.relu = relu;
  return b;
}

template <typename T>
Var<T> ConvBlock<T>::forward(Var<T> x) {
  Var<T> y = batchnorm(conv2d(x, conv), norm);
  return relu ? ops::relu(y) : y;
}

template <typename T>
void ConvBlock<T>::collect(const std::string& prefix, NamedTensors<T>& out) {
  conv.collect(prefix + ".conv", out);
  norm.collect(prefix + ".bn", out);
}

#define MSINET_INSTANTIATE_LAYERS(T)                                                                  \
  template void fill_normal(Tensor<T>&, double, Rng&);                                                \
  template struct Conv2dParams<T>;                                                                    \
  template struct BatchNormState<T>;                                                                  \
  template struct LinearParams<T>;                                                                    \
  template struct ConvBlock<T>;                                                                       \
  template Var<T> conv2d(Var<T>, Var<T>, std::optional<Var<T>>, std::size_t, std::size_t, std::size_t); \
  template Var<T> conv2d(Var<T>, Conv2dParams<T>&);                                                   \
  template Var<T> depthwise_conv2d(Var<T>, Conv2dParams<T>&);                                         \
  template Var<T> maxpool2d(Var<T>, std::size_t, std::size_t, std::size_t);                           \
  template Var<T> avgpool2d(Var<T>, std::size_t, std::size_t);                                        \
  template Var<T> global_avgpool(Var<T>);                                                             \
  template Var<T> batchnorm(Var<T>, BatchNormState<T>&);                                              \
  template Var<T> linear(Var<T>, LinearParams<T>&);

MSINET_INSTANTIATE_LAYERS(float)
MSINET_INSTANTIATE_LAYERS(double)

}  // namespace msinet
