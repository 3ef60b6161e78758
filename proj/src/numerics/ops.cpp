#include "msinet/numerics/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "gemm.hpp"
#include "msinet/error.hpp"

namespace msinet::ops {
namespace {

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.tape != b.tape) throw ArgumentError(std::string(op) + ": operands live on different tapes");
  if (a.shape() != b.shape())
    throw ArgumentError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                        shape_to_string(b.shape()));
}

// Splits a shape around `axis` into (outer, extent, inner) strides.
struct AxisView {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisView axis_view(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size())
    throw ArgumentError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for shape " +
                        shape_to_string(shape));
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= shape[i];
  v.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

template <typename T>
Var<T> unary(Var<T> a, Tensor<T> out, const char* op, std::vector<T> local_grad) {
  const std::size_t ai = a.id;
  return a.tape->record(
      std::move(out), {a},
      [ai, lg = std::move(local_grad)](Tape<T>& t, std::size_t self) {
        auto g = t.grad(self);
        auto ga = t.grad(ai);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * lg[i];
      },
      op);
}

}  // namespace

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same_shape(a, b, "add");
  Tensor<T> out(a.shape());
  auto x = a.value().values(), y = b.value().values();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x[i] + y[i];
  return a.tape->record(
      std::move(out), {a, b},
      [ai = a.id, bi = b.id](Tape<T>& t, std::size_t self) {
        auto g = t.grad(self);
        for (auto id : {ai, bi}) {
          if (!t.requires_grad(id)) continue;
          auto gx = t.grad(id);
          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        }
      },
      "add");
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  require_same_shape(a, b, "sub");
  Tensor<T> out(a.shape());
  auto x = a.value().values(), y = b.value().values();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x[i] - y[i];
  return a.tape->record(
      std::move(out), {a, b},
      [ai = a.id, bi = b.id](Tape<T>& t, std::size_t self) {
        auto g = t.grad(self);
        if (t.requires_grad(ai)) {
          auto gx = t.grad(ai);
          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        }
        if (t.requires_grad(bi)) {
          auto gy = t.grad(bi);
          for (std::size_t i = 0; i < g.size(); ++i) gy[i] -= g[i];
        }
      },
      "sub");
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_same_shape(a, b, "mul");
  Tensor<T> out(a.shape());
  auto x = a.value().values(), y = b.value().values();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x[i] * y[i];
  return a.tape->record(
      std::move(out), {a, b},
      [ai = a.id, bi = b.id](Tape<T>& t, std::size_t self) {
        auto g = t.grad(self);
        auto x = t.value(ai).values(), y = t.value(bi).values();
        if (t.requires_grad(ai)) {
          auto gx = t.grad(ai);
          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i];
        }
        if (t.requires_grad(bi)) {
          auto gy = t.grad(bi);
          for (std::size_t i = 0; i < g.size(); ++i) gy[i] += g[i] * x[i];
        }
      },
      "mul");
}

template <typename T>
Var<T> scale(Var<T> a, T factor) {
  Tensor<T> out(a.shape());
  auto x = a.value().values();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x[i] * factor;
  return a.tape->record(
      std::move(out), {a},
      [ai = a.id, factor](Tape<T>& t, std::size_t self) {
        auto g = t.grad(self);
        auto gx = t.grad(ai);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factor;
      },
      "scale");
}

template <typename T>
Var<T> add_scalar(Var<T> a, T offset) {
  Tensor<T> out(a.shape());
  auto x = a.value().values();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x[i] + offset;
  return a.tape->record(
      std::move(out), {a},
      [ai = a.id](Tape<T>& t, std::size_t self) {
        auto g = t.grad(self);
        auto gx = t.grad(ai);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      },
      "add_scalar");
}

template <typename T>
Var<T> relu(Var<T> a) {
  Tensor<T> out(a.shape());
  auto x = a.value().values();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
  return a.tape->record(
      std::move(out), {a},
      [ai = a.id](Tape<T>& t, std::size_t self) {
        auto g = t.grad(self);
        auto x = t.value(ai).values();
        auto gx = t.grad(ai);
        for (std::size_t i = 0; i < g.size(); ++i)
          if (x[i] > T(0)) gx[i] += g[i];
      },
      "relu");
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
  Tensor<T> out(a.shape());
  auto x = a.value().values();
  std::vector<T> lg(out.numel());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const T s = x[i] >= T(0) ? T(1) / (T(1) + std::exp(-x[i])) : std::exp(x[i]) / (T(1) + std::exp(x[i]));
    out[i] = s;
    lg[i] = s * (T(1) - s);
  }
  return unary(a, std::move(out), "sigmoid", std::move(lg));
}

template <typename T>
Var<T> sum(Var<T> a) {
  T acc = T(0);
  for (T v : a.value().values()) acc += v;
  return a.tape->record(
      Tensor<T>({1}, acc), {a},
      [ai = a.id](Tape<T>& t, std::size_t self) {
        const T g = t.grad(self)[0];
        for (auto& gx : t.grad(ai)) gx += g;
      },
      "sum");
}

template <typename T>
Var<T> mean(Var<T> a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
Var<T> dot(Var<T> a, Var<T> b) {
  require_same_shape(a, b, "dot");
  auto x = a.value().values(), y = b.value().values();
  T acc = T(0);
  for (std::size_t i = 0; i < x.size(); ++i) acc += x[i] * y[i];
  return a.tape->record(
      Tensor<T>({1}, acc), {a, b},
      [ai = a.id, bi = b.id](Tape<T>& t, std::size_t self) {
        const T g = t.grad(self)[0];
        auto x = t.value(ai).values(), y = t.value(bi).values();
        if (t.requires_grad(ai)) {
          auto gx = t.grad(ai);
          for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g * y[i];
        }
        if (t.requires_grad(bi)) {
          auto gy = t.grad(bi);
          for (std::size_t i = 0; i < gy.size(); ++i) gy[i] += g * x[i];
        }
      },
      "dot");
}

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw ArgumentError("reshape: cannot view " + shape_to_string(a.shape()) + " as " + shape_to_string(shape));
  Tensor<T> out(std::move(shape), std::vector<T>(a.value().values().begin(), a.value().values().end()));
  return a.tape->record(
      std::move(out), {a},
      [ai = a.id](Tape<T>& t, std::size_t self) {
        auto g = t.grad(self);
        auto gx = t.grad(ai);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      },
      "reshape");
}

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b, bool transpose_a, bool transpose_b) {
  if (a.value().rank() != 2 || b.value().rank() != 2) throw ArgumentError("matmul: operands must be 2-D");
  const std::size_t m = transpose_a ? a.shape()[1] : a.shape()[0];
  const std::size_t k = transpose_a ? a.shape()[0] : a.shape()[1];
  const std::size_t kb = transpose_b ? b.shape()[1] : b.shape()[0];
  const std::size_t n = transpose_b ? b.shape()[0] : b.shape()[1];
  if (k != kb)
    throw ArgumentError("matmul: inner dimension mismatch " + shape_to_string(a.shape()) + " x " +
                        shape_to_string(b.shape()));
  Tensor<T> out({m, n});
  detail::gemm_acc(transpose_a, transpose_b, m, n, k, a.value().data(), b.value().data(), out.data());
  return a.tape->record(
      std::move(out), {a, b},
      [ai = a.id, bi = b.id, transpose_a, transpose_b, m, n, k](Tape<T>& t, std::size_t self) {
        auto g = t.grad(self);
        T* da = t.requires_grad(ai) ? t.grad(ai).data() : nullptr;
        T* db = t.requires_grad(bi) ? t.grad(bi).data() : nullptr;
        detail::gemm_backward(transpose_a, transpose_b, m, n, k, t.value(ai).data(), t.value(bi).data(), g.data(),
                              da, db);
      },
      "matmul");
}

template <typename T>
Var<T> bmm(Var<T> a, Var<T> b, bool transpose_a, bool transpose_b) {
  if (a.value().rank() != 3 || b.value().rank() != 3) throw ArgumentError("bmm: operands must be 3-D");
  const std::size_t batch = a.shape()[0];
  if (b.shape()[0] != batch) throw ArgumentError("bmm: batch dimension mismatch");
  const std::size_t m = transpose_a ? a.shape()[2] : a.shape()[1];
  const std::size_t k = transpose_a ? a.shape()[1] : a.shape()[2];
  const std::size_t kb = transpose_b ? b.shape()[2] : b.shape()[1];
  const std::size_t n = transpose_b ? b.shape()[1] : b.shape()[2];
  if (k != kb)
    throw ArgumentError("bmm: inner dimension mismatch " + shape_to_string(a.shape()) + " x " +
                        shape_to_string(b.shape()));
  Tensor<T> out({batch, m, n});
  for (std::size_t s = 0; s < batch; ++s)
    detail::gemm_acc(transpose_a, transpose_b, m, n, k, a.value().data() + s * m * k,
                     b.value().data() + s * k * n, out.data() + s * m * n);
  return a.tape->record(
      std::move(out), {a, b},
      [ai = a.id, bi = b.id, transpose_a, transpose_b, batch, m, n, k](Tape<T>& t, std::size_t self) {
        auto g = t.grad(self);
        T* da = t.requires_grad(ai) ? t.grad(ai).data() : nullptr;
        T* db = t.requires_grad(bi) ? t.grad(bi).data() : nullptr;
        for (std::size_t s = 0; s < batch; ++s)
          detail::gemm_backward(transpose_a, transpose_b, m, n, k, t.value(ai).data() + s * m * k,
                                t.value(bi).data() + s * k * n, g.data() + s * m * n, da ? da + s * m * k : nullptr,
                                db ? db + s * k * n : nullptr);
      },
      "bmm");
}

template <typename T>
Var<T> softmax(Var<T> a, std::size_t axis) {
  const AxisView v = axis_view(a.shape(), axis, "softmax");
  Tensor<T> out(a.shape());
  auto x = a.value().values();
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t in = 0; in < v.inner; ++in) {
      const std::size_t base = o * v.extent * v.inner + in;
      T mx = x[base];
      for (std::size_t e = 1; e < v.extent; ++e) mx = std::max(mx, x[base + e * v.inner]);
      T z = T(0);
      for (std::size_t e = 0; e < v.extent; ++e) {
        const T ex = std::exp(x[base + e * v.inner] - mx);
        out[base + e * v.inner] = ex;
        z += ex;
      }
      for (std::size_t e = 0; e < v.extent; ++e) out[base + e * v.inner] /= z;
    }
  return a.tape->record(
      std::move(out), {a},
      [ai = a.id, v](Tape<T>& t, std::size_t self) {
        auto g = t.grad(self);
        auto y = t.value(self).values();
        auto gx = t.grad(ai);
        for (std::size_t o = 0; o < v.outer; ++o)
          for (std::size_t in = 0; in < v.inner; ++in) {
            const std::size_t base = o * v.extent * v.inner + in;
            T s = T(0);
            for (std::size_t e = 0; e < v.extent; ++e) s += g[base + e * v.inner] * y[base + e * v.inner];
            for (std::size_t e = 0; e < v.extent; ++e) {
              const std::size_t i = base + e * v.inner;
              gx[i] += y[i] * (g[i] - s);
            }
          }
      },
      "softmax");
}

template <typename T>
Var<T> l2_normalize(Var<T> a, std::size_t axis, T eps) {
  if (!(eps > T(0))) throw ArgumentError("l2_normalize: eps must be positive");
  const AxisView v = axis_view(a.shape(), axis, "l2_normalize");
  Tensor<T> out(a.shape());
  std::vector<T> norms(v.outer * v.inner);
  auto x = a.value().values();
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t in = 0; in < v.inner; ++in) {
      const std::size_t base = o * v.extent * v.inner + in;
      T ss = T(0);
      for (std::size_t e = 0; e < v.extent; ++e) ss += x[base + e * v.inner] * x[base + e * v.inner];
      const T n = std::sqrt(ss);
      norms[o * v.inner + in] = n;
      const T d = std::max(n, eps);
      for (std::size_t e = 0; e < v.extent; ++e) out[base + e * v.inner] = x[base + e * v.inner] / d;
    }
  return a.tape->record(
      std::move(out), {a},
      [ai = a.id, v, eps, norms = std::move(norms)](Tape<T>& t, std::size_t self) {
        auto g = t.grad(self);
        auto y = t.value(self).values();
        auto gx = t.grad(ai);
        for (std::size_t o = 0; o < v.outer; ++o)
          for (std::size_t in = 0; in < v.inner; ++in) {
            const std::size_t base = o * v.extent * v.inner + in;
            const T n = norms[o * v.inner + in];
            if (n > eps) {
              T yg = T(0);
              for (std::size_t e = 0; e < v.extent; ++e) yg += y[base + e * v.inner] * g[base + e * v.inner];
              for (std::size_t e = 0; e < v.extent; ++e) {
                const std::size_t i = base + e * v.inner;
                gx[i] += (g[i] - y[i] * yg) / n;
              }
            } else {
              for (std::size_t e = 0; e < v.extent; ++e) gx[base + e * v.inner] += g[base + e * v.inner] / eps;
            }
          }
      },
      "l2_normalize");
}

template <typename T>
Var<T> max_along(Var<T> a, std::size_t axis) {
  const AxisView v = axis_view(a.shape(), axis, "max_along");
  Shape shape = a.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  if (shape.empty()) shape = {1};
  Tensor<T> out(shape);
  std::vector<std::size_t> arg(out.numel());
  auto x = a.value().values();
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t in = 0; in < v.inner; ++in) {
      const std::size_t base = o * v.extent * v.inner + in;
      std::size_t best = base;
      for (std::size_t e = 1; e < v.extent; ++e)
        if (x[base + e * v.inner] > x[best]) best = base + e * v.inner;
      out[o * v.inner + in] = x[best];
      arg[o * v.inner + in] = best;
    }
  return a.tape->record(
      std::move(out), {a},
      [ai = a.id, arg = std::move(arg)](Tape<T>& t, std::size_t self) {
        auto g = t.grad(self);
        auto gx = t.grad(ai);
        for (std::size_t i = 0; i < g.size(); ++i) gx[arg[i]] += g[i];
      },
      "max_along");
}

template <typename T>
Var<T> scale_by(Var<T> x, Var<T> s, std::size_t index) {
  if (index >= s.numel()) throw ArgumentError("scale_by: index out of range");
  const T w = s.value()[index];
  Tensor<T> out(x.shape());
  auto xv = x.value().values();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = xv[i] * w;
  return x.tape->record(
      std::move(out), {x, s},
      [xi = x.id, si = s.id, index](Tape<T>& t, std::size_t self) {
        auto g = t.grad(self);
        const T w = t.value(si)[index];
        if (t.requires_grad(xi)) {
          auto gx = t.grad(xi);
          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * w;
        }
        if (t.requires_grad(si)) {
          auto xv = t.value(xi).values();
          T acc = T(0);
          for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * xv[i];
          t.grad(si)[index] += acc;
        }
      },
      "scale_by");
}

template <typename T>
Var<T> channel_scale(Var<T> x, Var<T> g) {
  const Shape& xs = x.shape();
  if (xs.size() < 2 || g.value().rank() != 2 || g.shape()[0] != xs[0] || g.shape()[1] != xs[1])
    throw ArgumentError("channel_scale: gate " + shape_to_string(g.shape()) + " does not match input " +
                        shape_to_string(xs));
  const std::size_t bc = xs[0] * xs[1];
  const std::size_t spatial = x.numel() / bc;
  Tensor<T> out(xs);
  auto xv = x.value().values();
  auto gv = g.value().values();
  for (std::size_t c = 0; c < bc; ++c)
    for (std::size_t s = 0; s < spatial; ++s) out[c * spatial + s] = xv[c * spatial + s] * gv[c];
  return x.tape->record(
      std::move(out), {x, g},
      [xi = x.id, gi = g.id, bc, spatial](Tape<T>& t, std::size_t self) {
        auto gy = t.grad(self);
        auto xv = t.value(xi).values();
        auto gv = t.value(gi).values();
        if (t.requires_grad(xi)) {
          auto gx = t.grad(xi);
          for (std::size_t c = 0; c < bc; ++c)
            for (std::size_t s = 0; s < spatial; ++s) gx[c * spatial + s] += gy[c * spatial + s] * gv[c];
        }
        if (t.requires_grad(gi)) {
          auto gg = t.grad(gi);
          for (std::size_t c = 0; c < bc; ++c) {
            T acc = T(0);
            for (std::size_t s = 0; s < spatial; ++s) acc += gy[c * spatial + s] * xv[c * spatial + s];
            gg[c] += acc;
          }
        }
      },
      "channel_scale");
}

template <typename T>
Var<T> select_rows(Var<T> x, std::span<const std::size_t> rows) {
  if (x.value().rank() < 1 || rows.empty()) throw ArgumentError("select_rows: empty selection");
  const std::size_t n = x.shape()[0];
  const std::size_t row = x.numel() / n;
  Shape shape = x.shape();
  shape[0] = rows.size();
  Tensor<T> out(shape);
  auto xv = x.value().values();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= n) throw ArgumentError("select_rows: row index out of range");
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(rows[r] * row), row, out.data() + r * row);
  }
  return x.tape->record(
      std::move(out), {x},
      [xi = x.id, sel = std::vector<std::size_t>(rows.begin(), rows.end()), row](Tape<T>& t, std::size_t self) {
        auto g = t.grad(self);
        auto gx = t.grad(xi);
        for (std::size_t r = 0; r < sel.size(); ++r)
          for (std::size_t j = 0; j < row; ++j) gx[sel[r] * row + j] += g[r * row + j];
      },
      "select_rows");
}

template <typename T>
Var<T> gather(Var<T> x, std::span<const std::size_t> flat_indices) {
  if (flat_indices.empty()) throw ArgumentError("gather: empty selection");
  Tensor<T> out({flat_indices.size()});
  for (std::size_t i = 0; i < flat_indices.size(); ++i) {
    if (flat_indices[i] >= x.numel()) throw ArgumentError("gather: index out of range");
    out[i] = x.value()[flat_indices[i]];
  }
  return x.tape->record(
      std::move(out), {x},
      [xi = x.id, idx = std::vector<std::size_t>(flat_indices.begin(), flat_indices.end())](Tape<T>& t,
                                                                                          std::size_t self) {
        auto g = t.grad(self);
        auto gx = t.grad(xi);
        for (std::size_t i = 0; i < idx.size(); ++i) gx[idx[i]] += g[i];
      },
      "gather");
}

template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const std::size_t> labels) {
  if (logits.value().rank() != 2) throw ArgumentError("cross_entropy: logits must be [B,K]");
  const std::size_t b = logits.shape()[0], k = logits.shape()[1];
  if (labels.size() != b) throw ArgumentError("cross_entropy: label count does not match batch");
  auto x = logits.value().values();
  std::vector<T> probs(b * k);
  T total = T(0);
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] >= k) throw ArgumentError("cross_entropy: label " + std::to_string(labels[i]) + " out of range");
    const T* row = x.data() + i * k;
    const T mx = *std::max_element(row, row + k);
    T z = T(0);
    for (std::size_t j = 0; j < k; ++j) {
      probs[i * k + j] = std::exp(row[j] - mx);
      z += probs[i * k + j];
    }
    for (std::size_t j = 0; j < k; ++j) probs[i * k + j] /= z;
    total += std::log(z) + mx - row[labels[i]];
  }
  return logits.tape->record(
      Tensor<T>({1}, total / static_cast<T>(b)), {logits},
      [li = logits.id, probs = std::move(probs), lab = std::vector<std::size_t>(labels.begin(), labels.end()), b,
       k](Tape<T>& t, std::size_t self) {
        const T g = t.grad(self)[0] / static_cast<T>(b);
        auto gx = t.grad(li);
        for (std::size_t i = 0; i < b; ++i)
          for (std::size_t j = 0; j < k; ++j)
            gx[i * k + j] += g * (probs[i * k + j] - (j == lab[i] ? T(1) : T(0)));
      },
      "cross_entropy");
}

template <typename T>
Var<T> pairwise_distance(Var<T> x) {
  if (x.value().rank() != 2) throw ArgumentError("pairwise_distance: input must be [B,D]");
  const std::size_t b = x.shape()[0], d = x.shape()[1];
  auto xv = x.value().values();
  Tensor<T> out({b, b});
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = i + 1; j < b; ++j) {
      T ss = T(0);
      for (std::size_t c = 0; c < d; ++c) {
        const T diff = xv[i * d + c] - xv[j * d + c];
        ss += diff * diff;
      }
      const T dist = ss > T(0) ? std::sqrt(ss) : T(0);
      out[i * b + j] = dist;
      out[j * b + i] = dist;
    }
  return x.tape->record(
      std::move(out), {x},
      [xi = x.id, b, d](Tape<T>& t, std::size_t self) {
        auto g = t.grad(self);
        auto dist = t.value(self).values();
        auto xv = t.value(xi).values();
        auto gx = t.grad(xi);
        for (std::size_t i = 0; i < b; ++i)
          for (std::size_t j = 0; j < b; ++j) {
            const T gij = g[i * b + j];
            const T dij = dist[i * b + j];
            if (i == j || gij == T(0) || dij <= T(0)) continue;
            const T f = gij / dij;
            for (std::size_t c = 0; c < d; ++c) {
              const T diff = xv[i * d + c] - xv[j * d + c];
              gx[i * d + c] += f * diff;
              gx[j * d + c] -= f * diff;
            }
          }
      },
      "pairwise_distance");
}

template <typename T>
Var<T> pair_cosine(Var<T> a, Var<T> b, std::span<const std::pair<std::size_t, std::size_t>> pairs, T eps) {
  if (a.value().rank() != 2 || b.value().rank() != 2 || a.shape()[1] != b.shape()[1])
    throw ArgumentError("pair_cosine: operands must be [M,N] and [K,N]");
  if (pairs.empty()) throw ArgumentError("pair_cosine: no pairs");
  const std::size_t n = a.shape()[1];
  auto norms_of = [n](std::span<const T> v, std::size_t rows) {
    std::vector<T> out(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      T ss = T(0);
      for (std::size_t c = 0; c < n; ++c) ss += v[r * n + c] * v[r * n + c];
      out[r] = std::sqrt(ss);
    }
    return out;
  };
  auto na = norms_of(a.value().values(), a.shape()[0]);
  auto nb = norms_of(b.value().values(), b.shape()[0]);
  Tensor<T> out({pairs.size()});
  auto av = a.value().values(), bv = b.value().values();
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    const auto [i, j] = pairs[p];
    if (i >= a.shape()[0] || j >= b.shape()[0]) throw ArgumentError("pair_cosine: row index out of range");
    T acc = T(0);
    for (std::size_t c = 0; c < n; ++c) acc += av[i * n + c] * bv[j * n + c];
    out[p] = acc / (std::max(na[i], eps) * std::max(nb[j], eps));
  }
  return a.tape->record(
      std::move(out), {a, b},
      [ai = a.id, bi = b.id, n, eps, na = std::move(na), nb = std::move(nb),
       prs = std::vector<std::pair<std::size_t, std::size_t>>(pairs.begin(), pairs.end())](Tape<T>& t,
                                                                                          std::size_t self) {
        auto g = t.grad(self);
        auto s = t.value(self).values();
        auto av = t.value(ai).values(), bv = t.value(bi).values();
        const bool ga_on = t.requires_grad(ai), gb_on = t.requires_grad(bi);
        T* ga = ga_on ? t.grad(ai).data() : nullptr;
        T* gb = gb_on ? t.grad(bi).data() : nullptr;
        for (std::size_t p = 0; p < prs.size(); ++p) {
          if (g[p] == T(0)) continue;
          const auto [i, j] = prs[p];
          const T da = std::max(na[i], eps), db = std::max(nb[j], eps);
          const T inv = g[p] / (da * db);
          for (std::size_t c = 0; c < n; ++c) {
            if (ga) {
              T v = inv * bv[j * n + c];
              if (na[i] > eps) v -= g[p] * s[p] * av[i * n + c] / (na[i] * na[i]);
              ga[i * n + c] += v;
            }
            if (gb) {
              T v = inv * av[i * n + c];
              if (nb[j] > eps) v -= g[p] * s[p] * bv[j * n + c] / (nb[j] * nb[j]);
              gb[j * n + c] += v;
            }
          }
        }
      },
      "pair_cosine");
}

#define MSINET_INSTANTIATE_OPS(T)                                                                        \
  template Var<T> add(Var<T>, Var<T>);                                                                   \
  template Var<T> sub(Var<T>, Var<T>);                                                                   \
  template Var<T> mul(Var<T>, Var<T>);                                                                   \
  template Var<T> scale(Var<T>, T);                                                                      \
  template Var<T> add_scalar(Var<T>, T);                                                                 \
  template Var<T> relu(Var<T>);                                                                          \
  template Var<T> sigmoid(Var<T>);                                                                       \
  template Var<T> sum(Var<T>);                                                                           \
  template Var<T> mean(Var<T>);                                                                          \
  template Var<T> dot(Var<T>, Var<T>);                                                                   \
  template Var<T> reshape(Var<T>, Shape);                                                                \
  template Var<T> matmul(Var<T>, Var<T>, bool, bool);                                                    \
  template Var<T> bmm(Var<T>, Var<T>, bool, bool);                                                       \
  template Var<T> softmax(Var<T>, std::size_t);                                                          \
  template Var<T> l2_normalize(Var<T>, std::size_t, T);                                                  \
  template Var<T> max_along(Var<T>, std::size_t);                                                        \
  template Var<T> scale_by(Var<T>, Var<T>, std::size_t);                                                 \
  template Var<T> channel_scale(Var<T>, Var<T>);                                                         \
  template Var<T> select_rows(Var<T>, std::span<const std::size_t>);                                     \
  template Var<T> gather(Var<T>, std::span<const std::size_t>);                                          \
  template Var<T> cross_entropy(Var<T>, std::span<const std::size_t>);                                   \
  template Var<T> pairwise_distance(Var<T>);                                                             \
  template Var<T> pair_cosine(Var<T>, Var<T>, std::span<const std::pair<std::size_t, std::size_t>>, T);

MSINET_INSTANTIATE_OPS(float)
MSINET_INSTANTIATE_OPS(double)

}  // namespace msinet::ops
