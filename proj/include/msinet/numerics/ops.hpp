#pragma once

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "msinet/numerics/tape.hpp"

// Differentiable tensor operations. Every op records its output on the tape
// of its first argument and throws ArgumentError on shape mismatch.
namespace msinet::ops {

template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> scale(Var<T> a, T factor);
template <typename T> Var<T> add_scalar(Var<T> a, T offset);
template <typename T> Var<T> relu(Var<T> a);
template <typename T> Var<T> sigmoid(Var<T> a);

template <typename T> Var<T> sum(Var<T> a);
template <typename T> Var<T> mean(Var<T> a);
template <typename T> Var<T> dot(Var<T> a, Var<T> b);
template <typename T> Var<T> reshape(Var<T> a, Shape shape);

// [M,K] x [K,N] -> [M,N]; the flags read the stored operand transposed.
template <typename T> Var<T> matmul(Var<T> a, Var<T> b, bool transpose_a = false, bool transpose_b = false);
// Batched matmul over a shared leading dimension.
template <typename T> Var<T> bmm(Var<T> a, Var<T> b, bool transpose_a = false, bool transpose_b = false);

template <typename T> Var<T> softmax(Var<T> a, std::size_t axis);
// x / max(||x||, eps) along `axis`.
template <typename T> Var<T> l2_normalize(Var<T> a, std::size_t axis, T eps = T(1e-12));
// Maximum along `axis` (axis removed). Gradient goes to the lowest index among ties.
template <typename T> Var<T> max_along(Var<T> a, std::size_t axis);

// x * s[index] for a scalar picked out of another tensor.
template <typename T> Var<T> scale_by(Var<T> x, Var<T> s, std::size_t index);
// x[B,C,...] * g[B,C], broadcast over trailing dims.
template <typename T> Var<T> channel_scale(Var<T> x, Var<T> g);

// Rows of the leading dimension, in the given order (repeats allowed).
template <typename T> Var<T> select_rows(Var<T> x, std::span<const std::size_t> rows);
// Flat elements as a 1-D tensor.
template <typename T> Var<T> gather(Var<T> x, std::span<const std::size_t> flat_indices);

// Mean over rows of -log softmax(logits)[label].
template <typename T> Var<T> cross_entropy(Var<T> logits, std::span<const std::size_t> labels);
// Euclidean distances between all rows of x[B,D] -> [B,B]; zero distances get zero gradient.
template <typename T> Var<T> pairwise_distance(Var<T> x);
// Cosine similarity of a[i] and b[j] for each (i, j) pair -> [P].
template <typename T>
Var<T> pair_cosine(Var<T> a, Var<T> b, std::span<const std::pair<std::size_t, std::size_t>> pairs,
                   T eps = T(1e-12));

}  // namespace msinet::ops
