#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "msinet/numerics/tensor.hpp"

namespace msinet {

struct SgdOptions {
  double lr = 0.025;
  double momentum = 0.9;
  double weight_decay = 0.0;
};

// p <- p - lr * (buf + weight_decay * p), buf <- momentum * buf + g.
template <typename T>
struct SgdState {
  SgdOptions options;
  std::vector<std::vector<T>> momentum;
  std::size_t steps = 0;
};

struct AdamOptions {
  double lr = 0.002;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

template <typename T>
struct AdamState {
  AdamOptions options;
  std::vector<std::vector<T>> first_moment;
  std::vector<std::vector<T>> second_moment;
  std::size_t steps = 0;
};

// Both steps read each parameter's grad buffer; a parameter that never
// received a gradient is treated as having a zero gradient. The parameter
// list must keep the same order and shapes across calls.
template <typename T>
void sgd_step(std::span<Tensor<T>* const> params, SgdState<T>& state);

template <typename T>
void adam_step(std::span<Tensor<T>* const> params, AdamState<T>& state);

template <typename T>
void zero_grads(std::span<Tensor<T>* const> params);

}  // namespace msinet
