#pragma once

#include <cstddef>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "msinet/numerics/tape.hpp"

namespace msinet {

using Rng = std::mt19937_64;

// A parameter or buffer reachable from a model, in a fixed traversal order.
template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T>* tensor = nullptr;
  bool trainable = true;
};

template <typename T>
using NamedTensors = std::vector<NamedTensor<T>>;

// Fills with N(0, stddev^2) draws in row-major order.
template <typename T>
void fill_normal(Tensor<T>& t, double stddev, Rng& rng);

template <typename T>
struct Conv2dParams {
  Tensor<T> weight;  // [out, in/groups, kH, kW]
  std::optional<Tensor<T>> bias;
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;

  // Kaiming-normal weights (fan-out, ReLU gain), zero bias.
  static Conv2dParams create(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
                             std::size_t padding, std::size_t groups, bool with_bias, Rng& rng);
  std::size_t in_channels() const { return weight.dim(1) * groups; }
  std::size_t out_channels() const { return weight.dim(0); }
  void collect(const std::string& prefix, NamedTensors<T>& out);
};

enum class NormMode { Train, Eval };

template <typename T>
struct BatchNormState {
  Tensor<T> gamma, beta;
  Tensor<T> running_mean, running_var;
  double momentum = 0.1;
  double eps = 1e-5;
  NormMode mode = NormMode::Train;
  // Train mode only: whether batch statistics are folded into the running ones.
  bool update_running = true;

  static BatchNormState create(std::size_t channels);
  void collect(const std::string& prefix, NamedTensors<T>& out);
};

template <typename T>
struct LinearParams {
  Tensor<T> weight;  // [out, in]
  std::optional<Tensor<T>> bias;

  static LinearParams create(std::size_t in, std::size_t out, bool with_bias, double stddev, Rng& rng);
  void collect(const std::string& prefix, NamedTensors<T>& out);
};

// Cross-correlation. x [B,C,H,W], w [O,C/groups,kH,kW]; output spatial size
// floor((H + 2p - kH) / stride) + 1.
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> weight, std::optional<Var<T>> bias, std::size_t stride, std::size_t padding,
              std::size_t groups);
template <typename T>
Var<T> conv2d(Var<T> x, Conv2dParams<T>& p);
// conv2d restricted to groups == in == out.
template <typename T>
Var<T> depthwise_conv2d(Var<T> x, Conv2dParams<T>& p);

// Window maxima over a -inf padded input; gradient to the lowest linear index among ties.
template <typename T>
Var<T> maxpool2d(Var<T> x, std::size_t kernel, std::size_t stride, std::size_t padding = 0);
template <typename T>
Var<T> avgpool2d(Var<T> x, std::size_t kernel, std::size_t stride);
// [B,C,H,W] -> [B,C]
template <typename T>
Var<T> global_avgpool(Var<T> x);

// Per-channel normalization of [B,C] or [B,C,H,W].
template <typename T>
Var<T> batchnorm(Var<T> x, BatchNormState<T>& s);

// x [B,in] -> x W^T + b
template <typename T>
Var<T> linear(Var<T> x, LinearParams<T>& p);

// conv -> batchnorm -> optional ReLU.
template <typename T>
struct ConvBlock {
  Conv2dParams<T> conv;
  BatchNormState<T> norm;
  bool relu = true;

  static ConvBlock create(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
                          std::size_t padding, std::size_t groups, bool relu, Rng& rng);
  Var<T> forward(Var<T> x);
  void collect(const std::string& prefix, NamedTensors<T>& out);
};

}  // namespace msinet
