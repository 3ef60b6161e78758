#include "msinet/numerics/optim.hpp"

#include <cmath>
#include <string>

#include "msinet/error.hpp"

namespace msinet {
namespace {

template <typename T>
void prepare_buffers(std::span<Tensor<T>* const> params, std::vector<std::vector<T>>& buffers, const char* who) {
  if (buffers.empty()) {
    buffers.reserve(params.size());
    for (const auto* p : params) buffers.emplace_back(p->numel(), T(0));
    return;
  }
  if (buffers.size() != params.size())
    throw ArgumentError(std::string(who) + ": parameter count changed from " + std::to_string(buffers.size()) +
                        " to " + std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i)
    if (buffers[i].size() != params[i]->numel())
      throw ArgumentError(std::string(who) + ": shape mismatch for parameter " + std::to_string(i));
}

template <typename T>
void check_finite_grad(const Tensor<T>& p, std::size_t index, const char* who) {
  for (T g : p.grad())
    if (!std::isfinite(g))
      throw NonFiniteError(std::string(who) + ": non-finite gradient in parameter " + std::to_string(index));
}

}  // namespace

template <typename T>
void sgd_step(std::span<Tensor<T>* const> params, SgdState<T>& state) {
  prepare_buffers(params, state.momentum, "sgd_step");
  const T lr = static_cast<T>(state.options.lr);
  const T mu = static_cast<T>(state.options.momentum);
  const T wd = static_cast<T>(state.options.weight_decay);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& p = *params[i];
    check_finite_grad(p, i, "sgd_step");
    auto g = p.grad();
    const bool has_g = !g.empty();
    auto& buf = state.momentum[i];
    for (std::size_t j = 0; j < p.numel(); ++j) {
      const T gj = has_g ? g[j] : T(0);
      buf[j] = mu * buf[j] + gj;
      p[j] -= lr * (buf[j] + wd * p[j]);
    }
  }
  ++state.steps;
}

template <typename T>
void adam_step(std::span<Tensor<T>* const> params, AdamState<T>& state) {
  const auto& o = state.options;
  if (!(o.beta1 > 0.0 && o.beta1 < 1.0 && o.beta2 > 0.0 && o.beta2 < 1.0))
    throw ArgumentError("adam_step: betas must lie in (0,1)");
  prepare_buffers(params, state.first_moment, "adam_step");
  prepare_buffers(params, state.second_moment, "adam_step");
  ++state.steps;
  const T b1 = static_cast<T>(o.beta1), b2 = static_cast<T>(o.beta2);
  const T c1 = T(1) - static_cast<T>(std::pow(o.beta1, static_cast<double>(state.steps)));
  const T c2 = T(1) - static_cast<T>(std::pow(o.beta2, static_cast<double>(state.steps)));
  const T lr = static_cast<T>(o.lr), eps = static_cast<T>(o.eps), wd = static_cast<T>(o.weight_decay);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& p = *params[i];
    check_finite_grad(p, i, "adam_step");
    auto g = p.grad();
    const bool has_g = !g.empty();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    for (std::size_t j = 0; j < p.numel(); ++j) {
      const T gj = (has_g ? g[j] : T(0)) + wd * p[j];
      m[j] = b1 * m[j] + (T(1) - b1) * gj;
      v[j] = b2 * v[j] + (T(1) - b2) * gj * gj;
      p[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps);
    }
  }
}

template <typename T>
void zero_grads(std::span<Tensor<T>* const> params) {
  for (auto* p : params) p->zero_grad();
}

template void sgd_step(std::span<Tensor<float>* const>, SgdState<float>&);
template void sgd_step(std::span<Tensor<double>* const>, SgdState<double>&);
template void adam_step(std::span<Tensor<float>* const>, AdamState<float>&);
template void adam_step(std::span<Tensor<double>* const>, AdamState<double>&);
template void zero_grads(std::span<Tensor<float>* const>);
template void zero_grads(std::span<Tensor<double>* const>);

}  // namespace msinet
