#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <string_view>
#include <vector>

#include "msinet/numerics/tensor.hpp"

namespace msinet {

template <typename T>
class Tape;

// Handle to a value recorded on a tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t numel() const { return value().numel(); }
  bool requires_grad() const;
};

// Define-by-run reverse-mode tape. Nodes are appended in evaluation order, so
// the append order is already a topological order and backward() walks it in
// reverse. A tape is single-threaded and lives for one forward/backward pair.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaf referring to an external tensor. Gradients accumulate into the
  // tensor's own grad buffer when it requires grad and params are not frozen.
  Var<T> param(Tensor<T>& tensor);
  // External leaf that never receives gradient.
  Var<T> frozen(const Tensor<T>& tensor);
  // Owned leaf without gradient.
  Var<T> constant(Tensor<T> value);

  // Append an op output. `backward` reads grad(self) and accumulates into the
  // parents' grads; it is dropped when no parent requires grad.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> parents, BackwardFn backward,
                std::string_view op);
  Var<T> record(Tensor<T> value, const std::vector<Var<T>>& parents, BackwardFn backward,
                std::string_view op);

  // While frozen, param() behaves like frozen().
  void freeze_params(bool on) noexcept { params_frozen_ = on; }
  bool params_frozen() const noexcept { return params_frozen_; }

  const Tensor<T>& value(std::size_t id) const { return node_value(nodes_.at(id)); }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  // Gradient buffer of a node; allocated (zeroed) on first access.
  std::span<T> grad(std::size_t id);
  bool has_grad(std::size_t id) const;
  std::span<const T> grad_view(std::size_t id) const;

  // Seeds d(loss)/d(loss) = 1 and propagates to every reachable leaf.
  void backward(Var<T> loss);

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    const Tensor<T>* external = nullptr;
    Tensor<T>* sink = nullptr;
    Tensor<T> owned;
    std::vector<T> grad;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    std::string_view op;
    bool requires_grad = false;
  };

  static const Tensor<T>& node_value(const Node& n) { return n.external ? *n.external : n.owned; }
  Var<T> push(Node node);

  std::deque<Node> nodes_;
  bool params_frozen_ = false;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape->value(id);
}

template <typename T>
bool Var<T>::requires_grad() const {
  return tape->requires_grad(id);
}

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace msinet
