#include "msinet/numerics/tape.hpp"

#include <string>

#include "msinet/error.hpp"

namespace msinet {

template <typename T>
Var<T> Tape<T>::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var<T>{this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::param(Tensor<T>& tensor) {
  if (params_frozen_ || !tensor.requires_grad()) return frozen(tensor);
  Node n;
  n.external = &tensor;
  n.sink = &tensor;
  n.requires_grad = true;
  n.op = "param";
  return push(std::move(n));
}

template <typename T>
Var<T> Tape<T>::frozen(const Tensor<T>& tensor) {
  Node n;
  n.external = &tensor;
  n.op = "frozen";
  return push(std::move(n));
}

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  Node n;
  n.owned = std::move(value);
  n.op = "constant";
  return push(std::move(n));
}

template <typename T>
Var<T> Tape<T>::record(Tensor<T> value, std::initializer_list<Var<T>> parents, BackwardFn backward,
                       std::string_view op) {
  return record(std::move(value), std::vector<Var<T>>(parents), std::move(backward), op);
}

template <typename T>
Var<T> Tape<T>::record(Tensor<T> value, const std::vector<Var<T>>& parents, BackwardFn backward,
                       std::string_view op) {
  if (!value.all_finite())
    throw NonFiniteError("non-finite value produced by op '" + std::string(op) + "' with shape " +
                         shape_to_string(value.shape()));
  Node n;
  n.owned = std::move(value);
  n.op = op;
  n.parents.reserve(parents.size());
  for (const auto& p : parents) {
    if (p.tape != this) throw ArgumentError("op '" + std::string(op) + "' mixes values from different tapes");
    if (p.id >= nodes_.size()) throw InternalError("op '" + std::string(op) + "' references a future node");
    n.parents.push_back(p.id);
    n.requires_grad = n.requires_grad || nodes_[p.id].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  return push(std::move(n));
}

template <typename T>
std::span<T> Tape<T>::grad(std::size_t id) {
  Node& n = nodes_.at(id);
  if (n.sink) return n.sink->grad();
  if (n.grad.size() != node_value(n).numel()) n.grad.assign(node_value(n).numel(), T(0));
  return n.grad;
}

template <typename T>
bool Tape<T>::has_grad(std::size_t id) const {
  const Node& n = nodes_.at(id);
  if (n.sink) return n.sink->has_grad();
  return !n.grad.empty();
}

template <typename T>
std::span<const T> Tape<T>::grad_view(std::size_t id) const {
  const Node& n = nodes_.at(id);
  if (n.sink) return n.sink->grad();
  return n.grad;
}

template <typename T>
void Tape<T>::backward(Var<T> loss) {
  if (loss.tape != this) throw ArgumentError("backward: loss belongs to another tape");
  if (value(loss.id).numel() != 1)
    throw ArgumentError("backward: loss must be a scalar, got shape " + shape_to_string(value(loss.id).shape()));
  if (!nodes_[loss.id].requires_grad) return;
  grad(loss.id)[0] += T(1);
  std::vector<bool> reached(loss.id + 1, false);
  reached[loss.id] = true;
  for (std::size_t id = loss.id + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!reached[id] || !n.backward) continue;
    for (auto p : n.parents) {
      if (p >= id) throw InternalError("cyclic tape: node " + std::to_string(id) + " depends on " + std::to_string(p));
      if (nodes_[p].requires_grad) reached[p] = true;
    }
    n.backward(*this, id);
  }
}

template class Tape<float>;
template class Tape<double>;

}  // namespace msinet
