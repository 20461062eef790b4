#include "erienet/tensor.hpp"

#include <algorithm>
#include <unordered_set>

namespace erienet {

std::string to_string(const Shape& s) {
  return "(" + std::to_string(s.n) + ", " + std::to_string(s.c) + ", " + std::to_string(s.h) +
         ", " + std::to_string(s.w) + ")";
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : node_(std::make_shared<detail::TensorNode<T>>()) {
  node_->shape = shape;
  node_->data.assign(shape.numel(), fill);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values)
    : node_(std::make_shared<detail::TensorNode<T>>()) {
  if (values.size() != shape.numel()) {
    throw ShapeError("tensor data length " + std::to_string(values.size()) +
                     " does not match shape " + to_string(shape));
  }
  node_->shape = shape;
  node_->data = std::move(values);
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) {
    throw ShapeError("item() on tensor of shape " + to_string(shape()));
  }
  return node_->data[0];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool on) {
  node_->requires_grad = on;
  return *this;
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  return grad_buffer();
}

template <typename T>
std::span<T> Tensor<T>::grad_buffer() const {
  if (node_->grad.size() != node_->data.size()) {
    node_->grad.assign(node_->data.size(), T(0));
  }
  return node_->grad;
}

template <typename T>
void Tensor<T>::zero_grad() const {
  std::fill(node_->grad.begin(), node_->grad.end(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  return Tensor<T>(node_->shape, node_->data);
}

template <typename T>
void Tape<T>::record(std::string_view op, std::vector<Tensor<T>> inputs, Tensor<T> output,
                     std::function<void()> backward) {
  output.mark_interior();
  entries_.push_back(Entry{op, std::move(inputs), std::move(output), std::move(backward)});
}

template <typename T>
std::size_t Tape<T>::backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) {
    throw ShapeError("backward() requires a scalar loss, got shape " + to_string(loss.shape()));
  }
  for (auto& e : entries_) {
    auto g = e.output.grad_buffer();
    std::fill(g.begin(), g.end(), T(0));
  }
  if (loss.requires_grad()) {
    loss.grad_buffer()[0] = loss.is_leaf() ? loss.grad_buffer()[0] + T(1) : T(1);
  }
  std::size_t visited = 0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    it->backward();
    ++visited;
  }
  return visited;
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace erienet
