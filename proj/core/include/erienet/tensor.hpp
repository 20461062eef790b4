#pragma once

#include <array>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "erienet/error.hpp"

namespace erienet {

/// (batch, channels, height, width); row-major contiguous with width fastest.
struct Shape {
  std::size_t n = 0, c = 0, h = 0, w = 0;

  constexpr std::size_t numel() const noexcept { return n * c * h * w; }
  constexpr std::size_t plane() const noexcept { return h * w; }
  friend constexpr bool operator==(const Shape&, const Shape&) = default;
};

std::string to_string(const Shape& s);

namespace detail {
template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first written
  bool requires_grad = false;
  bool leaf = true;
};
}  // namespace detail

/// Shared handle to a dense 4-D array. Copies alias the same storage, the
/// same way a framework tensor does; `clone()` makes an independent copy.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> values);

  static Tensor scalar(T v) { return Tensor(Shape{1, 1, 1, 1}, v); }

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->shape.numel(); }
  std::size_t batch() const { return node_->shape.n; }
  std::size_t channels() const { return node_->shape.c; }
  std::size_t height() const { return node_->shape.h; }
  std::size_t width() const { return node_->shape.w; }

  std::span<const T> data() const { return node_->data; }
  /// Direct write access; only parameters and freshly created tensors should be mutated.
  std::span<T> mutable_data() const { return node_->data; }

  std::size_t offset(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    const Shape& s = node_->shape;
    return ((n * s.c + c) * s.h + y) * s.w + x;
  }
  T at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    return node_->data[offset(n, c, y, x)];
  }
  T& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) {
    return node_->data[offset(n, c, y, x)];
  }
  /// Value of a single-element tensor.
  T item() const;

  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
  /// Marks a leaf tensor as trainable.
  Tensor& set_requires_grad(bool on = true);
  bool is_leaf() const noexcept { return node_->leaf; }

  bool has_grad() const noexcept { return node_ && !node_->grad.empty(); }
  /// Gradient buffer; zeros when nothing has been accumulated yet.
  std::span<const T> grad() const;
  /// Gradient buffer, allocated (zero-filled) on first access.
  std::span<T> grad_buffer() const;
  void zero_grad() const;

  Tensor clone() const;
  /// Copy in the other precision (no gradient state).
  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(node_->data.begin(), node_->data.end());
    return Tensor<U>(node_->shape, std::move(out));
  }

  bool same_storage(const Tensor& other) const noexcept { return node_ == other.node_; }

  /// Marks this tensor as an interior graph value produced by a recorded op.
  void mark_interior() const { node_->leaf = false; node_->requires_grad = true; }

 private:
  std::shared_ptr<detail::TensorNode<T>> node_;
};

/// Ordered record of differentiable operations executed while it was active.
template <typename T>
class Tape {
 public:
  struct Entry {
    std::string_view op;
    std::vector<Tensor<T>> inputs;
    Tensor<T> output;
    std::function<void()> backward;
  };

  void record(std::string_view op, std::vector<Tensor<T>> inputs, Tensor<T> output,
              std::function<void()> backward);

  /// Seeds d(loss)/d(loss) = 1 and replays the tape in reverse. Interior
  /// gradients are reset first; leaf gradients accumulate across calls.
  /// Returns the number of entries visited.
  std::size_t backward(const Tensor<T>& loss);

  std::size_t size() const noexcept { return entries_.size(); }
  const std::vector<Entry>& entries() const noexcept { return entries_; }
  void clear() noexcept { entries_.clear(); }

 private:
  std::vector<Entry> entries_;
};

/// Thread-local tape that ops record onto; null means no recording.
template <typename T>
Tape<T>*& active_tape() {
  thread_local Tape<T>* slot = nullptr;
  return slot;
}

/// Makes `tape` the active tape for the current thread for the guard's lifetime.
template <typename T>
class Recording {
 public:
  explicit Recording(Tape<T>& tape) : previous_(active_tape<T>()) { active_tape<T>() = &tape; }
  ~Recording() { active_tape<T>() = previous_; }
  Recording(const Recording&) = delete;
  Recording& operator=(const Recording&) = delete;

 private:
  Tape<T>* previous_;
};

/// Suspends recording on the current thread.
template <typename T>
class NoRecording {
 public:
  NoRecording() : previous_(active_tape<T>()) { active_tape<T>() = nullptr; }
  ~NoRecording() { active_tape<T>() = previous_; }
  NoRecording(const NoRecording&) = delete;
  NoRecording& operator=(const NoRecording&) = delete;

 private:
  Tape<T>* previous_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace erienet
