#pragma once

#include <initializer_list>
#include <string>

#include "erienet/tensor.hpp"

namespace erienet::detail {

/// Active tape if any input needs a gradient, otherwise null.
template <typename T>
Tape<T>* recording_tape(std::initializer_list<const Tensor<T>*> inputs) {
  Tape<T>* tape = active_tape<T>();
  if (tape == nullptr) return nullptr;
  for (const Tensor<T>* t : inputs) {
    if (t != nullptr && t->defined() && t->requires_grad()) return tape;
  }
  return nullptr;
}

inline void require(bool ok, const std::string& message) {
  if (!ok) throw ShapeError(message);
}

}  // namespace erienet::detail
