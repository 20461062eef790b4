#include <algorithm>
#include <cmath>

#include "erienet/ops.hpp"
#include "op_support.hpp"

namespace erienet {
namespace {

void check_broadcast(const Shape& a, const Shape& b, const char* op) {
  auto ok = [](std::size_t da, std::size_t db) { return db == da || db == 1; };
  if (!(ok(a.n, b.n) && ok(a.c, b.c) && ok(a.h, b.h) && ok(a.w, b.w))) {
    throw ShapeError(std::string(op) + ": cannot broadcast " + to_string(b) + " onto " +
                     to_string(a));
  }
}

// Index into the broadcast operand for each element of the full shape.
struct Broadcast {
  Shape a, b;
  std::size_t operator()(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    const std::size_t bn = b.n == 1 ? 0 : n, bc = b.c == 1 ? 0 : c;
    const std::size_t by = b.h == 1 ? 0 : y, bx = b.w == 1 ? 0 : x;
    return ((bn * b.c + bc) * b.h + by) * b.w + bx;
  }
  template <typename F>
  void each(F&& f) const {
    std::size_t i = 0;
    for (std::size_t n = 0; n < a.n; ++n)
      for (std::size_t c = 0; c < a.c; ++c)
        for (std::size_t y = 0; y < a.h; ++y)
          for (std::size_t x = 0; x < a.w; ++x, ++i) f(i, (*this)(n, c, y, x));
  }
};

enum class Binary { add, sub, mul };

template <typename T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, Binary kind, const char* name) {
  check_broadcast(a.shape(), b.shape(), name);
  Broadcast bc{a.shape(), b.shape()};
  Tensor<T> out(a.shape());
  auto ad = a.data();
  auto bd = b.data();
  auto od = out.mutable_data();
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < od.size(); ++i) {
      od[i] = kind == Binary::add ? ad[i] + bd[i] : kind == Binary::sub ? ad[i] - bd[i] : ad[i] * bd[i];
    }
  } else {
    bc.each([&](std::size_t i, std::size_t j) {
      od[i] = kind == Binary::add ? ad[i] + bd[j] : kind == Binary::sub ? ad[i] - bd[j] : ad[i] * bd[j];
    });
  }
  if (Tape<T>* tape = detail::recording_tape<T>({&a, &b})) {
    tape->record(name, {a, b}, out, [a, b, out, bc, kind]() {
      auto g = out.grad();
      if (a.requires_grad()) {
        auto da = a.grad_buffer();
        if (kind == Binary::mul) {
          bc.each([&](std::size_t i, std::size_t j) { da[i] += g[i] * b.data()[j]; });
        } else {
          for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
        }
      }
      if (b.requires_grad()) {
        auto db = b.grad_buffer();
        const T sign = kind == Binary::sub ? T(-1) : T(1);
        if (kind == Binary::mul) {
          bc.each([&](std::size_t i, std::size_t j) { db[j] += g[i] * a.data()[i]; });
        } else {
          bc.each([&](std::size_t i, std::size_t j) { db[j] += sign * g[i]; });
        }
      }
    });
  }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  auto xd = x.data();
  auto od = out.mutable_data();
  for (std::size_t i = 0; i < xd.size(); ++i) od[i] = xd[i] > T(0) ? xd[i] : T(0);
  if (Tape<T>* tape = detail::recording_tape<T>({&x})) {
    tape->record("relu", {x}, out, [x, out]() {
      auto g = out.grad();
      auto xd = x.data();
      auto dx = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (xd[i] > T(0)) dx[i] += g[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  auto xd = x.data();
  auto od = out.mutable_data();
  for (std::size_t i = 0; i < xd.size(); ++i) od[i] = T(1) / (T(1) + std::exp(-xd[i]));
  if (Tape<T>* tape = detail::recording_tape<T>({&x})) {
    tape->record("sigmoid", {x}, out, [x, out]() {
      auto g = out.grad();
      auto s = out.data();
      auto dx = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * s[i] * (T(1) - s[i]);
    });
  }
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, Binary::add, "add");
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, Binary::sub, "sub");
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, Binary::mul, "mul");
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  Tensor<T> out(x.shape());
  auto xd = x.data();
  auto od = out.mutable_data();
  for (std::size_t i = 0; i < xd.size(); ++i) od[i] = xd[i] * factor;
  if (Tape<T>* tape = detail::recording_tape<T>({&x})) {
    tape->record("scale", {x}, out, [x, out, factor]() {
      auto g = out.grad();
      auto dx = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * factor;
    });
  }
  return out;
}

template <typename T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
  if (!(lo <= hi)) throw ArgumentError("clamp: lo must not exceed hi");
  Tensor<T> out(x.shape());
  auto xd = x.data();
  auto od = out.mutable_data();
  for (std::size_t i = 0; i < xd.size(); ++i) od[i] = std::clamp(xd[i], lo, hi);
  if (Tape<T>* tape = detail::recording_tape<T>({&x})) {
    tape->record("clamp", {x}, out, [x, out, lo, hi]() {
      auto g = out.grad();
      auto xd = x.data();
      auto dx = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (xd[i] > lo && xd[i] < hi) dx[i] += g[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = T(0);
  for (T v : x.data()) s += v;
  Tensor<T> out = Tensor<T>::scalar(s);
  if (Tape<T>* tape = detail::recording_tape<T>({&x})) {
    tape->record("sum", {x}, out, [x, out]() {
      const T g = out.grad()[0];
      for (T& d : x.grad_buffer()) d += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  detail::require(x.numel() > 0, "mean of an empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> mean_abs_error(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(), "mean_abs_error: shape mismatch " +
                                              to_string(a.shape()) + " vs " + to_string(b.shape()));
  const T inv = T(1) / static_cast<T>(a.numel());
  T s = T(0);
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < ad.size(); ++i) s += std::abs(ad[i] - bd[i]);
  Tensor<T> out = Tensor<T>::scalar(s * inv);
  if (Tape<T>* tape = detail::recording_tape<T>({&a, &b})) {
    tape->record("mean_abs_error", {a, b}, out, [a, b, out, inv]() {
      const T g = out.grad()[0] * inv;
      auto ad = a.data();
      auto bd = b.data();
      for (std::size_t i = 0; i < ad.size(); ++i) {
        const T d = ad[i] - bd[i];
        const T s = d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0));
        if (a.requires_grad()) a.grad_buffer()[i] += g * s;
        if (b.requires_grad()) b.grad_buffer()[i] -= g * s;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean_squared_error(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(), "mean_squared_error: shape mismatch " +
                                              to_string(a.shape()) + " vs " + to_string(b.shape()));
  const T inv = T(1) / static_cast<T>(a.numel());
  T s = T(0);
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < ad.size(); ++i) {
    const T d = ad[i] - bd[i];
    s += d * d;
  }
  Tensor<T> out = Tensor<T>::scalar(s * inv);
  if (Tape<T>* tape = detail::recording_tape<T>({&a, &b})) {
    tape->record("mean_squared_error", {a, b}, out, [a, b, out, inv]() {
      const T g = T(2) * out.grad()[0] * inv;
      auto ad = a.data();
      auto bd = b.data();
      for (std::size_t i = 0; i < ad.size(); ++i) {
        const T d = ad[i] - bd[i];
        if (a.requires_grad()) a.grad_buffer()[i] += g * d;
        if (b.requires_grad()) b.grad_buffer()[i] -= g * d;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> weighted_sum(std::span<const Tensor<T>> terms, std::span<const T> weights) {
  if (terms.size() != weights.size()) {
    throw ArgumentError("weighted_sum: " + std::to_string(terms.size()) + " terms but " +
                        std::to_string(weights.size()) + " weights");
  }
  T s = T(0);
  for (std::size_t i = 0; i < terms.size(); ++i) s += weights[i] * terms[i].item();
  Tensor<T> out = Tensor<T>::scalar(s);
  Tape<T>* tape = active_tape<T>();
  bool any = false;
  for (const auto& t : terms) any = any || t.requires_grad();
  if (tape != nullptr && any) {
    std::vector<Tensor<T>> ins(terms.begin(), terms.end());
    std::vector<T> w(weights.begin(), weights.end());
    tape->record("weighted_sum", ins, out, [ins, w, out]() {
      const T g = out.grad()[0];
      for (std::size_t i = 0; i < ins.size(); ++i) {
        if (ins[i].requires_grad()) ins[i].grad_buffer()[0] += g * w[i];
      }
    });
  }
  return out;
}

#define ERIENET_INSTANTIATE(T)                                                   \
  template Tensor<T> relu(const Tensor<T>&);                                     \
  template Tensor<T> sigmoid(const Tensor<T>&);                                  \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> scale(const Tensor<T>&, T);                                 \
  template Tensor<T> clamp(const Tensor<T>&, T, T);                              \
  template Tensor<T> sum(const Tensor<T>&);                                      \
  template Tensor<T> mean(const Tensor<T>&);                                     \
  template Tensor<T> mean_abs_error(const Tensor<T>&, const Tensor<T>&);         \
  template Tensor<T> mean_squared_error(const Tensor<T>&, const Tensor<T>&);     \
  template Tensor<T> weighted_sum(std::span<const Tensor<T>>, std::span<const T>);
ERIENET_INSTANTIATE(float)
ERIENET_INSTANTIATE(double)
#undef ERIENET_INSTANTIATE

}  // namespace erienet
