#include <cmath>

#include "erienet/ops.hpp"
#include "op_support.hpp"

namespace erienet {
namespace {

template <typename T>
void check_affine(const Tensor<T>& gamma, const Tensor<T>& beta, std::size_t channels,
                  const char* op) {
  if (gamma.defined() != beta.defined()) {
    throw ArgumentError(std::string(op) + ": gamma and beta must both be given or both omitted");
  }
  if (!gamma.defined()) return;
  if (gamma.numel() != channels || beta.numel() != channels) {
    throw ShapeError(std::string(op) + ": gamma/beta length must equal channels (" +
                     std::to_string(channels) + ")");
  }
}

template <typename T>
Tensor<T> apply_affine(const Tensor<T>& x, const std::vector<T>& xhat, const Tensor<T>& gamma,
                       const Tensor<T>& beta) {
  Tensor<T> out(x.shape(), xhat);
  if (!gamma.defined()) return out;
  const Shape& s = x.shape();
  auto od = out.mutable_data();
  auto gd = gamma.data();
  auto bd = beta.data();
  const std::size_t plane = s.h * s.w;
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      T* p = od.data() + (n * s.c + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) p[i] = p[i] * gd[c] + bd[c];
    }
  return out;
}

template <typename T>
void affine_backward(const Tensor<T>& out, const std::vector<T>& xhat, const Tensor<T>& gamma,
                     const Tensor<T>& beta, std::vector<T>& g_xhat) {
  const Shape& s = out.shape();
  const std::size_t plane = s.h * s.w;
  auto g = out.grad();
  g_xhat.assign(g.begin(), g.end());
  if (!gamma.defined()) return;
  auto gd = gamma.data();
  T* dg = gamma.requires_grad() ? gamma.grad_buffer().data() : nullptr;
  T* db = beta.requires_grad() ? beta.grad_buffer().data() : nullptr;
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      const std::size_t base = (n * s.c + c) * plane;
      T sg = T(0), sgx = T(0);
      for (std::size_t i = 0; i < plane; ++i) {
        sg += g[base + i];
        sgx += g[base + i] * xhat[base + i];
        g_xhat[base + i] = g[base + i] * gd[c];
      }
      if (dg) dg[c] += sgx;
      if (db) db[c] += sg;
    }
}

}  // namespace

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     BatchNormStats<T>& stats, Mode mode, T eps) {
  const Shape& s = x.shape();
  check_affine(gamma, beta, s.c, "batch_norm");
  const std::size_t plane = s.h * s.w;
  const std::size_t count = s.n * plane;
  detail::require(count > 0, "batch_norm on empty input");
  auto xd = x.data();
  std::vector<T> xhat(xd.size());
  std::vector<T> inv_std(s.c);

  if (mode == Mode::train) {
    if (stats.running_mean.size() != s.c) {
      stats.running_mean.assign(s.c, T(0));
      stats.running_var.assign(s.c, T(1));
    }
    for (std::size_t c = 0; c < s.c; ++c) {
      T mu = T(0);
      for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t i = 0; i < plane; ++i) mu += xd[(n * s.c + c) * plane + i];
      mu /= static_cast<T>(count);
      T var = T(0);
      for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t i = 0; i < plane; ++i) {
          const T d = xd[(n * s.c + c) * plane + i] - mu;
          var += d * d;
        }
      var /= static_cast<T>(count);
      inv_std[c] = T(1) / std::sqrt(var + eps);
      for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t i = 0; i < plane; ++i) {
          const std::size_t j = (n * s.c + c) * plane + i;
          xhat[j] = (xd[j] - mu) * inv_std[c];
        }
      const T unbiased = count > 1 ? var * static_cast<T>(count) / static_cast<T>(count - 1) : var;
      stats.running_mean[c] = (T(1) - stats.momentum) * stats.running_mean[c] + stats.momentum * mu;
      stats.running_var[c] = (T(1) - stats.momentum) * stats.running_var[c] + stats.momentum * unbiased;
    }
    stats.initialized = true;
  } else {
    if (!stats.initialized) {
      throw StateError("batch_norm in eval mode before any running statistics were recorded");
    }
    detail::require(stats.running_mean.size() == s.c && stats.running_var.size() == s.c,
                    "batch_norm running statistics do not match channel count " + std::to_string(s.c));
    for (std::size_t c = 0; c < s.c; ++c) {
      inv_std[c] = T(1) / std::sqrt(stats.running_var[c] + eps);
      for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t i = 0; i < plane; ++i) {
          const std::size_t j = (n * s.c + c) * plane + i;
          xhat[j] = (xd[j] - stats.running_mean[c]) * inv_std[c];
        }
    }
  }

  Tensor<T> out = apply_affine(x, xhat, gamma, beta);
  if (Tape<T>* tape = detail::recording_tape<T>({&x, &gamma, &beta})) {
    tape->record("batch_norm", {x, gamma, beta}, out,
                 [x, gamma, beta, out, xhat = std::move(xhat), inv_std, mode, plane, count]() {
      std::vector<T> gx;
      affine_backward(out, xhat, gamma, beta, gx);
      if (!x.requires_grad()) return;
      const Shape& s = x.shape();
      auto dx = x.grad_buffer();
      for (std::size_t c = 0; c < s.c; ++c) {
        if (mode == Mode::eval) {
          for (std::size_t n = 0; n < s.n; ++n)
            for (std::size_t i = 0; i < plane; ++i) {
              const std::size_t j = (n * s.c + c) * plane + i;
              dx[j] += gx[j] * inv_std[c];
            }
          continue;
        }
        T sg = T(0), sgx = T(0);
        for (std::size_t n = 0; n < s.n; ++n)
          for (std::size_t i = 0; i < plane; ++i) {
            const std::size_t j = (n * s.c + c) * plane + i;
            sg += gx[j];
            sgx += gx[j] * xhat[j];
          }
        const T m = static_cast<T>(count);
        for (std::size_t n = 0; n < s.n; ++n)
          for (std::size_t i = 0; i < plane; ++i) {
            const std::size_t j = (n * s.c + c) * plane + i;
            dx[j] += inv_std[c] / m * (m * gx[j] - sg - xhat[j] * sgx);
          }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  const Shape& s = x.shape();
  check_affine(gamma, beta, s.c, "layer_norm");
  const std::size_t count = s.c * s.h * s.w;
  detail::require(count > 0, "layer_norm on empty input");
  auto xd = x.data();
  std::vector<T> xhat(xd.size());
  std::vector<T> inv_std(s.n);
  for (std::size_t n = 0; n < s.n; ++n) {
    const T* p = xd.data() + n * count;
    T mu = T(0);
    for (std::size_t i = 0; i < count; ++i) mu += p[i];
    mu /= static_cast<T>(count);
    T var = T(0);
    for (std::size_t i = 0; i < count; ++i) var += (p[i] - mu) * (p[i] - mu);
    var /= static_cast<T>(count);
    inv_std[n] = T(1) / std::sqrt(var + eps);
    for (std::size_t i = 0; i < count; ++i) xhat[n * count + i] = (p[i] - mu) * inv_std[n];
  }
  Tensor<T> out = apply_affine(x, xhat, gamma, beta);
  if (Tape<T>* tape = detail::recording_tape<T>({&x, &gamma, &beta})) {
    tape->record("layer_norm", {x, gamma, beta}, out,
                 [x, gamma, beta, out, xhat = std::move(xhat), inv_std, count]() {
      std::vector<T> gx;
      affine_backward(out, xhat, gamma, beta, gx);
      if (!x.requires_grad()) return;
      auto dx = x.grad_buffer();
      const T m = static_cast<T>(count);
      for (std::size_t n = 0; n < x.batch(); ++n) {
        T sg = T(0), sgx = T(0);
        for (std::size_t i = 0; i < count; ++i) {
          sg += gx[n * count + i];
          sgx += gx[n * count + i] * xhat[n * count + i];
        }
        for (std::size_t i = 0; i < count; ++i) {
          const std::size_t j = n * count + i;
          dx[j] += inv_std[n] / m * (m * gx[j] - sg - xhat[j] * sgx);
        }
      }
    });
  }
  return out;
}

#define ERIENET_INSTANTIATE(T)                                                             \
  template Tensor<T> batch_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,       \
                                BatchNormStats<T>&, Mode, T);                               \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);
ERIENET_INSTANTIATE(float)
ERIENET_INSTANTIATE(double)
#undef ERIENET_INSTANTIATE

}  // namespace erienet
