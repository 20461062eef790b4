#include <Eigen/Core>
#include <algorithm>
#include <vector>

#include "erienet/ops.hpp"
#include "erienet/parallel.hpp"
#include "op_support.hpp"

namespace erienet {
namespace {

// Output columns handled per GEMM task. Fixed so that results do not depend
// on the number of worker threads.
constexpr std::size_t kColumnChunk = 4096;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

struct ConvGeometry {
  std::size_t cin, cout, k, h, w, oh, ow;
  int stride, pad;
  std::size_t rows() const { return cin * k * k; }
  std::size_t cols() const { return oh * ow; }
  bool pointwise() const { return k == 1 && stride == 1 && pad == 0; }
};

std::size_t out_extent(std::size_t in, std::size_t k, int stride, int pad) {
  const long span = static_cast<long>(in) + 2L * pad - static_cast<long>(k);
  if (span < 0) return 0;
  return static_cast<std::size_t>(span / stride) + 1;
}

// Fills col[(ci*k + ky)*k + kx][j] for output columns [c0, c0 + count).
template <typename T>
void im2col(const T* x, const ConvGeometry& g, std::size_t c0, std::size_t count, T* col) {
  for (std::size_t ci = 0; ci < g.cin; ++ci) {
    const T* plane = x + ci * g.h * g.w;
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        T* row = col + ((ci * g.k + ky) * g.k + kx) * count;
        for (std::size_t j = 0; j < count; ++j) {
          const std::size_t o = c0 + j;
          const long iy = static_cast<long>(o / g.ow) * g.stride - g.pad + static_cast<long>(ky);
          const long ix = static_cast<long>(o % g.ow) * g.stride - g.pad + static_cast<long>(kx);
          row[j] = (iy >= 0 && ix >= 0 && iy < static_cast<long>(g.h) && ix < static_cast<long>(g.w))
                       ? plane[iy * static_cast<long>(g.w) + ix]
                       : T(0);
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* dx) {
  const std::size_t cols = g.cols();
  for (std::size_t ci = 0; ci < g.cin; ++ci) {
    T* plane = dx + ci * g.h * g.w;
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const T* row = col + ((ci * g.k + ky) * g.k + kx) * cols;
        for (std::size_t o = 0; o < cols; ++o) {
          const long iy = static_cast<long>(o / g.ow) * g.stride - g.pad + static_cast<long>(ky);
          const long ix = static_cast<long>(o % g.ow) * g.stride - g.pad + static_cast<long>(kx);
          if (iy >= 0 && ix >= 0 && iy < static_cast<long>(g.h) && ix < static_cast<long>(g.w)) {
            plane[iy * static_cast<long>(g.w) + ix] += row[o];
          }
        }
      }
    }
  }
}

void check_conv_args(const Shape& xs, const Shape& ws, int stride, int pad, bool depthwise) {
  if (stride < 1) throw ArgumentError("conv stride must be >= 1, got " + std::to_string(stride));
  if (pad < 0) throw ArgumentError("conv padding must be >= 0, got " + std::to_string(pad));
  if (ws.h != ws.w) throw ShapeError("conv kernel must be square, got " + to_string(ws));
  if (depthwise) {
    detail::require(ws.c == 1, "depthwise weight must be [C, 1, k, k], got " + to_string(ws));
    detail::require(ws.n == xs.c, "depthwise weight channel count " + std::to_string(ws.n) +
                                      " does not match input channels " + std::to_string(xs.c));
  } else {
    detail::require(ws.c == xs.c, "conv2d input channels " + std::to_string(xs.c) +
                                      " do not match weight Cin " + std::to_string(ws.c));
  }
}

template <typename T>
void check_bias(const Tensor<T>& bias, std::size_t cout) {
  if (!bias.defined()) return;
  detail::require(bias.numel() == cout, "conv bias has " + std::to_string(bias.numel()) +
                                            " elements, expected Cout = " + std::to_string(cout));
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, int stride,
                 int pad) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  check_conv_args(xs, ws, stride, pad, false);
  check_bias(bias, ws.n);
  ConvGeometry g{ws.c, ws.n, ws.h, xs.h, xs.w, out_extent(xs.h, ws.h, stride, pad),
                 out_extent(xs.w, ws.w, stride, pad), stride, pad};
  detail::require(g.oh > 0 && g.ow > 0, "conv2d output would be empty for input " + to_string(xs));

  Tensor<T> out(Shape{xs.n, g.cout, g.oh, g.ow});
  const std::size_t cols = g.cols();
  const std::size_t rows = g.rows();
  const std::size_t chunks = (cols + kColumnChunk - 1) / kColumnChunk;
  Eigen::Map<const RowMat<T>> wmat(weight.data().data(), g.cout, rows);
  const T* xd = x.data().data();
  T* od = out.mutable_data().data();
  const T* bd = bias.defined() ? bias.data().data() : nullptr;

  parallel_for(xs.n * chunks, [&](std::size_t task) {
    const std::size_t n = task / chunks;
    const std::size_t c0 = (task % chunks) * kColumnChunk;
    const std::size_t count = std::min(kColumnChunk, cols - c0);
    const T* xn = xd + n * g.cin * g.h * g.w;
    StridedMap<T> dst(od + n * g.cout * cols + c0, g.cout, count, Eigen::OuterStride<>(cols));
    if (g.pointwise()) {
      ConstStridedMap<T> src(xn + c0, rows, count, Eigen::OuterStride<>(cols));
      dst.noalias() = wmat * src;
    } else {
      std::vector<T> col(rows * count);
      im2col(xn, g, c0, count, col.data());
      Eigen::Map<const RowMat<T>> src(col.data(), rows, count);
      dst.noalias() = wmat * src;
    }
    if (bd != nullptr) {
      for (std::size_t co = 0; co < g.cout; ++co) dst.row(co).array() += bd[co];
    }
  });

  if (Tape<T>* tape = detail::recording_tape<T>({&x, &weight, &bias})) {
    tape->record("conv2d", {x, weight, bias}, out, [x, weight, bias, out, g]() {
      const std::size_t cols = g.cols();
      const std::size_t rows = g.rows();
      const std::size_t n_batch = x.batch();
      const T* gd = out.grad().data();
      const T* xd = x.data().data();
      Eigen::Map<const RowMat<T>> wmat(weight.data().data(), g.cout, rows);
      if (bias.defined() && bias.requires_grad()) {
        T* db = bias.grad_buffer().data();
        for (std::size_t n = 0; n < n_batch; ++n) {
          for (std::size_t co = 0; co < g.cout; ++co) {
            const T* r = gd + (n * g.cout + co) * cols;
            T s = T(0);
            for (std::size_t j = 0; j < cols; ++j) s += r[j];
            db[co] += s;
          }
        }
      }
      const bool need_w = weight.requires_grad();
      const bool need_x = x.requires_grad();
      if (!need_w && !need_x) return;
      const std::size_t chunks = (cols + kColumnChunk - 1) / kColumnChunk;
      std::vector<RowMat<T>> partial_dw(need_w ? n_batch * chunks : 0);
      std::vector<std::vector<T>> dcol(need_x && !g.pointwise() ? n_batch : 0);
      for (auto& d : dcol) d.assign(rows * cols, T(0));
      T* dxd = need_x ? x.grad_buffer().data() : nullptr;

      parallel_for(n_batch * chunks, [&](std::size_t task) {
        const std::size_t n = task / chunks;
        const std::size_t c0 = (task % chunks) * kColumnChunk;
        const std::size_t count = std::min(kColumnChunk, cols - c0);
        const T* xn = xd + n * g.cin * g.h * g.w;
        ConstStridedMap<T> gy(gd + n * g.cout * cols + c0, g.cout, count,
                              Eigen::OuterStride<>(cols));
        if (need_w) {
          if (g.pointwise()) {
            ConstStridedMap<T> src(xn + c0, rows, count, Eigen::OuterStride<>(cols));
            partial_dw[task].noalias() = gy * src.transpose();
          } else {
            std::vector<T> col(rows * count);
            im2col(xn, g, c0, count, col.data());
            Eigen::Map<const RowMat<T>> src(col.data(), rows, count);
            partial_dw[task].noalias() = gy * src.transpose();
          }
        }
        if (need_x) {
          if (g.pointwise()) {
            // Chunks cover disjoint pixels, so writes do not overlap.
            StridedMap<T> dxn(dxd + n * g.cin * g.h * g.w + c0, rows, count,
                              Eigen::OuterStride<>(cols));
            dxn.noalias() += wmat.transpose() * gy;
          } else {
            StridedMap<T> dc(dcol[n].data() + c0, rows, count, Eigen::OuterStride<>(cols));
            dc.noalias() = wmat.transpose() * gy;
          }
        }
      });

      if (need_w) {
        Eigen::Map<RowMat<T>> dw(weight.grad_buffer().data(), g.cout, rows);
        for (const auto& p : partial_dw) dw += p;
      }
      if (need_x && !g.pointwise()) {
        for (std::size_t n = 0; n < n_batch; ++n) {
          col2im_add(dcol[n].data(), g, dxd + n * g.cin * g.h * g.w);
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                           int stride, int pad) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  check_conv_args(xs, ws, stride, pad, true);
  check_bias(bias, xs.c);
  const std::size_t k = ws.h;
  const std::size_t oh = out_extent(xs.h, k, stride, pad);
  const std::size_t ow = out_extent(xs.w, k, stride, pad);
  detail::require(oh > 0 && ow > 0, "depthwise conv output would be empty for " + to_string(xs));

  Tensor<T> out(Shape{xs.n, xs.c, oh, ow});
  const T* xd = x.data().data();
  const T* wd = weight.data().data();
  const T* bd = bias.defined() ? bias.data().data() : nullptr;
  T* od = out.mutable_data().data();
  const long H = static_cast<long>(xs.h), W = static_cast<long>(xs.w);

  parallel_for(xs.n * xs.c, [&](std::size_t plane) {
    const std::size_t c = plane % xs.c;
    const T* xp = xd + plane * xs.h * xs.w;
    const T* wk = wd + c * k * k;
    T* op = od + plane * oh * ow;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        T acc = bd ? bd[c] : T(0);
        for (std::size_t ky = 0; ky < k; ++ky) {
          const long iy = static_cast<long>(oy) * stride - pad + static_cast<long>(ky);
          if (iy < 0 || iy >= H) continue;
          for (std::size_t kx = 0; kx < k; ++kx) {
            const long ix = static_cast<long>(ox) * stride - pad + static_cast<long>(kx);
            if (ix < 0 || ix >= W) continue;
            acc += wk[ky * k + kx] * xp[iy * W + ix];
          }
        }
        op[oy * ow + ox] = acc;
      }
    }
  });

  if (Tape<T>* tape = detail::recording_tape<T>({&x, &weight, &bias})) {
    tape->record("depthwise_conv2d", {x, weight, bias}, out,
                 [x, weight, bias, out, k, oh, ow, stride, pad]() {
      const Shape& xs = x.shape();
      const long H = static_cast<long>(xs.h), W = static_cast<long>(xs.w);
      const T* gd = out.grad().data();
      const T* xd = x.data().data();
      const T* wd = weight.data().data();
      T* dx = x.requires_grad() ? x.grad_buffer().data() : nullptr;
      T* dw = weight.requires_grad() ? weight.grad_buffer().data() : nullptr;
      T* db = bias.defined() && bias.requires_grad() ? bias.grad_buffer().data() : nullptr;
      // One task per channel so weight-gradient writes never race.
      parallel_for(xs.c, [&](std::size_t c) {
        for (std::size_t n = 0; n < xs.n; ++n) {
          const std::size_t plane = n * xs.c + c;
          const T* xp = xd + plane * xs.h * xs.w;
          const T* gp = gd + plane * oh * ow;
          T* dxp = dx ? dx + plane * xs.h * xs.w : nullptr;
          for (std::size_t oy = 0; oy < oh; ++oy) {
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const T gv = gp[oy * ow + ox];
              if (db) db[c] += gv;
              for (std::size_t ky = 0; ky < k; ++ky) {
                const long iy = static_cast<long>(oy) * stride - pad + static_cast<long>(ky);
                if (iy < 0 || iy >= H) continue;
                for (std::size_t kx = 0; kx < k; ++kx) {
                  const long ix = static_cast<long>(ox) * stride - pad + static_cast<long>(kx);
                  if (ix < 0 || ix >= W) continue;
                  if (dw) dw[c * k * k + ky * k + kx] += gv * xp[iy * W + ix];
                  if (dxp) dxp[iy * W + ix] += gv * wd[c * k * k + ky * k + kx];
                }
              }
            }
          }
        }
      });
    });
  }
  return out;
}

template <typename T>
Tensor<T> depthwise_separable_conv(const Tensor<T>& x, const Tensor<T>& dw_weight,
                                   const Tensor<T>& dw_bias, const Tensor<T>& pw_weight,
                                   const Tensor<T>& pw_bias, int stride, int pad) {
  detail::require(pw_weight.height() == 1 && pw_weight.width() == 1,
                  "pointwise weight must be [Cout, C, 1, 1], got " + to_string(pw_weight.shape()));
  return conv2d(depthwise_conv2d(x, dw_weight, dw_bias, stride, pad), pw_weight, pw_bias, 1, 0);
}

#define ERIENET_INSTANTIATE(T)                                                                  \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int);    \
  template Tensor<T> depthwise_conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, \
                                      int);                                                     \
  template Tensor<T> depthwise_separable_conv(const Tensor<T>&, const Tensor<T>&,               \
                                              const Tensor<T>&, const Tensor<T>&,               \
                                              const Tensor<T>&, int, int);
ERIENET_INSTANTIATE(float)
ERIENET_INSTANTIATE(double)
#undef ERIENET_INSTANTIATE

}  // namespace erienet
