#include <algorithm>

#include "erienet/ops.hpp"
#include "op_support.hpp"

namespace erienet {

template <typename T>
Tensor<T> concat_channels(std::span<const Tensor<T>> xs) {
  if (xs.empty()) throw ArgumentError("concat_channels needs at least one tensor");
  if (xs.size() == 1) return xs[0];
  const Shape& s0 = xs[0].shape();
  std::size_t total = 0;
  for (const auto& t : xs) {
    const Shape& s = t.shape();
    if (s.n != s0.n || s.h != s0.h || s.w != s0.w) {
      throw ShapeError("concat_channels: " + to_string(s) + " does not match batch/spatial dims of " +
                       to_string(s0));
    }
    total += s.c;
  }
  Tensor<T> out(Shape{s0.n, total, s0.h, s0.w});
  auto od = out.mutable_data();
  const std::size_t plane = s0.h * s0.w;
  for (std::size_t n = 0; n < s0.n; ++n) {
    std::size_t c_off = 0;
    for (const auto& t : xs) {
      const std::size_t block = t.channels() * plane;
      std::copy_n(t.data().begin() + n * block, block, od.begin() + (n * total + c_off) * plane);
      c_off += t.channels();
    }
  }
  Tape<T>* tape = active_tape<T>();
  bool any = false;
  for (const auto& t : xs) any = any || t.requires_grad();
  if (tape != nullptr && any) {
    std::vector<Tensor<T>> ins(xs.begin(), xs.end());
    tape->record("concat_channels", ins, out, [ins, out, total, plane]() {
      auto g = out.grad();
      const std::size_t batch = out.batch();
      std::size_t c_off = 0;
      for (const auto& t : ins) {
        const std::size_t block = t.channels() * plane;
        if (t.requires_grad()) {
          auto d = t.grad_buffer();
          for (std::size_t n = 0; n < batch; ++n) {
            const T* src = g.data() + (n * total + c_off) * plane;
            T* dst = d.data() + n * block;
            for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
          }
        }
        c_off += t.channels();
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> channel_slice(const Tensor<T>& x, std::size_t start, std::size_t count) {
  const Shape& s = x.shape();
  if (count == 0 || start + count > s.c) {
    throw ShapeError("channel_slice [" + std::to_string(start) + ", " +
                     std::to_string(start + count) + ") out of range for " + to_string(s));
  }
  Tensor<T> out(Shape{s.n, count, s.h, s.w});
  const std::size_t plane = s.h * s.w;
  for (std::size_t n = 0; n < s.n; ++n) {
    std::copy_n(x.data().begin() + (n * s.c + start) * plane, count * plane,
                out.mutable_data().begin() + n * count * plane);
  }
  if (Tape<T>* tape = detail::recording_tape<T>({&x})) {
    tape->record("channel_slice", {x}, out, [x, out, start, count, plane]() {
      auto g = out.grad();
      auto d = x.grad_buffer();
      const std::size_t c = x.channels();
      for (std::size_t n = 0; n < x.batch(); ++n) {
        for (std::size_t i = 0; i < count * plane; ++i) {
          d[(n * c + start) * plane + i] += g[n * count * plane + i];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  const Shape& s = x.shape();
  detail::require(s.h >= 1 && s.w >= 1, "global_avg_pool on empty spatial dims");
  const std::size_t plane = s.h * s.w;
  const T inv = T(1) / static_cast<T>(plane);
  Tensor<T> out(Shape{s.n, s.c, 1, 1});
  auto xd = x.data();
  for (std::size_t p = 0; p < s.n * s.c; ++p) {
    T acc = T(0);
    for (std::size_t i = 0; i < plane; ++i) acc += xd[p * plane + i];
    out.mutable_data()[p] = acc * inv;
  }
  if (Tape<T>* tape = detail::recording_tape<T>({&x})) {
    tape->record("global_avg_pool", {x}, out, [x, out, plane, inv]() {
      auto g = out.grad();
      auto d = x.grad_buffer();
      for (std::size_t p = 0; p < g.size(); ++p) {
        const T v = g[p] * inv;
        for (std::size_t i = 0; i < plane; ++i) d[p * plane + i] += v;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> conv1d_channels(const Tensor<T>& pooled, const Tensor<T>& weight) {
  const Shape& s = pooled.shape();
  detail::require(s.h == 1 && s.w == 1, "conv1d_channels expects [N, C, 1, 1], got " + to_string(s));
  const std::size_t k = weight.numel();
  if (k % 2 == 0) throw ArgumentError("conv1d_channels kernel size must be odd, got " + std::to_string(k));
  const long half = static_cast<long>(k / 2);
  const long C = static_cast<long>(s.c);
  Tensor<T> out(s);
  auto pd = pooled.data();
  auto wd = weight.data();
  auto od = out.mutable_data();
  for (std::size_t n = 0; n < s.n; ++n) {
    for (long c = 0; c < C; ++c) {
      T acc = T(0);
      for (long j = 0; j < static_cast<long>(k); ++j) {
        const long src = c + j - half;
        if (src >= 0 && src < C) acc += wd[j] * pd[n * s.c + src];
      }
      od[n * s.c + c] = acc;
    }
  }
  if (Tape<T>* tape = detail::recording_tape<T>({&pooled, &weight})) {
    tape->record("conv1d_channels", {pooled, weight}, out, [pooled, weight, out, k, half, C]() {
      auto g = out.grad();
      auto pd = pooled.data();
      auto wd = weight.data();
      T* dp = pooled.requires_grad() ? pooled.grad_buffer().data() : nullptr;
      T* dw = weight.requires_grad() ? weight.grad_buffer().data() : nullptr;
      for (std::size_t n = 0; n < pooled.batch(); ++n) {
        for (long c = 0; c < C; ++c) {
          const T gv = g[n * C + c];
          for (long j = 0; j < static_cast<long>(k); ++j) {
            const long src = c + j - half;
            if (src < 0 || src >= C) continue;
            if (dw) dw[j] += gv * pd[n * C + src];
            if (dp) dp[n * C + src] += gv * wd[j];
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> bilinear_upsample2x(const Tensor<T>& x) {
  const Shape& s = x.shape();
  detail::require(s.h >= 1 && s.w >= 1, "bilinear_upsample2x on empty input");
  const std::size_t oh = 2 * s.h, ow = 2 * s.w;
  // Each output coordinate mixes index i (0.75) with its neighbour (0.25).
  auto neighbour = [](std::size_t o, std::size_t n) {
    const std::size_t i = o / 2;
    if (o % 2 == 0) return i == 0 ? std::size_t{0} : i - 1;
    return std::min(i + 1, n - 1);
  };
  Tensor<T> out(Shape{s.n, s.c, oh, ow});
  auto xd = x.data();
  auto od = out.mutable_data();
  const T near = T(0.75), far = T(0.25);
  for (std::size_t p = 0; p < s.n * s.c; ++p) {
    const T* src = xd.data() + p * s.h * s.w;
    T* dst = od.data() + p * oh * ow;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      const std::size_t y0 = oy / 2, y1 = neighbour(oy, s.h);
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const std::size_t x0 = ox / 2, x1 = neighbour(ox, s.w);
        const T top = near * src[y0 * s.w + x0] + far * src[y0 * s.w + x1];
        const T bottom = near * src[y1 * s.w + x0] + far * src[y1 * s.w + x1];
        dst[oy * ow + ox] = near * top + far * bottom;
      }
    }
  }
  if (Tape<T>* tape = detail::recording_tape<T>({&x})) {
    tape->record("bilinear_upsample2x", {x}, out, [x, out, oh, ow, neighbour, near, far]() {
      const Shape& s = x.shape();
      auto g = out.grad();
      auto d = x.grad_buffer();
      for (std::size_t p = 0; p < s.n * s.c; ++p) {
        const T* gp = g.data() + p * oh * ow;
        T* dp = d.data() + p * s.h * s.w;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const std::size_t y0 = oy / 2, y1 = neighbour(oy, s.h);
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const std::size_t x0 = ox / 2, x1 = neighbour(ox, s.w);
            const T gv = gp[oy * ow + ox];
            dp[y0 * s.w + x0] += gv * near * near;
            dp[y0 * s.w + x1] += gv * near * far;
            dp[y1 * s.w + x0] += gv * far * near;
            dp[y1 * s.w + x1] += gv * far * far;
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> avg_pool(const Tensor<T>& x, std::size_t factor) {
  const Shape& s = x.shape();
  if (factor == 0) throw ArgumentError("avg_pool factor must be positive");
  if (s.h % factor != 0 || s.w % factor != 0) {
    throw ShapeError("avg_pool factor " + std::to_string(factor) + " does not divide " +
                     to_string(s));
  }
  const std::size_t oh = s.h / factor, ow = s.w / factor;
  const T inv = T(1) / static_cast<T>(factor * factor);
  Tensor<T> out(Shape{s.n, s.c, oh, ow});
  auto xd = x.data();
  auto od = out.mutable_data();
  for (std::size_t p = 0; p < s.n * s.c; ++p) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        T acc = T(0);
        for (std::size_t dy = 0; dy < factor; ++dy)
          for (std::size_t dx = 0; dx < factor; ++dx)
            acc += xd[(p * s.h + oy * factor + dy) * s.w + ox * factor + dx];
        od[(p * oh + oy) * ow + ox] = acc * inv;
      }
    }
  }
  if (Tape<T>* tape = detail::recording_tape<T>({&x})) {
    tape->record("avg_pool", {x}, out, [x, out, factor, oh, ow, inv]() {
      const Shape& s = x.shape();
      auto g = out.grad();
      auto d = x.grad_buffer();
      for (std::size_t p = 0; p < s.n * s.c; ++p)
        for (std::size_t oy = 0; oy < oh; ++oy)
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const T v = g[(p * oh + oy) * ow + ox] * inv;
            for (std::size_t dy = 0; dy < factor; ++dy)
              for (std::size_t dx = 0; dx < factor; ++dx)
                d[(p * s.h + oy * factor + dy) * s.w + ox * factor + dx] += v;
          }
    });
  }
  return out;
}

namespace {

// Flat index pairs (shuffled, unshuffled) are produced by one enumeration so
// both directions share the same mapping.
template <typename F>
void shuffle_indices(const Shape& in, std::size_t r, F&& f) {
  const std::size_t c_out = in.c / (r * r);
  const std::size_t oh = in.h * r, ow = in.w * r;
  for (std::size_t n = 0; n < in.n; ++n)
    for (std::size_t c = 0; c < c_out; ++c)
      for (std::size_t dy = 0; dy < r; ++dy)
        for (std::size_t dx = 0; dx < r; ++dx)
          for (std::size_t y = 0; y < in.h; ++y)
            for (std::size_t x = 0; x < in.w; ++x) {
              const std::size_t src = ((n * in.c + c * r * r + dy * r + dx) * in.h + y) * in.w + x;
              const std::size_t dst = ((n * c_out + c) * oh + y * r + dy) * ow + x * r + dx;
              f(src, dst);
            }
}

}  // namespace

template <typename T>
Tensor<T> pixel_shuffle(const Tensor<T>& x, std::size_t r) {
  const Shape& s = x.shape();
  if (r == 0 || s.c % (r * r) != 0) {
    throw ShapeError("pixel_shuffle: channels " + std::to_string(s.c) + " not divisible by r^2 = " +
                     std::to_string(r * r));
  }
  Tensor<T> out(Shape{s.n, s.c / (r * r), s.h * r, s.w * r});
  auto xd = x.data();
  auto od = out.mutable_data();
  shuffle_indices(s, r, [&](std::size_t src, std::size_t dst) { od[dst] = xd[src]; });
  if (Tape<T>* tape = detail::recording_tape<T>({&x})) {
    tape->record("pixel_shuffle", {x}, out, [x, out, r]() {
      auto g = out.grad();
      auto d = x.grad_buffer();
      shuffle_indices(x.shape(), r, [&](std::size_t src, std::size_t dst) { d[src] += g[dst]; });
    });
  }
  return out;
}

template <typename T>
Tensor<T> pixel_unshuffle(const Tensor<T>& x, std::size_t r) {
  const Shape& s = x.shape();
  if (r == 0 || s.h % r != 0 || s.w % r != 0) {
    throw ShapeError("pixel_unshuffle: spatial dims of " + to_string(s) + " not divisible by " +
                     std::to_string(r));
  }
  const Shape packed{s.n, s.c * r * r, s.h / r, s.w / r};
  Tensor<T> out(packed);
  auto xd = x.data();
  auto od = out.mutable_data();
  shuffle_indices(packed, r, [&](std::size_t src, std::size_t dst) { od[src] = xd[dst]; });
  if (Tape<T>* tape = detail::recording_tape<T>({&x})) {
    tape->record("pixel_unshuffle", {x}, out, [x, out, r, packed]() {
      auto g = out.grad();
      auto d = x.grad_buffer();
      shuffle_indices(packed, r, [&](std::size_t src, std::size_t dst) { d[dst] += g[src]; });
    });
  }
  return out;
}

#define ERIENET_INSTANTIATE(T)                                                        \
  template Tensor<T> concat_channels(std::span<const Tensor<T>>);                     \
  template Tensor<T> channel_slice(const Tensor<T>&, std::size_t, std::size_t);       \
  template Tensor<T> global_avg_pool(const Tensor<T>&);                               \
  template Tensor<T> conv1d_channels(const Tensor<T>&, const Tensor<T>&);             \
  template Tensor<T> bilinear_upsample2x(const Tensor<T>&);                           \
  template Tensor<T> avg_pool(const Tensor<T>&, std::size_t);                         \
  template Tensor<T> pixel_shuffle(const Tensor<T>&, std::size_t);                    \
  template Tensor<T> pixel_unshuffle(const Tensor<T>&, std::size_t);
ERIENET_INSTANTIATE(float)
ERIENET_INSTANTIATE(double)
#undef ERIENET_INSTANTIATE

}  // namespace erienet
