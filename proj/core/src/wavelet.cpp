#include "erienet/wavelet.hpp"

#include "erienet/ops.hpp"
#include "op_support.hpp"

namespace erienet {
namespace {

// The Haar matrix is symmetric and orthogonal, so the forward kernel is also
// the adjoint of the inverse kernel and vice versa.
template <typename T>
void haar_forward(const Shape& in_shape, std::span<const T> in, std::span<T> out, bool accumulate) {
  const std::size_t C = in_shape.c, H = in_shape.h, W = in_shape.w, h = H / 2, w = W / 2;
  for (std::size_t n = 0; n < in_shape.n; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const T* src = in.data() + (n * C + c) * H * W;
      T* band[4];
      for (std::size_t b = 0; b < 4; ++b) band[b] = out.data() + ((n * 4 * C) + b * C + c) * h * w;
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const T a = src[(2 * y) * W + 2 * x], bb = src[(2 * y) * W + 2 * x + 1];
          const T cc = src[(2 * y + 1) * W + 2 * x], d = src[(2 * y + 1) * W + 2 * x + 1];
          const T v[4] = {(a + bb + cc + d) / 2, (a - bb + cc - d) / 2, (a + bb - cc - d) / 2, (a - bb - cc + d) / 2};
          for (std::size_t b = 0; b < 4; ++b) {
            if (accumulate) band[b][y * w + x] += v[b];
            else band[b][y * w + x] = v[b];
          }
        }
    }
}

template <typename T>
void haar_inverse(const Shape& band_shape, std::span<const T> in, std::span<T> out, bool accumulate) {
  const std::size_t C = band_shape.c / 4, h = band_shape.h, w = band_shape.w, W = 2 * w;
  for (std::size_t n = 0; n < band_shape.n; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      T* dst = out.data() + (n * C + c) * 4 * h * w;
      const T* band[4];
      for (std::size_t b = 0; b < 4; ++b) band[b] = in.data() + ((n * 4 * C) + b * C + c) * h * w;
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const std::size_t i = y * w + x;
          const T ll = band[0][i], hl = band[1][i], lh = band[2][i], hh = band[3][i];
          const T v[4] = {(ll + hl + lh + hh) / 2, (ll - hl + lh - hh) / 2, (ll + hl - lh - hh) / 2,
                          (ll - hl - lh + hh) / 2};
          const std::size_t pos[4] = {(2 * y) * W + 2 * x, (2 * y) * W + 2 * x + 1, (2 * y + 1) * W + 2 * x,
                                      (2 * y + 1) * W + 2 * x + 1};
          for (std::size_t k = 0; k < 4; ++k) {
            if (accumulate) dst[pos[k]] += v[k];
            else dst[pos[k]] = v[k];
          }
        }
    }
}

}  // namespace

template <typename T>
Tensor<T> haar_dwt(const Tensor<T>& x) {
  const Shape& s = x.shape();
  detail::require(s.h % 2 == 0 && s.w % 2 == 0,
                  "haar_dwt needs even spatial dims, got " + to_string(s));
  Tensor<T> out(Shape{s.n, 4 * s.c, s.h / 2, s.w / 2});
  haar_forward<T>(s, x.data(), out.mutable_data(), false);
  if (Tape<T>* tape = detail::recording_tape<T>({&x})) {
    tape->record("haar_dwt", {x}, out, [x, out]() {
      if (x.requires_grad()) haar_inverse<T>(out.shape(), out.grad(), x.grad_buffer(), true);
    });
  }
  return out;
}

template <typename T>
Tensor<T> haar_idwt(const Tensor<T>& bands) {
  const Shape& s = bands.shape();
  detail::require(s.c % 4 == 0, "haar_idwt needs a multiple of 4 channels, got " + to_string(s));
  Tensor<T> out(Shape{s.n, s.c / 4, 2 * s.h, 2 * s.w});
  haar_inverse<T>(s, bands.data(), out.mutable_data(), false);
  if (Tape<T>* tape = detail::recording_tape<T>({&bands})) {
    tape->record("haar_idwt", {bands}, out, [bands, out]() {
      if (bands.requires_grad()) haar_forward<T>(out.shape(), out.grad(), bands.grad_buffer(), true);
    });
  }
  return out;
}

template <typename T>
HaarBands<T> haar_split(const Tensor<T>& x) {
  Tensor<T> b = haar_dwt(x);
  const std::size_t c = x.channels();
  return {channel_slice(b, 0, c), channel_slice(b, c, c), channel_slice(b, 2 * c, c), channel_slice(b, 3 * c, c)};
}

template <typename T>
Tensor<T> haar_merge(const HaarBands<T>& bands) {
  const Shape& s = bands.ll.shape();
  for (const auto& b : {bands.hl, bands.lh, bands.hh}) {
    detail::require(b.shape() == s, "haar bands differ in shape: " + to_string(s) + " vs " + to_string(b.shape()));
  }
  return haar_idwt(concat_channels(bands.list()));
}

template <typename T>
WaveletPyramid<T> dwt_pyramid(const Tensor<T>& x, std::size_t levels) {
  const std::size_t f = std::size_t{1} << levels;
  detail::require(x.height() % f == 0 && x.width() % f == 0,
                  "dwt_pyramid with " + std::to_string(levels) + " levels needs dims divisible by " +
                      std::to_string(f) + ", got " + to_string(x.shape()));
  WaveletPyramid<T> p;
  Tensor<T> cur = x;
  const std::size_t c = x.channels();
  for (std::size_t t = 0; t < levels; ++t) {
    Tensor<T> b = haar_dwt(cur);
    HaarBands<T> hb{channel_slice(b, 0, c), channel_slice(b, c, c), channel_slice(b, 2 * c, c),
                    channel_slice(b, 3 * c, c)};
    p.stacked.push_back(b);
    cur = hb.ll;
    p.levels.push_back(std::move(hb));
  }
  return p;
}

template <typename T>
Tensor<T> idwt_pyramid(const WaveletPyramid<T>& pyramid) {
  detail::require(!pyramid.levels.empty(), "idwt_pyramid of an empty pyramid");
  Tensor<T> cur = pyramid.levels.back().ll;
  for (std::size_t t = pyramid.levels.size(); t-- > 0;) {
    const auto& lv = pyramid.levels[t];
    cur = haar_merge(HaarBands<T>{cur, lv.hl, lv.lh, lv.hh});
  }
  return cur;
}

#define ERIENET_INSTANTIATE(T)                                         \
  template Tensor<T> haar_dwt(const Tensor<T>&);                       \
  template Tensor<T> haar_idwt(const Tensor<T>&);                      \
  template HaarBands<T> haar_split(const Tensor<T>&);                  \
  template Tensor<T> haar_merge(const HaarBands<T>&);                  \
  template WaveletPyramid<T> dwt_pyramid(const Tensor<T>&, std::size_t); \
  template Tensor<T> idwt_pyramid(const WaveletPyramid<T>&);
ERIENET_INSTANTIATE(float)
ERIENET_INSTANTIATE(double)
#undef ERIENET_INSTANTIATE

}  // namespace erienet
