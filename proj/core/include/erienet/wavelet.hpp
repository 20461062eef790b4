#pragma once

#include <vector>

#include "erienet/tensor.hpp"

namespace erienet {

/// Orthonormal 2-D Haar transform of every channel. Output is
/// [N, 4C, H/2, W/2] laid out band-major: LL(0..C), HL, LH, HH.
/// Per 2x2 block [[a,b],[c,d]]: LL=(a+b+c+d)/2, HL=(a-b+c-d)/2,
/// LH=(a+b-c-d)/2, HH=(a-b-c+d)/2.
template <typename T>
Tensor<T> haar_dwt(const Tensor<T>& x);

/// Exact inverse of haar_dwt; channel count must be a multiple of 4.
template <typename T>
Tensor<T> haar_idwt(const Tensor<T>& bands);

template <typename T>
struct HaarBands {
  Tensor<T> ll, hl, lh, hh;

  /// The four bands in LL, HL, LH, HH order.
  std::vector<Tensor<T>> list() const { return {ll, hl, lh, hh}; }
};

template <typename T>
HaarBands<T> haar_split(const Tensor<T>& x);

template <typename T>
Tensor<T> haar_merge(const HaarBands<T>& bands);

/// levels[t] holds the bands of the (t+1)-th decomposition; each level
/// recursively transforms the previous LL.
template <typename T>
struct WaveletPyramid {
  std::vector<HaarBands<T>> levels;
  /// Band-major stacked tensor per level, convenient for whole-level losses.
  std::vector<Tensor<T>> stacked;
};

template <typename T>
WaveletPyramid<T> dwt_pyramid(const Tensor<T>& x, std::size_t levels = 3);

/// Rebuilds the input from a pyramid by inverting each level from the coarsest.
template <typename T>
Tensor<T> idwt_pyramid(const WaveletPyramid<T>& pyramid);

}  // namespace erienet
