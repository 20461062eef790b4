#pragma once

// Differentiable operators over NCHW tensors. Every op records a backward
// closure on the thread's active tape when one exists and at least one
// input requires a gradient. Padding is zero padding everywhere.

#include <span>
#include <vector>

#include "erienet/tensor.hpp"

namespace erienet {

enum class Mode { train, eval };

/// Cross-correlation with weight [Cout, Cin, k, k] and optional bias [1, Cout, 1, 1]
/// (pass an undefined tensor for no bias).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 int stride, int pad);

/// Per-channel spatial convolution, weight [C, 1, k, k].
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                           int stride, int pad);

/// depthwise_conv2d followed by a 1x1 conv2d.
template <typename T>
Tensor<T> depthwise_separable_conv(const Tensor<T>& x, const Tensor<T>& dw_weight,
                                   const Tensor<T>& dw_bias, const Tensor<T>& pw_weight,
                                   const Tensor<T>& pw_bias, int stride, int pad);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);

/// a + b, where each dimension of b equals a's or is 1.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

/// a - b with the same broadcasting rule as add.
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);

/// a * b elementwise with the same broadcasting rule as add.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);

/// Clamps to [lo, hi]; gradient passes where lo < x < hi.
template <typename T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi);

template <typename T>
Tensor<T> concat_channels(std::span<const Tensor<T>> xs);

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& xs) {
  return concat_channels(std::span<const Tensor<T>>(xs));
}

/// Channels [start, start + count).
template <typename T>
Tensor<T> channel_slice(const Tensor<T>& x, std::size_t start, std::size_t count);

/// Per-channel spatial mean, shape [N, C, 1, 1].
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x);

/// Treats the channel axis of [N, C, 1, 1] as a 1-D signal and correlates it
/// with an odd-length kernel [1, 1, 1, k], zero-padded by (k - 1) / 2.
template <typename T>
Tensor<T> conv1d_channels(const Tensor<T>& pooled, const Tensor<T>& weight);

/// Running statistics for batch normalization.
template <typename T>
struct BatchNormStats {
  std::vector<T> running_mean;
  std::vector<T> running_var;
  bool initialized = false;
  T momentum = T(0.1);

  /// Mean 0, variance 1 for `channels` channels.
  static BatchNormStats identity(std::size_t channels) {
    return BatchNormStats{std::vector<T>(channels, T(0)), std::vector<T>(channels, T(1)), true};
  }
};

/// Normalizes each channel over (batch, height, width). Train mode uses batch
/// statistics (biased variance) and updates `stats` with momentum; eval mode
/// uses the running statistics. gamma/beta are [1, C, 1, 1] or undefined for
/// no affine transform.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     BatchNormStats<T>& stats, Mode mode, T eps = T(1e-5));

/// Normalizes each sample over (channels, height, width); gamma/beta as in batch_norm.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5));

/// Doubles height and width with half-pixel-centred bilinear sampling:
/// output index o samples input coordinate o / 2 - 1/4, so along each axis
///   out[2i]     = 0.75 * in[i] + 0.25 * in[max(i - 1, 0)]
///   out[2i + 1] = 0.75 * in[i] + 0.25 * in[min(i + 1, n - 1)].
template <typename T>
Tensor<T> bilinear_upsample2x(const Tensor<T>& x);

/// Mean over non-overlapping factor x factor blocks.
template <typename T>
Tensor<T> avg_pool(const Tensor<T>& x, std::size_t factor);

/// [N, C*r*r, H, W] -> [N, C, rH, rW]; input channel c*r*r + dy*r + dx at (y, x)
/// lands on output channel c at (r*y + dy, r*x + dx).
template <typename T>
Tensor<T> pixel_shuffle(const Tensor<T>& x, std::size_t r);

/// Inverse rearrangement of pixel_shuffle.
template <typename T>
Tensor<T> pixel_unshuffle(const Tensor<T>& x, std::size_t r);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);

template <typename T>
Tensor<T> mean(const Tensor<T>& x);

template <typename T>
Tensor<T> mean_abs_error(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mean_squared_error(const Tensor<T>& a, const Tensor<T>& b);

/// Weighted sum of scalar tensors.
template <typename T>
Tensor<T> weighted_sum(std::span<const Tensor<T>> terms, std::span<const T> weights);

}  // namespace erienet
