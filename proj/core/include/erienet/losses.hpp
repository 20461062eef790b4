#pragma once

#include <vector>

#include "erienet/tensor.hpp"

namespace erienet {

struct SsimOptions {
  std::size_t window = 11;  // shrunk to min(window, H, W) for small planes
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
};

/// Mean SSIM over all valid window positions, channels and batch entries,
/// with a normalized Gaussian window. Differentiable in both arguments.
template <typename T>
Tensor<T> ssim(const Tensor<T>& x, const Tensor<T>& y, double dynamic_range = 1.0,
               const SsimOptions& options = {});

struct LossWeights {
  double wssim = 0.5;
  double wmse = 0.5;
  /// One ratio per pyramid band: level-major, LL/HL/LH/HH within a level.
  std::vector<double> ratios = std::vector<double>(12, 1.0 / 12.0);

  /// Throws ArgumentError on negative weights, wrong ratio count or ratios not summing to 1.
  void validate(std::size_t levels = 3) const;
};

/// -sum_i r_i * ssim(out_band_i, gt_band_i) over the 3-level Haar pyramid; each
/// band uses dynamic range max(1, max |gt band|).
template <typename T>
Tensor<T> wavelet_ssim_loss(const Tensor<T>& out, const Tensor<T>& gt, const LossWeights& weights = {});

/// Pixel MSE plus, for each of the 3 levels, the MSE over all four bands of that level.
template <typename T>
Tensor<T> wavelet_mse_loss(const Tensor<T>& out, const Tensor<T>& gt);

template <typename T>
struct LossTerms {
  Tensor<T> total, l1, wssim, wmse;
};

/// L1 + wssim * L_wssim + wmse * L_wmse with L1 the mean absolute error.
template <typename T>
LossTerms<T> total_loss(const Tensor<T>& out, const Tensor<T>& gt, const LossWeights& weights = {});

/// 10 log10(max_val^2 / MSE); +infinity when the images are identical.
double psnr(const Tensor<float>& out, const Tensor<float>& gt, double max_val = 1.0);
/// Image SSIM with dynamic range 1, evaluated without recording.
double ssim_metric(const Tensor<float>& out, const Tensor<float>& gt);

}  // namespace erienet
