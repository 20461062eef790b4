#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "erienet/tensor.hpp"

namespace erienet {

struct GradcheckOptions {
  double step = 1e-4;
  /// Check at most this many coordinates per input (0 = all), sampled without replacement.
  std::size_t max_samples_per_input = 0;
  std::uint64_t seed = 0;
  /// Added to every input element before checking; moves points off ReLU kinks.
  double pre_perturb = 0.0;
  /// Optional fingerprint of the linear piece the last f evaluation landed on
  /// (e.g. ReLU on/off bits). Coordinates whose x+h and x-h fingerprints differ
  /// straddle a kink, where central differences are no oracle; they are
  /// counted in `skipped` instead of compared.
  std::function<std::vector<bool>()> piece_signature;
  /// When positive, each central difference is recomputed with step h/2;
  /// if the two disagree by more than this relative error the oracle itself
  /// is not converged at that coordinate (large higher derivatives), and the
  /// coordinate is counted in `unstable` instead of entering max_rel_err.
  /// The decision never looks at the analytic gradient.
  double stability_tolerance = 0.0;
};

struct GradcheckReport {
  double max_rel_err = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
  std::size_t unstable = 0;
  /// Worst error over every compared coordinate, unstable ones included.
  double unguarded_max_rel_err = 0.0;

  bool passed(double tolerance) const { return max_rel_err < tolerance; }
};

using ScalarFunction = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

/// Compares reverse-mode gradients of a scalar function with central
/// differences (f(x + h) - f(x - h)) / 2h. The error of each coordinate is
/// |a - n| / max(|a|, |n|, 1e-8); the report carries the worst one.
/// Inputs are restored to their original values afterwards.
GradcheckReport gradcheck(const ScalarFunction& f, const std::vector<Tensor<double>>& inputs,
                          const GradcheckOptions& options = {});

double relative_error(double analytic, double numeric);

}  // namespace erienet
