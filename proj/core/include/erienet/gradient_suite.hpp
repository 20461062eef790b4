#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace erienet {

/// One row of the 64-bit finite-difference sweep.
struct SuiteEntry {
  std::string group;  // "op", "loss" or "network"
  std::string name;
  std::size_t trials = 0;
  std::size_t checked = 0;
  std::size_t skipped = 0;   // coordinates whose +-h probes straddle a kink
  std::size_t unstable = 0;  // coordinates where the h and h/2 differences disagree
  double max_rel_err = 0.0;
  double unguarded_max_rel_err = 0.0;
  double tolerance = 0.0;

  /// Error below tolerance, and at most 1% of compared coordinates set aside as unstable.
  bool passed() const { return max_rel_err < tolerance && unstable * 100 <= checked + unstable; }
};

struct SuiteReport {
  std::vector<SuiteEntry> entries;

  bool passed() const;
  /// Worst error within a group (0 if the group is empty).
  double worst(const std::string& group) const;
};

struct SuiteOptions {
  std::uint64_t seed = 0;
  std::size_t op_trials = 20;
  std::size_t loss_pairs = 10;
  std::size_t network_samples_per_tensor = 3;
  double op_tolerance = 1e-5;
  double loss_tolerance = 1e-4;
  double network_tolerance = 1e-3;
};

/// Every differentiable op on random small shapes, the wavelet and total
/// losses on random image pairs, and the tiny network's total loss with
/// respect to every parameter tensor (sampled coordinates).
SuiteReport run_gradient_suite(const SuiteOptions& options = {});

}  // namespace erienet
