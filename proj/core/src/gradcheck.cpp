#include "erienet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "erienet/rng.hpp"

namespace erienet {

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

GradcheckReport gradcheck(const ScalarFunction& f, const std::vector<Tensor<double>>& inputs,
                          const GradcheckOptions& options) {
  std::vector<bool> flags;
  std::vector<std::vector<double>> originals;
  flags.reserve(inputs.size());
  for (auto t : inputs) {
    flags.push_back(t.requires_grad());
    originals.emplace_back(t.data().begin(), t.data().end());
    if (options.pre_perturb != 0.0) {
      for (double& v : t.mutable_data()) v += options.pre_perturb;
    }
    t.set_requires_grad(true);
    t.zero_grad();
  }

  std::vector<std::vector<double>> analytic;
  {
    Tape<double> tape;
    Tensor<double> loss;
    {
      Recording<double> rec(tape);
      loss = f(inputs);
    }
    tape.backward(loss);
    for (const auto& t : inputs) {
      auto g = t.grad();
      analytic.emplace_back(g.begin(), g.end());
    }
  }

  GradcheckReport report;
  Rng rng(options.seed);
  NoRecording<double> off;
  const double h = options.step;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto data = inputs[i].mutable_data();
    std::vector<std::size_t> idx(data.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::size_t count = idx.size();
    if (options.max_samples_per_input > 0 && options.max_samples_per_input < count) {
      count = options.max_samples_per_input;
      for (std::size_t k = 0; k < count; ++k) {
        std::swap(idx[k], idx[k + rng.index(idx.size() - k)]);
      }
    }
    for (std::size_t k = 0; k < count; ++k) {
      const std::size_t j = idx[k];
      const double orig = data[j];
      data[j] = orig + h;
      const double fp = f(inputs).item();
      std::vector<bool> piece_plus;
      if (options.piece_signature) piece_plus = options.piece_signature();
      data[j] = orig - h;
      const double fm = f(inputs).item();
      data[j] = orig;
      if (options.piece_signature && options.piece_signature() != piece_plus) {
        ++report.skipped;
        continue;
      }
      const double numeric = (fp - fm) / (2.0 * h);
      const double err = relative_error(analytic[i][j], numeric);
      report.unguarded_max_rel_err = std::max(report.unguarded_max_rel_err, err);
      if (options.stability_tolerance > 0.0) {
        data[j] = orig + h / 2;
        const double fp2 = f(inputs).item();
        data[j] = orig - h / 2;
        const double fm2 = f(inputs).item();
        data[j] = orig;
        if (relative_error(numeric, (fp2 - fm2) / h) > options.stability_tolerance) {
          ++report.unstable;
          continue;
        }
      }
      ++report.checked;
      if (report.checked == 1 || err > report.max_rel_err) {
        report.max_rel_err = err;
        report.worst_input = i;
        report.worst_index = j;
        report.analytic = analytic[i][j];
        report.numeric = numeric;
      }
    }
  }

  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto t = inputs[i];
    std::copy(originals[i].begin(), originals[i].end(), t.mutable_data().begin());
    t.set_requires_grad(flags[i]);
  }
  return report;
}

}  // namespace erienet
