#include "erienet/gradient_suite.hpp"

#include <algorithm>
#include <functional>

#include "erienet/gradcheck.hpp"
#include "erienet/losses.hpp"
#include "erienet/model.hpp"
#include "erienet/ops.hpp"
#include "erienet/rng.hpp"
#include "erienet/wavelet.hpp"

namespace erienet {

bool SuiteReport::passed() const {
  return std::all_of(entries.begin(), entries.end(), [](const SuiteEntry& e) { return e.passed(); });
}

double SuiteReport::worst(const std::string& group) const {
  double w = 0.0;
  for (const auto& e : entries)
    if (e.group == group) w = std::max(w, e.max_rel_err);
  return w;
}

namespace {

using D = Tensor<double>;
using Inputs = std::vector<D>;

D uniform(Shape s, Rng& r, double lo = -1.0, double hi = 1.0) {
  D t(s);
  for (double& v : t.mutable_data()) v = r.uniform(lo, hi);
  return t;
}

// |v| in [0.1, 1]: keeps ReLU / clamp inputs off their kinks.
D away_from_zero(Shape s, Rng& r) {
  D t(s);
  for (double& v : t.mutable_data()) v = (r.uniform() < 0.5 ? -1.0 : 1.0) * r.uniform(0.1, 1.0);
  return t;
}

Shape small_shape(Rng& r, std::size_t max_c = 3) {
  return Shape{1 + r.index(2), 1 + r.index(max_c), 2 + 2 * r.index(3), 2 + 2 * r.index(3)};
}

// sum(out * w) with fixed random w, so each output element carries its own weight.
D probe(const D& out, std::uint64_t seed) {
  if (out.numel() == 1) return out;
  Rng r(seed);
  return sum(mul(out, uniform(out.shape(), r)));
}

struct Case {
  const char* name;
  std::function<Inputs(Rng&)> make;
  std::function<D(const Inputs&)> apply;
};

std::vector<Case> op_cases() {
  std::vector<Case> c;
  c.push_back({"conv2d",
               [](Rng& r) {
                 Shape s = small_shape(r);
                 const std::size_t k = r.index(2) == 0 ? 1 : 3;
                 return Inputs{uniform(s, r), uniform(Shape{1 + r.index(3), s.c, k, k}, r),
                               uniform(Shape{1, 1, 1, 1}, r)};
               },
               [](const Inputs& in) {
                 const int stride = in[0].height() % 4 == 0 ? 2 : 1;
                 D bias = in[2].numel() == in[1].batch() ? in[2] : D();
                 return conv2d(in[0], in[1], bias, stride, static_cast<int>(in[1].height() / 2));
               }});
  c.push_back({"conv2d_bias",
               [](Rng& r) {
                 Shape s = small_shape(r);
                 return Inputs{uniform(s, r), uniform(Shape{2, s.c, 3, 3}, r), uniform(Shape{1, 2, 1, 1}, r)};
               },
               [](const Inputs& in) { return conv2d(in[0], in[1], in[2], 1, 1); }});
  c.push_back({"depthwise_conv2d",
               [](Rng& r) {
                 Shape s = small_shape(r);
                 return Inputs{uniform(s, r), uniform(Shape{s.c, 1, 3, 3}, r), uniform(Shape{1, s.c, 1, 1}, r)};
               },
               [](const Inputs& in) { return depthwise_conv2d(in[0], in[1], in[2], 2, 1); }});
  c.push_back({"depthwise_separable_conv",
               [](Rng& r) {
                 Shape s = small_shape(r);
                 return Inputs{uniform(s, r), uniform(Shape{s.c, 1, 3, 3}, r), uniform(Shape{1, s.c, 1, 1}, r),
                               uniform(Shape{2, s.c, 1, 1}, r), uniform(Shape{1, 2, 1, 1}, r)};
               },
               [](const Inputs& in) { return depthwise_separable_conv(in[0], in[1], in[2], in[3], in[4], 2, 1); }});
  c.push_back({"relu", [](Rng& r) { return Inputs{away_from_zero(small_shape(r), r)}; },
               [](const Inputs& in) { return relu(in[0]); }});
  c.push_back({"sigmoid", [](Rng& r) { return Inputs{uniform(small_shape(r), r, -3, 3)}; },
               [](const Inputs& in) { return sigmoid(in[0]); }});
  c.push_back({"add",
               [](Rng& r) {
                 Shape s = small_shape(r);
                 return Inputs{uniform(s, r), uniform(Shape{s.n, s.c, 1, 1}, r)};
               },
               [](const Inputs& in) { return add(in[0], in[1]); }});
  c.push_back({"sub",
               [](Rng& r) {
                 Shape s = small_shape(r);
                 return Inputs{uniform(s, r), uniform(s, r)};
               },
               [](const Inputs& in) { return sub(in[0], in[1]); }});
  c.push_back({"mul",
               [](Rng& r) {
                 Shape s = small_shape(r);
                 return Inputs{uniform(s, r), uniform(Shape{1, s.c, 1, 1}, r)};
               },
               [](const Inputs& in) { return mul(in[0], in[1]); }});
  c.push_back({"scale", [](Rng& r) { return Inputs{uniform(small_shape(r), r)}; },
               [](const Inputs& in) { return scale(in[0], -0.7); }});
  c.push_back({"clamp",
               [](Rng& r) {
                 D t(small_shape(r));
                 for (double& v : t.mutable_data()) {
                   const double u = r.uniform();
                   v = u < 0.3 ? r.uniform(-1.0, -0.6) : (u < 0.7 ? r.uniform(-0.4, 0.4) : r.uniform(0.6, 1.0));
                 }
                 return Inputs{t};
               },
               [](const Inputs& in) { return clamp(in[0], -0.5, 0.5); }});
  c.push_back({"concat_channels",
               [](Rng& r) {
                 Shape s = small_shape(r), t = s;
                 t.c = 1 + r.index(3);
                 return Inputs{uniform(s, r), uniform(t, r)};
               },
               [](const Inputs& in) { return concat_channels(in); }});
  c.push_back({"channel_slice",
               [](Rng& r) {
                 Shape s = small_shape(r);
                 s.c = 3;
                 return Inputs{uniform(s, r)};
               },
               [](const Inputs& in) { return channel_slice(in[0], 1, 2); }});
  c.push_back({"global_avg_pool", [](Rng& r) { return Inputs{uniform(small_shape(r), r)}; },
               [](const Inputs& in) { return global_avg_pool(in[0]); }});
  c.push_back({"conv1d_channels",
               [](Rng& r) {
                 return Inputs{uniform(Shape{1 + r.index(2), 2 + r.index(6), 1, 1}, r),
                               uniform(Shape{1, 1, 1, r.index(2) == 0 ? 3u : 5u}, r)};
               },
               [](const Inputs& in) { return conv1d_channels(in[0], in[1]); }});
  auto norm_inputs = [](Rng& r) {
    Shape s = small_shape(r);
    return Inputs{uniform(s, r, -2, 2), uniform(Shape{1, s.c, 1, 1}, r, 0.5, 1.5), uniform(Shape{1, s.c, 1, 1}, r)};
  };
  c.push_back({"batch_norm_train", norm_inputs, [](const Inputs& in) {
                 BatchNormStats<double> stats;
                 return batch_norm(in[0], in[1], in[2], stats, Mode::train);
               }});
  c.push_back({"batch_norm_eval", norm_inputs, [](const Inputs& in) {
                 auto stats = BatchNormStats<double>::identity(in[0].channels());
                 stats.running_mean.assign(in[0].channels(), 0.2);
                 stats.running_var.assign(in[0].channels(), 1.7);
                 return batch_norm(in[0], in[1], in[2], stats, Mode::eval);
               }});
  c.push_back({"layer_norm", norm_inputs, [](const Inputs& in) { return layer_norm(in[0], in[1], in[2]); }});
  c.push_back({"bilinear_upsample2x", [](Rng& r) { return Inputs{uniform(small_shape(r), r)}; },
               [](const Inputs& in) { return bilinear_upsample2x(in[0]); }});
  c.push_back({"avg_pool", [](Rng& r) { return Inputs{uniform(small_shape(r), r)}; },
               [](const Inputs& in) { return avg_pool(in[0], 2); }});
  c.push_back({"pixel_shuffle",
               [](Rng& r) {
                 Shape s = small_shape(r);
                 s.c = 4 * (1 + r.index(3));
                 return Inputs{uniform(s, r)};
               },
               [](const Inputs& in) { return pixel_shuffle(in[0], 2); }});
  c.push_back({"pixel_unshuffle", [](Rng& r) { return Inputs{uniform(small_shape(r), r)}; },
               [](const Inputs& in) { return pixel_unshuffle(in[0], 2); }});
  c.push_back({"sum", [](Rng& r) { return Inputs{uniform(small_shape(r), r)}; },
               [](const Inputs& in) { return sum(in[0]); }});
  c.push_back({"mean", [](Rng& r) { return Inputs{uniform(small_shape(r), r)}; },
               [](const Inputs& in) { return mean(in[0]); }});
  c.push_back({"mean_abs_error",
               [](Rng& r) {
                 Shape s = small_shape(r);
                 return Inputs{away_from_zero(s, r), D(s, 0.0)};
               },
               [](const Inputs& in) { return mean_abs_error(in[0], in[1]); }});
  c.push_back({"mean_squared_error",
               [](Rng& r) {
                 Shape s = small_shape(r);
                 return Inputs{uniform(s, r), uniform(s, r)};
               },
               [](const Inputs& in) { return mean_squared_error(in[0], in[1]); }});
  c.push_back({"weighted_sum",
               [](Rng& r) { return Inputs{uniform(Shape{1, 1, 1, 1}, r), uniform(Shape{1, 1, 1, 1}, r)}; },
               [](const Inputs& in) {
                 const double w[2] = {0.3, -1.7};
                 return weighted_sum(std::span<const D>(in), std::span<const double>(w, 2));
               }});
  c.push_back({"haar_dwt", [](Rng& r) { return Inputs{uniform(small_shape(r), r)}; },
               [](const Inputs& in) { return haar_dwt(in[0]); }});
  c.push_back({"haar_idwt",
               [](Rng& r) {
                 Shape s = small_shape(r);
                 s.c *= 4;
                 return Inputs{uniform(s, r)};
               },
               [](const Inputs& in) { return haar_idwt(in[0]); }});
  return c;
}

// Output/target pairs with |out - gt| >= 0.01 everywhere so the L1 kink
// stays outside the +-h probe.
std::pair<D, D> separated_pair(Shape s, Rng& r) {
  D gt = uniform(s, r, 0.0, 1.0), out(s);
  auto o = out.mutable_data();
  auto g = gt.data();
  for (std::size_t i = 0; i < o.size(); ++i) {
    const double d = (r.uniform() < 0.5 ? -1.0 : 1.0) * r.uniform(0.01, 0.3);
    o[i] = g[i] + d;
  }
  return {out, gt};
}

// Loss gradients are taken with respect to the output only; the target's
// pyramid and dynamic range are constants of the loss.
std::vector<Case> loss_cases() {
  auto pair = [](Rng& r) {
    auto [out, gt] = separated_pair(Shape{1, 3, 16, 16}, r);
    return Inputs{out, gt};
  };
  std::vector<Case> c;
  c.push_back({"ssim", pair, [](const Inputs& in) { return ssim(in[0], in[1]); }});
  c.push_back({"wavelet_ssim_loss", pair, [](const Inputs& in) { return wavelet_ssim_loss(in[0], in[1]); }});
  c.push_back({"wavelet_mse_loss", pair, [](const Inputs& in) { return wavelet_mse_loss(in[0], in[1]); }});
  c.push_back({"total_loss", pair, [](const Inputs& in) { return total_loss(in[0], in[1]).total; }});
  return c;
}

SuiteEntry run_cases(const std::string& group, const Case& c, std::size_t trials, double tol, Rng& rng) {
  SuiteEntry e;
  e.group = group;
  e.name = c.name;
  e.trials = trials;
  e.tolerance = tol;
  for (std::size_t t = 0; t < trials; ++t) {
    Inputs in = c.make(rng);
    const std::uint64_t probe_seed = rng.next_u64();
    GradcheckReport report;
    if (group == "loss") {
      // Small SSIM windows on the coarse wavelet bands give some coordinates
      // large third derivatives, where the h = 1e-4 difference itself is off
      // by more than the tolerance; those are set aside (and counted).
      GradcheckOptions go;
      go.stability_tolerance = tol / 2;
      const D gt = in[1];
      report = gradcheck([&](const Inputs& x) { return c.apply({x[0], gt}); }, {in[0]}, go);
    } else {
      report = gradcheck([&](const Inputs& x) { return probe(c.apply(x), probe_seed); }, in);
    }
    e.max_rel_err = std::max(e.max_rel_err, report.max_rel_err);
    e.unguarded_max_rel_err = std::max(e.unguarded_max_rel_err, report.unguarded_max_rel_err);
    e.checked += report.checked;
    e.unstable += report.unstable;
  }
  return e;
}

SuiteEntry run_network(const SuiteOptions& o) {
  Rng rng = Rng::stream(o.seed, "suite.network");
  auto model = Model<double>::build(ModelConfig::tiny(), rng.next_u64());
  // Nonzero guidance heads so the green path is exercised too.
  for (const auto& p : model.params()) {
    if (p.name.find(".san_") == std::string::npos) continue;
    for (double& v : p.tensor.mutable_data()) v = rng.uniform(-0.1, 0.1);
  }
  D packed = uniform(Shape{2, 4, 16, 16}, rng, 0.0, 1.0);
  D green = channel_slice(packed, 1, 2).clone();
  D gt = uniform(Shape{2, 3, 32, 32}, rng, 0.0, 1.0);
  Inputs params;
  for (const auto& p : model.params()) params.push_back(p.tensor);

  // ReLUs and the L1 term are the only kinks in train mode.
  std::vector<bool> piece;
  ForwardObserver<double> obs = [&](const std::string& n, const D& t) {
    if (n.find("relu") == std::string::npos) return;
    for (double v : t.data()) piece.push_back(v > 0.0);
  };
  auto f = [&](const Inputs&) {
    piece.clear();
    D out = model.forward(packed, green, Mode::train, &obs);
    for (std::size_t i = 0; i < out.numel(); ++i) piece.push_back(out.data()[i] > gt.data()[i]);
    return total_loss(out, gt).total;
  };
  GradcheckOptions go;
  go.max_samples_per_input = o.network_samples_per_tensor;
  go.seed = rng.next_u64();
  go.piece_signature = [&]() { return piece; };
  auto report = gradcheck(f, params, go);
  SuiteEntry e;
  e.group = "network";
  e.name = "tiny_total_loss";
  e.trials = 1;
  e.checked = report.checked;
  e.skipped = report.skipped;
  e.max_rel_err = report.max_rel_err;
  e.unguarded_max_rel_err = report.unguarded_max_rel_err;
  e.tolerance = o.network_tolerance;
  return e;
}

}  // namespace

SuiteReport run_gradient_suite(const SuiteOptions& o) {
  SuiteReport r;
  Rng ops = Rng::stream(o.seed, "suite.ops");
  for (const auto& c : op_cases()) r.entries.push_back(run_cases("op", c, o.op_trials, o.op_tolerance, ops));
  Rng losses = Rng::stream(o.seed, "suite.losses");
  for (const auto& c : loss_cases()) {
    r.entries.push_back(run_cases("loss", c, o.loss_pairs, o.loss_tolerance, losses));
  }
  r.entries.push_back(run_network(o));
  return r;
}

}  // namespace erienet
