#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <nlohmann/json.hpp>
#include <string>
#include <unordered_map>
#include <vector>

#include "erienet/ops.hpp"
#include "erienet/tensor.hpp"

namespace erienet {

enum class Guidance { none_bn, gcg_ln, gcg_bn };
enum class BlockVariant { rb, db, rdb, rdb_star, crdb };

std::string to_string(Guidance g);
std::string to_string(BlockVariant b);
Guidance parse_guidance(const std::string& s);
BlockVariant parse_block_variant(const std::string& s);

struct ModelConfig {
  std::vector<int> scales{16, 8, 4};
  // Keyed by scale; entries exist for all of 16, 8, 4 even when a scale is
  // dropped, because the tail width is always widths[4].
  std::map<int, std::size_t> widths{{16, 64}, {8, 48}, {4, 32}};
  std::map<int, std::size_t> growth{{16, 32}, {8, 24}, {4, 16}};
  std::map<int, std::size_t> crdb_depths{{16, 4}, {8, 3}, {4, 2}};
  std::size_t parallel_crdbs_at_16 = 3;
  Guidance guidance = Guidance::gcg_bn;
  BlockVariant block_variant = BlockVariant::crdb;
  int eca_kernel = 3;
  std::size_t gcg_width = 32;  // shared trunk channels of the guidance branch

  /// Throws ConfigError listing every violated constraint.
  void validate() const;
  /// Scales in descending order (16 first).
  std::vector<int> sorted_scales() const;
  std::size_t tail_width() const { return widths.at(4); }
  bool uses_san() const { return guidance != Guidance::none_bn; }

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);

  /// Widths 8/6/4, depths 2/2/1: small enough for full-graph gradient checks.
  static ModelConfig tiny();
};

enum class Module { branch16, branch8, branch4, gcg, fusion, head };
std::string to_string(Module m);

/// One primitive of the network graph, in execution order. Shapes are
/// NCHW with N = 1 for manifests.
struct LayerEntry {
  std::string name;
  std::string type;
  Module module = Module::head;
  std::vector<Shape> in_shapes;
  Shape out_shape;
  std::size_t params = 0;
  std::uint64_t flops = 0;
  // Convolution hyperparameters (conv2d / depthwise_conv2d / conv1d).
  std::size_t cin = 0, cout = 0, kernel = 0;
  int stride = 1, pad = 0;
  bool bias = false;
  std::string init;
  std::string note;
};

/// Graph of the configured network on an H x W mosaic (H, W divisible by 32).
std::vector<LayerEntry> describe(const ModelConfig& config, std::size_t height, std::size_t width);

struct FlopReport {
  std::map<std::string, std::uint64_t> per_module;
  std::uint64_t total = 0;
};

FlopReport flop_count(const ModelConfig& config, std::size_t height, std::size_t width);
std::size_t param_count(const ModelConfig& config);
/// {config, height, width, layers: [{name, type, module, in_shape, out_shape, params, flops, note?}],
///  per_module_flops, total_params, total_flops, gflops}
nlohmann::json manifest(const ModelConfig& config, std::size_t height, std::size_t width);

/// Parameter and flop cost of one convolution; groups == Cin gives a depthwise conv.
struct LayerCost {
  Shape out;
  std::size_t params = 0;
  std::uint64_t flops = 0;
};
LayerCost conv2d_cost(const Shape& in, std::size_t cout, std::size_t kernel, int stride, int pad, bool bias,
                      std::size_t groups = 1);

/// Called with (primitive name, output) for every executed primitive, in order.
template <typename T>
using ForwardObserver = std::function<void(const std::string&, const Tensor<T>&)>;

template <typename T>
class Model {
 public:
  struct Named {
    std::string name;
    Tensor<T> tensor;
  };

  Model() = default;
  /// Deterministic: every tensor is drawn from its own stream keyed by (seed, name).
  static Model build(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  const std::vector<Named>& params() const { return params_; }
  Tensor<T>& param(const std::string& name);
  const Tensor<T>& param(const std::string& name) const;
  bool has_param(const std::string& name) const { return index_.count(name) != 0; }
  std::size_t param_count() const;

  std::map<std::string, BatchNormStats<T>>& norm_stats() { return stats_; }
  const std::map<std::string, BatchNormStats<T>>& norm_stats() const { return stats_; }

  void set_requires_grad(bool on);
  void zero_grad();

  /// packed: [N, 4, H/2, W/2]; green: [N, 2, H/2, W/2]; returns [N, 3, H, W].
  /// Eval clamps to [0, 1] and may run the scale branches concurrently.
  Tensor<T> forward(const Tensor<T>& packed, const Tensor<T>& green, Mode mode,
                    const ForwardObserver<T>* observer = nullptr);

  template <typename U>
  Model<U> cast() const {
    Model<U> out;
    out.config_ = config_;
    for (const auto& p : params_) out.add_param(p.name, p.tensor.template cast<U>());
    for (const auto& [name, s] : stats_) {
      BatchNormStats<U> t;
      t.running_mean.assign(s.running_mean.begin(), s.running_mean.end());
      t.running_var.assign(s.running_var.begin(), s.running_var.end());
      t.initialized = s.initialized;
      t.momentum = static_cast<U>(s.momentum);
      out.stats_.emplace(name, std::move(t));
    }
    return out;
  }

  /// Used by checkpoint loading: registers a tensor under a unique name.
  void add_param(const std::string& name, Tensor<T> t);
  void set_config(const ModelConfig& c) { config_ = c; }

 private:
  template <typename U>
  friend class Model;

  ModelConfig config_;
  std::vector<Named> params_;
  std::unordered_map<std::string, std::size_t> index_;
  std::map<std::string, BatchNormStats<T>> stats_;
};

struct BenchResult {
  std::vector<double> samples_ms;
  double mean_ms = 0.0;
  double fps = 0.0;
};

/// Times eval-mode forwards on a batch-1 mosaic; the first `warmup` runs are discarded.
BenchResult benchmark(Model<float>& model, std::size_t height, std::size_t width, std::size_t repeats,
                      std::size_t warmup = 3);

}  // namespace erienet
