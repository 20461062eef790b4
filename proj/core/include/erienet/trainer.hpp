#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "erienet/bayer.hpp"
#include "erienet/losses.hpp"
#include "erienet/model.hpp"
#include "erienet/rng.hpp"

namespace erienet {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  AdamConfig config;
  std::uint64_t step = 0;
  // Keyed by parameter name; created zero-filled on first use.
  std::map<std::string, std::vector<T>> m, v;
};

/// One bias-corrected Adam update of every parameter from its accumulated
/// gradient, each gradient multiplied by `grad_scale` first (used for clipping).
/// Throws StateError naming the first parameter without a gradient.
template <typename T>
void adam_step(Model<T>& model, AdamState<T>& state, double grad_scale = 1.0);

/// Same update from externally supplied gradients (e.g. finite differences).
template <typename T>
void adam_step(Model<T>& model, const std::map<std::string, std::vector<T>>& grads, AdamState<T>& state);

/// L2 norm over all parameter gradients (missing gradients count as zero).
template <typename T>
double global_grad_norm(const Model<T>& model);

/// One training pair: amplified packed dark input, its green channels and the bright target.
struct Sample {
  Tensor<float> packed;  // [1, 4, H/2, W/2]
  Tensor<float> green;   // [1, 2, H/2, W/2]
  Tensor<float> target;  // [1, 3, H, W]
};

/// Builds a Sample from a dark mosaic and its bright RGB target.
Sample make_sample(const RawMosaic& dark, const Tensor<float>& target, double ratio, std::uint16_t black_level = 0);

struct SyntheticOptions {
  std::size_t count = 32;
  std::size_t height = 32;
  std::size_t width = 32;
  double ratio = 8.0;
  double noise_sigma = 0.01;  // in the dark, unamplified domain
  std::uint64_t seed = 0;
};

/// Procedural bright scenes (per-channel linear ramps plus a few flat
/// rectangles and discs), mosaicked RGGB, divided by the ratio, noised,
/// quantized to 16 bits, then packed and amplified back.
std::vector<Sample> synthetic_dataset(const SyntheticOptions& options);

struct TrainOptions {
  std::size_t batch = 4;
  std::uint64_t seed = 0;
  AdamConfig adam;
  double clip_norm = 10.0;
  LossWeights loss;
  bool augment = false;
};

/// Everything needed to continue training bit-exactly.
struct Checkpoint {
  Model<float> model;
  std::optional<AdamState<float>> adam;
  std::uint64_t step = 0;
  std::string rng_state;  // empty when the file carries weights only
};

/// Owns the model, optimizer and batch sampler for one training run.
class Trainer {
 public:
  Trainer(Model<float> model, std::vector<Sample> data, TrainOptions options);
  /// Continues from a checkpoint; `options.seed` is ignored in favour of the stored sampler state.
  static Trainer resume(const Checkpoint& cp, std::vector<Sample> data, TrainOptions options);

  /// forward (train mode) -> total loss -> backward -> clip -> Adam. Returns the loss.
  double step();
  std::vector<double> run(std::size_t steps);

  Checkpoint checkpoint() const;
  Model<float>& model() { return model_; }
  const AdamState<float>& adam() const { return adam_; }
  std::uint64_t steps_done() const { return adam_.step; }

 private:
  std::vector<std::size_t> next_batch();

  Model<float> model_;
  std::vector<Sample> data_;
  TrainOptions options_;
  AdamState<float> adam_;
  Rng rng_;
};

/// Runs `steps` updates on `model` in place and returns the per-step loss.
std::vector<double> train_toy(Model<float>& model, const std::vector<Sample>& data, std::size_t steps,
                              std::uint64_t seed, TrainOptions options = {});

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& cp);
/// Throws BadMagicError, VersionError, TruncatedError, NameCollisionError or
/// FieldError / FormatError for inconsistent content.
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& cp);
Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes);

}  // namespace erienet
