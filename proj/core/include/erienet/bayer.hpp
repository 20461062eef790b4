#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "erienet/rng.hpp"
#include "erienet/tensor.hpp"

namespace erienet {

/// Single-plane RGGB mosaic, row-major 16-bit samples.
struct RawMosaic {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint16_t> data;
  std::uint16_t white_level = 65535;

  std::uint16_t at(std::size_t y, std::size_t x) const { return data[y * width + x]; }
  /// Throws ShapeError on odd or mismatched dims, ArgumentError on samples above white_level.
  void validate() const;
};

struct SidecarMeta {
  double exposure_in = 0.0;
  double exposure_ref = 0.0;
  int iso = 0;
  std::optional<double> ratio;
  double black_level = 0.0;
  std::optional<double> white_level;

  /// Explicit override if present, else exposure_ref / exposure_in.
  double amplification_ratio() const;
};

/// [1, 4, H/2, W/2] with channel order R, G1, G2, B, normalized by the white level
/// after black-level subtraction.
Tensor<float> pack(const RawMosaic& m, double black_level = 0.0);
/// Inverse of pack for the first batch entry; rounds to the nearest integer.
RawMosaic unpack(const Tensor<float>& packed, std::uint16_t white_level = 65535);

Tensor<float> amplify(const Tensor<float>& packed, double ratio, float clamp_max = 1.0f);
Tensor<float> amplify(const Tensor<float>& packed, const SidecarMeta& meta);

/// Non-overlapping row-major tiles; border remainders are dropped.
std::vector<Tensor<float>> crop_patches(const Tensor<float>& packed, std::size_t patch);

/// One element of {identity, hflip, vflip} x {0, 90, 180, 270}.
struct Augmentation {
  enum class Flip : std::uint8_t { none, horizontal, vertical };
  Flip flip = Flip::none;
  int quarter_turns = 0;  // counter-clockwise
};

Augmentation draw_augmentation(std::size_t height, std::size_t width, Rng& rng);
/// Flip first, then rotate. Applies to every channel of every batch entry.
Tensor<float> apply_augmentation(const Tensor<float>& x, const Augmentation& a);
Tensor<float> augment(const Tensor<float>& packed, Rng& rng);

/// Channels G1, G2 of a packed tensor.
Tensor<float> extract_green(const Tensor<float>& packed);

/// Shannon entropy in bits of a histogram over `bins` equal buckets on [0, 1].
double channel_entropy(std::span<const float> plane, std::size_t bins = 256);

}  // namespace erienet
