#include "erienet/bayer.hpp"

#include <algorithm>
#include <cmath>

#include "erienet/error.hpp"
#include "erienet/ops.hpp"

namespace erienet {

void RawMosaic::validate() const {
  if (width == 0 || height == 0 || width % 2 != 0 || height % 2 != 0) {
    throw ShapeError("mosaic dims must be even and nonzero, got " + std::to_string(height) + "x" +
                     std::to_string(width));
  }
  if (data.size() != width * height) {
    throw ShapeError("mosaic holds " + std::to_string(data.size()) + " samples, expected " +
                     std::to_string(width * height));
  }
  const auto peak = std::max_element(data.begin(), data.end());
  if (*peak > white_level) {
    throw ArgumentError("mosaic sample " + std::to_string(*peak) + " exceeds white level " +
                        std::to_string(white_level));
  }
}

double SidecarMeta::amplification_ratio() const {
  if (ratio) return *ratio;
  if (exposure_in <= 0.0) throw ArgumentError("exposure_in must be positive");
  return exposure_ref / exposure_in;
}

Tensor<float> pack(const RawMosaic& m, double black_level) {
  m.validate();
  if (black_level < 0.0 || black_level >= m.white_level) {
    throw ArgumentError("black level must lie in [0, white_level)");
  }
  const std::size_t h2 = m.height / 2, w2 = m.width / 2;
  Tensor<float> out(Shape{1, 4, h2, w2});
  auto od = out.mutable_data();
  const double range = static_cast<double>(m.white_level) - black_level;
  const std::size_t plane = h2 * w2;
  for (std::size_t y = 0; y < h2; ++y)
    for (std::size_t x = 0; x < w2; ++x) {
      const std::size_t p = y * w2 + x;
      const std::uint16_t s[4] = {m.at(2 * y, 2 * x), m.at(2 * y, 2 * x + 1), m.at(2 * y + 1, 2 * x),
                                  m.at(2 * y + 1, 2 * x + 1)};
      for (std::size_t c = 0; c < 4; ++c) {
        od[c * plane + p] = static_cast<float>(std::max(0.0, s[c] - black_level) / range);
      }
    }
  return out;
}

RawMosaic unpack(const Tensor<float>& packed, std::uint16_t white_level) {
  if (packed.channels() != 4) throw ShapeError("unpack expects 4 channels, got " + to_string(packed.shape()));
  RawMosaic m;
  m.height = packed.height() * 2;
  m.width = packed.width() * 2;
  m.white_level = white_level;
  m.data.resize(m.width * m.height);
  for (std::size_t y = 0; y < packed.height(); ++y)
    for (std::size_t x = 0; x < packed.width(); ++x)
      for (std::size_t c = 0; c < 4; ++c) {
        const double v = std::clamp(static_cast<double>(packed.at(0, c, y, x)), 0.0, 1.0);
        m.data[(2 * y + c / 2) * m.width + 2 * x + c % 2] =
            static_cast<std::uint16_t>(std::lround(v * white_level));
      }
  return m;
}

Tensor<float> amplify(const Tensor<float>& packed, double ratio, float clamp_max) {
  if (!(ratio > 0.0)) throw ArgumentError("amplification ratio must be positive, got " + std::to_string(ratio));
  Tensor<float> out(packed.shape());
  auto in = packed.data();
  auto od = out.mutable_data();
  for (std::size_t i = 0; i < in.size(); ++i) {
    od[i] = static_cast<float>(std::clamp(static_cast<double>(in[i]) * ratio, 0.0, static_cast<double>(clamp_max)));
  }
  return out;
}

Tensor<float> amplify(const Tensor<float>& packed, const SidecarMeta& meta) {
  return amplify(packed, meta.amplification_ratio());
}

std::vector<Tensor<float>> crop_patches(const Tensor<float>& packed, std::size_t patch) {
  if (patch == 0) throw ArgumentError("patch size must be positive");
  std::vector<Tensor<float>> out;
  const Shape& s = packed.shape();
  const std::size_t rows = s.h / patch, cols = s.w / patch;
  for (std::size_t py = 0; py < rows; ++py)
    for (std::size_t px = 0; px < cols; ++px) {
      Tensor<float> t(Shape{s.n, s.c, patch, patch});
      for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t c = 0; c < s.c; ++c)
          for (std::size_t y = 0; y < patch; ++y)
            for (std::size_t x = 0; x < patch; ++x)
              t.at(n, c, y, x) = packed.at(n, c, py * patch + y, px * patch + x);
      out.push_back(std::move(t));
    }
  return out;
}

Augmentation draw_augmentation(std::size_t height, std::size_t width, Rng& rng) {
  Augmentation a;
  a.flip = static_cast<Augmentation::Flip>(rng.index(3));
  a.quarter_turns = static_cast<int>(rng.index(4));
  if (height != width && a.quarter_turns % 2 == 1) a.quarter_turns = 2 * static_cast<int>(rng.index(2));
  return a;
}

Tensor<float> apply_augmentation(const Tensor<float>& x, const Augmentation& a) {
  const Shape& s = x.shape();
  const int turns = ((a.quarter_turns % 4) + 4) % 4;
  if (turns % 2 == 1 && s.h != s.w) throw ShapeError("90/270 degree rotation needs a square patch");
  Tensor<float> out(s);
  const std::size_t h = s.h, w = s.w;
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t xx = 0; xx < w; ++xx) {
          // Where does output (y, xx) come from? Undo the rotation, then the flip.
          std::size_t sy = y, sx = xx;
          switch (turns) {
            case 1: sy = xx; sx = w - 1 - y; break;          // ccw: out[y][x] = in[x][W-1-y]
            case 2: sy = h - 1 - y; sx = w - 1 - xx; break;
            case 3: sy = h - 1 - xx; sx = y; break;
            default: break;
          }
          if (a.flip == Augmentation::Flip::horizontal) sx = w - 1 - sx;
          if (a.flip == Augmentation::Flip::vertical) sy = h - 1 - sy;
          out.at(n, c, y, xx) = x.at(n, c, sy, sx);
        }
  return out;
}

Tensor<float> augment(const Tensor<float>& packed, Rng& rng) {
  return apply_augmentation(packed, draw_augmentation(packed.height(), packed.width(), rng));
}

Tensor<float> extract_green(const Tensor<float>& packed) {
  if (packed.channels() != 4) {
    throw ShapeError("extract_green expects 4 packed channels, got " + to_string(packed.shape()));
  }
  return channel_slice(packed, 1, 2);
}

double channel_entropy(std::span<const float> plane, std::size_t bins) {
  if (plane.empty()) throw ArgumentError("channel_entropy of an empty plane");
  if (bins == 0) throw ArgumentError("channel_entropy needs at least one bin");
  std::vector<std::size_t> hist(bins, 0);
  for (float v : plane) {
    if (!(v >= 0.0f && v <= 1.0f)) throw ArgumentError("channel_entropy expects values in [0, 1]");
    const auto b = std::min(bins - 1, static_cast<std::size_t>(static_cast<double>(v) * static_cast<double>(bins)));
    ++hist[b];
  }
  double h = 0.0;
  const double total = static_cast<double>(plane.size());
  for (std::size_t count : hist) {
    if (count == 0) continue;
    const double p = static_cast<double>(count) / total;
    h -= p * std::log2(p);
  }
  return std::max(0.0, h);
}

}  // namespace erienet
