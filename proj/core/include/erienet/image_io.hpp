#pragma once

#include <filesystem>
#include <utility>

#include "erienet/bayer.hpp"
#include "erienet/tensor.hpp"

namespace erienet {

/// Binary P5 reader. 16-bit big-endian samples when maxval > 255, bytes otherwise.
RawMosaic read_pgm(const std::filesystem::path& path);
/// Writes a P5 file with maxval 65535.
void write_pgm(const RawMosaic& m, const std::filesystem::path& path);

/// `<stem>.json` next to the image.
std::filesystem::path sidecar_path(const std::filesystem::path& image);
SidecarMeta read_sidecar(const std::filesystem::path& path);
void write_sidecar(const SidecarMeta& meta, const std::filesystem::path& path);

/// Mosaic plus validated sidecar; the sidecar's white_level, if any, replaces the default.
std::pair<RawMosaic, SidecarMeta> load_mosaic(const std::filesystem::path& path);

/// [1, 3, H, W] in [0, 1] -> P6, maxval 255, round(v * 255) after clamping.
void write_ppm(const Tensor<float>& rgb, const std::filesystem::path& path);
/// P6 (maxval up to 65535) -> [1, 3, H, W] in [0, 1].
Tensor<float> read_ppm(const std::filesystem::path& path);

}  // namespace erienet
