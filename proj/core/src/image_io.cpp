#include "erienet/image_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <nlohmann/json.hpp>

#include "erienet/error.hpp"

namespace erienet {
namespace {

std::string read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_all(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

// Netpbm header: magic, then width, height, maxval separated by whitespace
// and '#' comments, then exactly one whitespace byte before the raster.
struct NetpbmHeader {
  std::size_t width = 0, height = 0, maxval = 0;
  std::size_t data_offset = 0;
};

NetpbmHeader parse_header(const std::string& bytes, const char* magic, const std::string& name) {
  if (bytes.size() < 2 || bytes.compare(0, 2, magic) != 0) {
    throw FormatError(name + ": expected magic " + magic);
  }
  std::size_t pos = 2;
  auto next_number = [&](const char* what) -> std::size_t {
    for (;;) {
      while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
      if (pos < bytes.size() && bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        continue;
      }
      break;
    }
    if (pos >= bytes.size()) throw TruncatedError(name + ": header ends before " + what);
    if (!std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      throw FormatError(name + ": malformed " + std::string(what) + " in header");
    }
    std::size_t v = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + static_cast<std::size_t>(bytes[pos] - '0');
      if (v > (1u << 30)) throw FormatError(name + ": " + what + " out of range");
      ++pos;
    }
    return v;
  };
  NetpbmHeader h;
  h.width = next_number("width");
  h.height = next_number("height");
  h.maxval = next_number("maxval");
  if (h.width == 0 || h.height == 0) throw FormatError(name + ": zero image dimension");
  if (h.maxval == 0 || h.maxval > 65535) throw FormatError(name + ": maxval must be in [1, 65535]");
  if (pos >= bytes.size()) throw TruncatedError(name + ": no raster data");
  if (!std::isspace(static_cast<unsigned char>(bytes[pos]))) throw FormatError(name + ": malformed header terminator");
  h.data_offset = pos + 1;
  return h;
}

std::vector<std::uint16_t> read_samples(const std::string& bytes, const NetpbmHeader& h, std::size_t count,
                                        const std::string& name) {
  const std::size_t bps = h.maxval > 255 ? 2 : 1;
  const std::size_t need = count * bps;
  if (bytes.size() - h.data_offset < need) {
    throw TruncatedError(name + ": payload has " + std::to_string(bytes.size() - h.data_offset) +
                         " bytes, expected " + std::to_string(need));
  }
  std::vector<std::uint16_t> out(count);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + h.data_offset);
  for (std::size_t i = 0; i < count; ++i) {
    out[i] = bps == 2 ? static_cast<std::uint16_t>((p[2 * i] << 8) | p[2 * i + 1]) : p[i];
    if (out[i] > h.maxval) throw FormatError(name + ": sample exceeds maxval");
  }
  return out;
}

double positive_number(const nlohmann::json& j, const char* field, const std::string& name) {
  if (!j.contains(field)) throw FieldError(field, name + ": missing field '" + field + "'");
  const auto& v = j.at(field);
  if (!v.is_number() || !(v.get<double>() > 0.0)) {
    throw FieldError(field, name + ": field '" + field + "' must be a positive number");
  }
  return v.get<double>();
}

}  // namespace

RawMosaic read_pgm(const std::filesystem::path& path) {
  const std::string bytes = read_all(path);
  const std::string name = path.string();
  const NetpbmHeader h = parse_header(bytes, "P5", name);
  RawMosaic m;
  m.width = h.width;
  m.height = h.height;
  m.data = read_samples(bytes, h, h.width * h.height, name);
  return m;
}

void write_pgm(const RawMosaic& m, const std::filesystem::path& path) {
  if (m.data.size() != m.width * m.height) throw ShapeError("mosaic sample count does not match dims");
  std::string bytes = "P5\n" + std::to_string(m.width) + " " + std::to_string(m.height) + "\n65535\n";
  bytes.reserve(bytes.size() + 2 * m.data.size());
  for (std::uint16_t v : m.data) {
    bytes.push_back(static_cast<char>(v >> 8));
    bytes.push_back(static_cast<char>(v & 0xff));
  }
  write_all(path, bytes);
}

std::filesystem::path sidecar_path(const std::filesystem::path& image) {
  auto p = image;
  p.replace_extension(".json");
  return p;
}

SidecarMeta read_sidecar(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw MissingSidecarError("sidecar not found: " + path.string());
  const std::string name = path.string();
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_all(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(name + ": invalid JSON: " + e.what());
  }
  if (!j.is_object()) throw FormatError(name + ": sidecar must be a JSON object");
  SidecarMeta meta;
  meta.exposure_in = positive_number(j, "exposure_in", name);
  meta.exposure_ref = positive_number(j, "exposure_ref", name);
  if (!j.contains("iso")) throw FieldError("iso", name + ": missing field 'iso'");
  if (!j.at("iso").is_number_integer()) throw FieldError("iso", name + ": field 'iso' must be an integer");
  meta.iso = j.at("iso").get<int>();
  if (j.contains("ratio") && !j.at("ratio").is_null()) meta.ratio = positive_number(j, "ratio", name);
  if (j.contains("black_level")) {
    const auto& v = j.at("black_level");
    if (!v.is_number() || v.get<double>() < 0.0) {
      throw FieldError("black_level", name + ": field 'black_level' must be a nonnegative number");
    }
    meta.black_level = v.get<double>();
  }
  if (j.contains("white_level")) {
    const double w = positive_number(j, "white_level", name);
    if (w > 65535.0) throw FieldError("white_level", name + ": field 'white_level' exceeds 65535");
    meta.white_level = w;
  }
  return meta;
}

void write_sidecar(const SidecarMeta& meta, const std::filesystem::path& path) {
  nlohmann::json j = {{"exposure_in", meta.exposure_in}, {"exposure_ref", meta.exposure_ref}, {"iso", meta.iso}};
  if (meta.ratio) j["ratio"] = *meta.ratio;
  if (meta.black_level != 0.0) j["black_level"] = meta.black_level;
  if (meta.white_level) j["white_level"] = *meta.white_level;
  write_all(path, j.dump(2) + "\n");
}

std::pair<RawMosaic, SidecarMeta> load_mosaic(const std::filesystem::path& path) {
  RawMosaic m = read_pgm(path);
  SidecarMeta meta = read_sidecar(sidecar_path(path));
  if (meta.white_level) m.white_level = static_cast<std::uint16_t>(std::lround(*meta.white_level));
  if (meta.black_level >= m.white_level) {
    throw FieldError("black_level", "black_level must be below the white level");
  }
  try {
    m.validate();
  } catch (const Error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return {std::move(m), meta};
}

void write_ppm(const Tensor<float>& rgb, const std::filesystem::path& path) {
  if (rgb.batch() != 1 || rgb.channels() != 3) {
    throw ShapeError("write_ppm expects [1, 3, H, W], got " + to_string(rgb.shape()));
  }
  const std::size_t h = rgb.height(), w = rgb.width();
  std::string bytes = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  bytes.reserve(bytes.size() + 3 * w * h);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const float v = std::clamp(rgb.at(0, c, y, x), 0.0f, 1.0f);
        bytes.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0f))));
      }
  write_all(path, bytes);
}

Tensor<float> read_ppm(const std::filesystem::path& path) {
  const std::string bytes = read_all(path);
  const std::string name = path.string();
  const NetpbmHeader h = parse_header(bytes, "P6", name);
  const auto samples = read_samples(bytes, h, 3 * h.width * h.height, name);
  Tensor<float> out(Shape{1, 3, h.height, h.width});
  const float inv = 1.0f / static_cast<float>(h.maxval);
  for (std::size_t y = 0; y < h.height; ++y)
    for (std::size_t x = 0; x < h.width; ++x)
      for (std::size_t c = 0; c < 3; ++c) out.at(0, c, y, x) = samples[(y * h.width + x) * 3 + c] * inv;
  return out;
}

}  // namespace erienet
