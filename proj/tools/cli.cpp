#include "cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "erienet/bayer.hpp"
#include "erienet/error.hpp"
#include "erienet/gradient_suite.hpp"
#include "erienet/image_io.hpp"
#include "erienet/losses.hpp"
#include "erienet/model.hpp"
#include "erienet/parallel.hpp"
#include "erienet/trainer.hpp"

namespace erienet {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

// Bad flag values or combinations that CLI11 cannot catch on its own.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

constexpr std::size_t kAlign = 32;
constexpr std::size_t kPatch = 32;

struct ModelFlags {
  std::string config_path;
  std::vector<int> scales;
  std::string guidance;
  std::string block;

  void attach(CLI::App* cmd, bool with_config_file) {
    if (with_config_file) {
      cmd->add_option("--config", config_path, "Model config JSON (as stored in checkpoints)")
          ->check(CLI::ExistingFile);
    }
    cmd->add_option("--scales", scales, "Comma-separated branch scales, e.g. 16,8,4")->delimiter(',');
    cmd->add_option("--guidance", guidance, "gcg_bn | gcg_ln | none_bn");
    cmd->add_option("--block", block, "crdb | rdb | rdb_star | db | rb");
  }

  ModelConfig build() const {
    ModelConfig c;
    try {
      if (!config_path.empty()) {
        std::ifstream in(config_path);
        c = ModelConfig::from_json(json::parse(in));
      }
      if (!scales.empty()) c.scales = scales;
      if (!guidance.empty()) c.guidance = parse_guidance(guidance);
      if (!block.empty()) c.block_variant = parse_block_variant(block);
      c.validate();
    } catch (const json::exception& e) {
      throw UsageError(std::string("invalid --config: ") + e.what());
    } catch (const ArgumentError& e) {
      throw UsageError(e.what());
    } catch (const ConfigError& e) {
      throw UsageError(e.what());
    }
    return c;
  }
};

void require_parent_dir(const std::string& path, const char* flag) {
  const fs::path parent = fs::path(path).parent_path();
  if (!parent.empty() && !fs::is_directory(parent)) {
    throw UsageError(std::string(flag) + ": directory does not exist: " + parent.string());
  }
}

void require_divisible(std::size_t h, std::size_t w) {
  if (h == 0 || w == 0 || h % kAlign != 0 || w % kAlign != 0) {
    throw UsageError("--height/--width must be positive multiples of 32, got " + std::to_string(h) + "x" +
                     std::to_string(w));
  }
}

RawMosaic crop_mosaic(const RawMosaic& m, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w) {
  RawMosaic out;
  out.height = h;
  out.width = w;
  out.white_level = m.white_level;
  out.data.reserve(h * w);
  for (std::size_t y = 0; y < h; ++y) {
    const auto row = m.data.begin() + static_cast<std::ptrdiff_t>((y0 + y) * m.width + x0);
    out.data.insert(out.data.end(), row, row + static_cast<std::ptrdiff_t>(w));
  }
  return out;
}

Tensor<float> crop_rgb(const Tensor<float>& t, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w) {
  Tensor<float> out(Shape{1, t.channels(), h, w});
  for (std::size_t c = 0; c < t.channels(); ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out.at(0, c, y, x) = t.at(0, c, y0 + y, x0 + x);
  return out;
}

std::string format_metrics(double p, double s) {
  char buf[96];
  if (std::isinf(p)) {
    std::snprintf(buf, sizeof buf, "PSNR: inf dB, SSIM: %.6f", s);
  } else {
    std::snprintf(buf, sizeof buf, "PSNR: %.6f dB, SSIM: %.6f", p, s);
  }
  return buf;
}

json psnr_json(double p) { return std::isinf(p) ? json("inf") : json(p); }

// ---- enhance ----

struct EnhanceArgs {
  std::string input, weights, output, ratio = "auto", reference;
};

int cmd_enhance(const EnhanceArgs& a, std::ostream& out, std::ostream& err) {
  require_parent_dir(a.output, "--output");
  std::optional<double> fixed_ratio;
  if (a.ratio != "auto") {
    double r = 0.0;
    const char* end = a.ratio.data() + a.ratio.size();
    const auto [ptr, ec] = std::from_chars(a.ratio.data(), end, r);
    if (ec != std::errc() || ptr != end || !(r > 0.0) || !std::isfinite(r)) {
      throw UsageError("--ratio must be a positive number or 'auto', got '" + a.ratio + "'");
    }
    fixed_ratio = r;
  }

  Checkpoint cp = load_checkpoint(a.weights);

  RawMosaic mosaic;
  double ratio = 0.0;
  double black_level = 0.0;
  if (fixed_ratio) {
    // An explicit ratio means the sidecar is not consulted at all.
    mosaic = read_pgm(a.input);
    mosaic.validate();
    ratio = *fixed_ratio;
  } else {
    auto [m, meta] = load_mosaic(a.input);
    mosaic = std::move(m);
    ratio = meta.amplification_ratio();
    black_level = meta.black_level;
  }

  const std::size_t full_h = mosaic.height, full_w = mosaic.width;
  const std::size_t h = mosaic.height / kAlign * kAlign;
  const std::size_t w = mosaic.width / kAlign * kAlign;
  if (h == 0 || w == 0) {
    throw ShapeError("mosaic " + std::to_string(mosaic.width) + "x" + std::to_string(mosaic.height) +
                     " is smaller than 32x32");
  }
  // Even offsets keep the RGGB phase.
  const std::size_t y0 = ((mosaic.height - h) / 2) & ~std::size_t{1};
  const std::size_t x0 = ((mosaic.width - w) / 2) & ~std::size_t{1};
  if (h != mosaic.height || w != mosaic.width) {
    err << "note: center-cropped " << mosaic.width << "x" << mosaic.height << " to " << w << "x" << h
        << " at offset (" << x0 << ", " << y0 << ")\n";
    mosaic = crop_mosaic(mosaic, y0, x0, h, w);
  }

  const Tensor<float> packed = amplify(pack(mosaic, black_level), ratio);
  const Tensor<float> green = extract_green(packed);
  const Tensor<float> rgb = cp.model.forward(packed, green, Mode::eval);
  write_ppm(rgb, a.output);

  if (!a.reference.empty()) {
    Tensor<float> ref = read_ppm(a.reference);
    // Accept a reference of either the original or the cropped size.
    if (ref.height() == full_h && ref.width() == full_w) {
      ref = crop_rgb(ref, y0, x0, h, w);
    } else if (ref.height() != h || ref.width() != w) {
      throw ShapeError("reference is " + std::to_string(ref.width()) + "x" + std::to_string(ref.height()) +
                       ", expected " + std::to_string(full_w) + "x" + std::to_string(full_h));
    }
    out << format_metrics(psnr(rgb, ref), ssim_metric(rgb, ref)) << "\n";
  }
  return 0;
}

// ---- train ----

struct TrainArgs {
  std::string data;
  bool synthetic = false;
  std::size_t steps = 0;
  std::uint64_t seed = 0;
  std::string out;
  ModelFlags model;
};

std::vector<Sample> load_pairs(const fs::path& dir, std::ostream& err) {
  if (!fs::is_directory(dir)) throw IoError("--data is not a directory: " + dir.string());
  std::vector<fs::path> mosaics;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".pgm") mosaics.push_back(e.path());
  }
  std::sort(mosaics.begin(), mosaics.end());

  std::vector<Sample> samples;
  std::size_t pairs = 0;
  for (const auto& p : mosaics) {
    fs::path target_path = p;
    target_path.replace_extension(".ppm");
    if (!fs::exists(target_path)) continue;
    auto [m, meta] = load_mosaic(p);
    const Tensor<float> target = read_ppm(target_path);
    if (target.height() != m.height || target.width() != m.width) {
      throw ShapeError(target_path.string() + " is " + std::to_string(target.width()) + "x" +
                       std::to_string(target.height()) + ", mosaic is " + std::to_string(m.width) + "x" +
                       std::to_string(m.height));
    }
    ++pairs;
    const double ratio = meta.amplification_ratio();
    for (std::size_t y = 0; y + kPatch <= m.height; y += kPatch)
      for (std::size_t x = 0; x + kPatch <= m.width; x += kPatch) {
        samples.push_back(make_sample(crop_mosaic(m, y, x, kPatch, kPatch), crop_rgb(target, y, x, kPatch, kPatch),
                                      ratio, static_cast<std::uint16_t>(std::lround(meta.black_level))));
      }
  }
  if (samples.empty()) {
    throw IoError("no usable .pgm/.ppm pairs of at least 32x32 in " + dir.string());
  }
  err << "loaded " << samples.size() << " patches from " << pairs << " pairs\n";
  return samples;
}

int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  if (a.synthetic == !a.data.empty()) throw UsageError("train needs exactly one of --data or --synthetic");
  require_parent_dir(a.out, "--out");
  const ModelConfig config = a.model.build();

  std::vector<Sample> data;
  if (a.synthetic) {
    SyntheticOptions so;
    so.seed = a.seed;
    data = synthetic_dataset(so);
  } else {
    data = load_pairs(a.data, err);
  }

  TrainOptions opts;
  opts.seed = a.seed;
  Trainer trainer(Model<float>::build(config, a.seed), std::move(data), opts);
  out << "step,loss\n";
  char line[64];
  for (std::size_t i = 1; i <= a.steps; ++i) {
    const double loss = trainer.step();
    std::snprintf(line, sizeof line, "%zu,%.9g\n", i, loss);
    out << line;
  }
  save_checkpoint(a.out, trainer.checkpoint());
  err << "wrote " << a.out << "\n";
  return 0;
}

// ---- report / bench ----

struct SizeArgs {
  std::size_t height = 256, width = 256, repeats = 10;
  std::uint64_t seed = 0;
  ModelFlags model;
};

int cmd_report(const SizeArgs& a, std::ostream& out) {
  require_divisible(a.height, a.width);
  out << manifest(a.model.build(), a.height, a.width).dump(2) << "\n";
  return 0;
}

int cmd_bench(const SizeArgs& a, std::ostream& out, std::ostream& err) {
  require_divisible(a.height, a.width);
  if (a.repeats == 0) throw UsageError("--repeats must be at least 1");
  const ModelConfig config = a.model.build();
  Model<float> model = Model<float>::build(config, a.seed);
  err << "timing " << a.repeats << " forwards at " << a.width << "x" << a.height << " on " << max_threads()
      << " thread(s)\n";
  const BenchResult r = benchmark(model, a.height, a.width, a.repeats);
  json j = {{"height", a.height}, {"width", a.width},     {"repeats", a.repeats},
            {"threads", max_threads()}, {"samples_ms", r.samples_ms}, {"mean_ms", r.mean_ms},
            {"fps", r.fps}};
  out << j.dump(2) << "\n";
  return 0;
}

// ---- gradcheck / metrics / entropy ----

int cmd_gradcheck(std::uint64_t seed, std::ostream& out, std::ostream& err) {
  SuiteOptions opts;
  opts.seed = seed;
  const SuiteReport report = run_gradient_suite(opts);
  json entries = json::array();
  for (const auto& e : report.entries) {
    entries.push_back({{"group", e.group},
                       {"name", e.name},
                       {"trials", e.trials},
                       {"checked", e.checked},
                       {"skipped", e.skipped},
                       {"unstable", e.unstable},
                       {"max_rel_err", e.max_rel_err},
                       {"unguarded_max_rel_err", e.unguarded_max_rel_err},
                       {"tolerance", e.tolerance},
                       {"passed", e.passed()}});
    if (!e.passed()) err << "FAIL " << e.group << "/" << e.name << ": " << e.max_rel_err << "\n";
  }
  const json j = {{"seed", seed},
                  {"passed", report.passed()},
                  {"worst", {{"op", report.worst("op")}, {"loss", report.worst("loss")}, {"network", report.worst("network")}}},
                  {"entries", entries}};
  out << j.dump(2) << "\n";
  return report.passed() ? 0 : 1;
}

int cmd_metrics(const std::string& a, const std::string& b, std::ostream& out) {
  const Tensor<float> x = read_ppm(a);
  const Tensor<float> y = read_ppm(b);
  if (x.shape() != y.shape()) {
    throw ShapeError("images differ in size: " + to_string(x.shape()) + " vs " + to_string(y.shape()));
  }
  const json j = {{"psnr_db", psnr_json(psnr(x, y))}, {"ssim", ssim_metric(x, y)}};
  out << j.dump() << "\n";
  return 0;
}

int cmd_entropy(const std::string& input, std::ostream& out) {
  RawMosaic m;
  double black_level = 0.0;
  if (fs::exists(sidecar_path(input))) {
    auto [mm, meta] = load_mosaic(input);
    m = std::move(mm);
    black_level = meta.black_level;
  } else {
    m = read_pgm(input);
    m.validate();
  }
  const Tensor<float> packed = pack(m, black_level);
  static const char* names[] = {"R", "G1", "G2", "B"};
  const std::size_t plane = packed.height() * packed.width();
  json channels = json::array();
  for (std::size_t c = 0; c < 4; ++c) {
    const auto span = packed.data().subspan(c * plane, plane);
    channels.push_back({{"name", names[c]}, {"entropy", channel_entropy(span)}, {"green", c == 1 || c == 2}});
  }
  out << json{{"input", input}, {"bins", 256}, {"channels", channels}}.dump(2) << "\n";
  return 0;
}

// Diagnostics are kept to one line.
std::string one_line(std::string s) {
  while (!s.empty() && s.back() == '\n') s.pop_back();
  for (std::size_t i; (i = s.find('\n')) != std::string::npos;) s.replace(i, 1, "; ");
  return s;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Low-light RAW enhancement: inference, training and analysis", "erienet"};
  app.require_subcommand(1);

  EnhanceArgs enhance;
  auto* c_enhance = app.add_subcommand("enhance", "Enhance a dark RAW mosaic (PGM) into an sRGB PPM");
  c_enhance->add_option("--input", enhance.input, "16-bit PGM mosaic")->required()->check(CLI::ExistingFile);
  c_enhance->add_option("--weights", enhance.weights, "Checkpoint file")->required()->check(CLI::ExistingFile);
  c_enhance->add_option("--output", enhance.output, "Output PPM")->required();
  c_enhance->add_option("--ratio", enhance.ratio, "Amplification ratio, or 'auto' to use the sidecar")
      ->capture_default_str();
  c_enhance->add_option("--reference", enhance.reference, "Reference PPM for PSNR/SSIM")->check(CLI::ExistingFile);

  TrainArgs train;
  auto* c_train = app.add_subcommand("train", "Train on image pairs or the synthetic toy set");
  auto* data_opt = c_train->add_option("--data", train.data, "Directory of <stem>.pgm/.json/.ppm triples")
                       ->check(CLI::ExistingDirectory);
  auto* synth_opt = c_train->add_flag("--synthetic", train.synthetic, "Use the seeded synthetic dataset");
  data_opt->excludes(synth_opt);
  c_train->add_option("--steps", train.steps, "Adam steps")->required();
  c_train->add_option("--seed", train.seed, "Seed for weights, data and batches")->capture_default_str();
  c_train->add_option("--out", train.out, "Checkpoint to write")->required();
  train.model.attach(c_train, false);

  SizeArgs report;
  auto* c_report = app.add_subcommand("report", "Print the layer manifest with params and FLOPs as JSON");
  report.model.attach(c_report, true);
  c_report->add_option("--height", report.height)->capture_default_str();
  c_report->add_option("--width", report.width)->capture_default_str();

  SizeArgs bench;
  auto* c_bench = app.add_subcommand("bench", "Time eval-mode forwards");
  bench.model.attach(c_bench, true);
  c_bench->add_option("--height", bench.height)->capture_default_str();
  c_bench->add_option("--width", bench.width)->capture_default_str();
  c_bench->add_option("--repeats", bench.repeats)->capture_default_str();
  c_bench->add_option("--seed", bench.seed)->capture_default_str();

  std::uint64_t gc_seed = 0;
  auto* c_grad = app.add_subcommand("gradcheck", "Run the 64-bit finite-difference gradient suite");
  c_grad->add_option("--seed", gc_seed)->capture_default_str();

  std::string metric_a, metric_b;
  auto* c_metrics = app.add_subcommand("metrics", "PSNR and SSIM between two PPM images");
  c_metrics->add_option("--a", metric_a)->required()->check(CLI::ExistingFile);
  c_metrics->add_option("--b", metric_b)->required()->check(CLI::ExistingFile);

  std::string entropy_input;
  auto* c_entropy = app.add_subcommand("entropy", "Per-channel entropy of a packed mosaic");
  c_entropy->add_option("--input", entropy_input)->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << one_line(e.what()) << "\n";
    return 2;
  }

  try {
    if (*c_enhance) return cmd_enhance(enhance, out, err);
    if (*c_train) return cmd_train(train, out, err);
    if (*c_report) return cmd_report(report, out);
    if (*c_bench) return cmd_bench(bench, out, err);
    if (*c_grad) return cmd_gradcheck(gc_seed, out, err);
    if (*c_metrics) return cmd_metrics(metric_a, metric_b, out);
    if (*c_entropy) return cmd_entropy(entropy_input, out);
  } catch (const UsageError& e) {
    err << "error: " << one_line(e.what()) << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << one_line(e.what()) << "\n";
    return 1;
  }
  return 2;
}

}  // namespace erienet
