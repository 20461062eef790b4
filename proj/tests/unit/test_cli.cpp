#include <gtest/gtest.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cli.hpp"
#include "erienet/bayer.hpp"
#include "erienet/image_io.hpp"
#include "erienet/losses.hpp"
#include "erienet/model.hpp"
#include "erienet/trainer.hpp"
#include "test_support.hpp"

namespace erienet {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

class TempDir {
 public:
  TempDir() : path_(fs::temp_directory_path() / ("erienet_cli_" + std::to_string(::getpid()) + "_" +
                                                  std::to_string(counter_++))) {
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  std::string operator/(const std::string& n) const { return (path_ / n).string(); }

 private:
  static inline int counter_ = 0;
  fs::path path_;
};

struct Result {
  int code = -1;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "erienet");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  Result r;
  r.code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::vector<std::uint8_t> read_bytes(const std::string& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

RawMosaic random_mosaic(std::size_t h, std::size_t w, std::uint64_t seed, std::uint16_t max = 4000) {
  Rng rng = Rng::stream(seed, "cli.mosaic");
  RawMosaic m;
  m.height = h;
  m.width = w;
  m.data.resize(h * w);
  for (auto& v : m.data) v = static_cast<std::uint16_t>(rng.index(max));
  return m;
}

Tensor<float> random_rgb(std::size_t h, std::size_t w, std::uint64_t seed) {
  Rng rng = Rng::stream(seed, "cli.rgb");
  Tensor<float> t(Shape{1, 3, h, w});
  for (auto& v : t.mutable_data()) v = static_cast<float>(rng.index(256)) / 255.0f;
  return t;
}

SidecarMeta meta(double in, double ref) {
  SidecarMeta m;
  m.exposure_in = in;
  m.exposure_ref = ref;
  m.iso = 100;
  return m;
}

// Weights for enhancement tests: an untrained default model saved without optimizer state.
std::string untrained_weights(const TempDir& dir) {
  const std::string p = dir / "init.erie";
  Checkpoint cp;
  cp.model = Model<float>::build(ModelConfig::tiny(), 3);
  save_checkpoint(p, cp);
  return p;
}

// ---- train ----

TEST(CliTrain, SyntheticRunPrintsCsvAndWritesLoadableCheckpoint) {
  TempDir dir;
  const Result r = run({"train", "--synthetic", "--steps", "3", "--seed", "2", "--out", dir / "a.erie"});
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream lines(r.out);
  std::string line;
  std::getline(lines, line);
  EXPECT_EQ(line, "step,loss");
  for (int i = 1; i <= 3; ++i) {
    ASSERT_TRUE(std::getline(lines, line));
    const auto comma = line.find(',');
    ASSERT_NE(comma, std::string::npos);
    EXPECT_EQ(std::stoi(line.substr(0, comma)), i);
    EXPECT_TRUE(std::isfinite(std::stod(line.substr(comma + 1))));
  }
  EXPECT_FALSE(std::getline(lines, line));

  const Checkpoint cp = load_checkpoint(dir / "a.erie");
  EXPECT_EQ(cp.step, 3u);
  EXPECT_TRUE(cp.adam.has_value());
  EXPECT_FALSE(cp.rng_state.empty());
}

TEST(CliTrain, SameSeedGivesIdenticalCheckpoints) {
  TempDir dir;
  ASSERT_EQ(run({"train", "--synthetic", "--steps", "2", "--seed", "5", "--out", dir / "a.erie"}).code, 0);
  ASSERT_EQ(run({"train", "--synthetic", "--steps", "2", "--seed", "5", "--out", dir / "b.erie"}).code, 0);
  ASSERT_EQ(run({"train", "--synthetic", "--steps", "2", "--seed", "6", "--out", dir / "c.erie"}).code, 0);
  EXPECT_EQ(read_bytes(dir / "a.erie"), read_bytes(dir / "b.erie"));
  EXPECT_NE(read_bytes(dir / "a.erie"), read_bytes(dir / "c.erie"));
}

TEST(CliTrain, ScaleGuidanceAndBlockFlagsReachTheStoredConfig) {
  TempDir dir;
  const Result r = run({"train", "--synthetic", "--steps", "1", "--out", dir / "s.erie", "--scales", "16",
                        "--guidance", "none_bn", "--block", "rdb"});
  ASSERT_EQ(r.code, 0) << r.err;
  const Checkpoint cp = load_checkpoint(dir / "s.erie");
  EXPECT_EQ(cp.model.config().scales, std::vector<int>{16});
  EXPECT_EQ(cp.model.config().guidance, Guidance::none_bn);
  EXPECT_EQ(cp.model.config().block_variant, BlockVariant::rdb);
  EXPECT_EQ(cp.model.param_count(), param_count(cp.model.config()));
}

TEST(CliTrain, DataDirectoryIsTiledIntoPatches) {
  TempDir dir;
  fs::create_directories(dir / "pairs");
  write_pgm(random_mosaic(64, 96, 1), dir / "pairs/a.pgm");
  write_sidecar(meta(0.1, 1.0), dir / "pairs/a.json");
  write_ppm(random_rgb(64, 96, 1), dir / "pairs/a.ppm");
  // A mosaic without a target is ignored.
  write_pgm(random_mosaic(32, 32, 2), dir / "pairs/lonely.pgm");

  const Result r = run({"train", "--data", dir / "pairs", "--steps", "2", "--out", dir / "d.erie"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.err.find("6 patches from 1 pairs"), std::string::npos) << r.err;
  EXPECT_EQ(count_lines(r.out), 3u);
}

TEST(CliTrain, FlagMisuseIsAUsageError) {
  TempDir dir;
  const std::string out = dir / "x.erie";
  EXPECT_EQ(run({"train", "--steps", "1", "--out", out}).code, 2);
  EXPECT_EQ(run({"train", "--synthetic", "--data", dir / "", "--steps", "1", "--out", out}).code, 2);
  EXPECT_EQ(run({"train", "--synthetic", "--steps", "1", "--out", out, "--guidance", "spade"}).code, 2);
  EXPECT_EQ(run({"train", "--synthetic", "--steps", "1", "--out", out, "--scales", "8,4"}).code, 2);
  EXPECT_EQ(run({"train", "--synthetic", "--steps", "1", "--out", dir / "missing/x.erie"}).code, 2);
  EXPECT_EQ(run({"train", "--synthetic", "--steps", "1", "--out", out, "--bogus"}).code, 2);
  EXPECT_FALSE(fs::exists(out));
}

TEST(CliTrain, EmptyDataDirectoryIsARuntimeError) {
  TempDir dir;
  fs::create_directories(dir / "empty");
  const Result r = run({"train", "--data", dir / "empty", "--steps", "1", "--out", dir / "x.erie"});
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(r.err.rfind("error: ", 0), 0u);
  EXPECT_EQ(count_lines(r.err), 1u);
}

// ---- enhance ----

TEST(CliEnhance, WritesPpmOfInputDimsWhenAligned) {
  TempDir dir;
  const std::string w = untrained_weights(dir);
  write_pgm(random_mosaic(64, 96, 3), dir / "in.pgm");
  write_sidecar(meta(0.1, 2.0), dir / "in.json");
  const Result r = run({"enhance", "--input", dir / "in.pgm", "--weights", w, "--output", dir / "out.ppm"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(r.out.empty());
  EXPECT_TRUE(r.err.empty()) << r.err;
  const Tensor<float> rgb = read_ppm(dir / "out.ppm");
  EXPECT_EQ(rgb.shape(), (Shape{1, 3, 64, 96}));
}

TEST(CliEnhance, UnalignedInputIsCenterCroppedOnEvenOffsets) {
  TempDir dir;
  const std::string w = untrained_weights(dir);
  write_pgm(random_mosaic(70, 100, 4), dir / "in.pgm");
  const Result r =
      run({"enhance", "--input", dir / "in.pgm", "--weights", w, "--output", dir / "out.ppm", "--ratio", "4"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.err.find("center-cropped 100x70 to 96x64 at offset (2, 2)"), std::string::npos) << r.err;
  EXPECT_EQ(read_ppm(dir / "out.ppm").shape(), (Shape{1, 3, 64, 96}));
}

TEST(CliEnhance, NumericRatioBypassesTheSidecar) {
  TempDir dir;
  const std::string w = untrained_weights(dir);
  write_pgm(random_mosaic(32, 32, 5), dir / "in.pgm");
  // No sidecar: auto fails, an explicit ratio does not.
  const Result a = run({"enhance", "--input", dir / "in.pgm", "--weights", w, "--output", dir / "a.ppm"});
  EXPECT_EQ(a.code, 1);
  EXPECT_NE(a.err.find("sidecar"), std::string::npos);
  ASSERT_EQ(run({"enhance", "--input", dir / "in.pgm", "--weights", w, "--output", dir / "b.ppm", "--ratio", "1"})
                .code,
            0);
  // A sidecar whose exposures say x20 does not change a --ratio 1 run.
  write_sidecar(meta(0.05, 1.0), dir / "in.json");
  ASSERT_EQ(run({"enhance", "--input", dir / "in.pgm", "--weights", w, "--output", dir / "c.ppm", "--ratio", "1"})
                .code,
            0);
  EXPECT_EQ(read_bytes(dir / "b.ppm"), read_bytes(dir / "c.ppm"));
}

TEST(CliEnhance, AutoRatioMatchesTheExplicitExposureRatio) {
  TempDir dir;
  const std::string w = untrained_weights(dir);
  write_pgm(random_mosaic(32, 64, 6), dir / "in.pgm");
  write_sidecar(meta(0.1, 2.5), dir / "in.json");
  ASSERT_EQ(run({"enhance", "--input", dir / "in.pgm", "--weights", w, "--output", dir / "a.ppm"}).code, 0);
  ASSERT_EQ(run({"enhance", "--input", dir / "in.pgm", "--weights", w, "--output", dir / "b.ppm", "--ratio", "25"})
                .code,
            0);
  EXPECT_EQ(read_bytes(dir / "a.ppm"), read_bytes(dir / "b.ppm"));
}

TEST(CliEnhance, ReferenceMetricsMatchDirectLibraryCall) {
  TempDir dir;
  const std::string w = untrained_weights(dir);
  const RawMosaic m = random_mosaic(64, 64, 7);
  write_pgm(m, dir / "in.pgm");
  write_sidecar(meta(0.1, 3.0), dir / "in.json");
  write_ppm(random_rgb(64, 64, 7), dir / "ref.ppm");
  const Tensor<float> ref = read_ppm(dir / "ref.ppm");

  const Result r = run({"enhance", "--input", dir / "in.pgm", "--weights", w, "--output", dir / "out.ppm",
                        "--reference", dir / "ref.ppm"});
  ASSERT_EQ(r.code, 0) << r.err;

  Checkpoint cp = load_checkpoint(w);
  const Tensor<float> packed = amplify(pack(m), 30.0);
  const Tensor<float> rgb = cp.model.forward(packed, extract_green(packed), Mode::eval);
  char expected[96];
  std::snprintf(expected, sizeof expected, "PSNR: %.6f dB, SSIM: %.6f\n", psnr(rgb, ref), ssim_metric(rgb, ref));
  EXPECT_EQ(r.out, expected);
}

TEST(CliEnhance, BadInputsFailWithOneLineDiagnostics) {
  TempDir dir;
  const std::string w = untrained_weights(dir);
  write_pgm(random_mosaic(32, 32, 8), dir / "in.pgm");
  {
    const Result r = run({"enhance", "--input", dir / "nope.pgm", "--weights", w, "--output", dir / "o.ppm"});
    EXPECT_EQ(r.code, 2);
    EXPECT_EQ(count_lines(r.err), 1u);
  }
  {
    std::ofstream(dir / "junk.erie") << "JUNKJUNK";
    const Result r = run({"enhance", "--input", dir / "in.pgm", "--weights", dir / "junk.erie", "--output",
                          dir / "o.ppm", "--ratio", "1"});
    EXPECT_EQ(r.code, 1);
    EXPECT_EQ(r.err.rfind("error: ", 0), 0u);
    EXPECT_EQ(count_lines(r.err), 1u);
  }
  EXPECT_EQ(run({"enhance", "--input", dir / "in.pgm", "--weights", w, "--output", dir / "o.ppm", "--ratio", "-2"})
                .code,
            2);
  EXPECT_FALSE(fs::exists(dir / "o.ppm"));
}

// ---- report / bench ----

TEST(CliReport, TotalsEqualLibraryCounts) {
  const Result r = run({"report", "--height", "128", "--width", "64"});
  ASSERT_EQ(r.code, 0) << r.err;
  const json j = json::parse(r.out);
  const ModelConfig c;
  EXPECT_EQ(j.at("total_params").get<std::size_t>(), param_count(c));
  EXPECT_EQ(j.at("total_flops").get<std::uint64_t>(), flop_count(c, 128, 64).total);
  std::size_t params = 0;
  std::uint64_t flops = 0;
  for (const auto& layer : j.at("layers")) {
    params += layer.at("params").get<std::size_t>();
    flops += layer.at("flops").get<std::uint64_t>();
  }
  EXPECT_EQ(params, param_count(c));
  EXPECT_EQ(flops, flop_count(c, 128, 64).total);
}

TEST(CliReport, ScaleAblationGflopsStrictlyIncrease) {
  std::vector<double> g;
  for (const char* s : {"16", "16,8", "16,8,4"}) {
    const Result r = run({"report", "--scales", s, "--height", "256", "--width", "256"});
    ASSERT_EQ(r.code, 0) << r.err;
    g.push_back(json::parse(r.out).at("gflops").get<double>());
  }
  EXPECT_LT(g[0], g[1]);
  EXPECT_LT(g[1], g[2]);
}

TEST(CliReport, ConfigFileIsHonoured) {
  TempDir dir;
  std::ofstream(dir / "tiny.json") << ModelConfig::tiny().to_json().dump();
  const Result r = run({"report", "--config", dir / "tiny.json", "--height", "64", "--width", "64"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(json::parse(r.out).at("total_params").get<std::size_t>(), param_count(ModelConfig::tiny()));
}

TEST(CliReport, IndivisibleDimsAreRejected) {
  const Result r = run({"report", "--height", "100", "--width", "64"});
  EXPECT_EQ(r.code, 2);
  EXPECT_TRUE(r.out.empty());
}

TEST(CliBench, RepeatsGiveThatManySamples) {
  const Result r = run({"bench", "--bogus"});
  EXPECT_EQ(r.code, 2);

  TempDir dir;
  std::ofstream(dir / "tiny.json") << ModelConfig::tiny().to_json().dump();
  const Result b = run({"bench", "--config", dir / "tiny.json", "--height", "64", "--width", "64", "--repeats", "5"});
  ASSERT_EQ(b.code, 0) << b.err;
  const json j = json::parse(b.out);
  const auto samples = j.at("samples_ms").get<std::vector<double>>();
  ASSERT_EQ(samples.size(), 5u);
  double mean = 0.0;
  for (double s : samples) {
    EXPECT_GT(s, 0.0);
    mean += s / 5.0;
  }
  EXPECT_NEAR(j.at("mean_ms").get<double>(), mean, 1e-9 * mean);
  EXPECT_NEAR(j.at("fps").get<double>(), 1000.0 / mean, 1e-6 * (1000.0 / mean));
}

// ---- gradcheck / metrics / entropy ----

TEST(CliGradcheck, FullSuitePassesAndExitsZero) {
  const Result r = run({"gradcheck", "--seed", "0"});
  ASSERT_EQ(r.code, 0) << r.err;
  const json j = json::parse(r.out);
  EXPECT_TRUE(j.at("passed").get<bool>());
  EXPECT_LT(j.at("worst").at("op").get<double>(), 1e-4);
  EXPECT_LT(j.at("worst").at("loss").get<double>(), 1e-4);
  EXPECT_LT(j.at("worst").at("network").get<double>(), 1e-3);
  std::set<std::string> groups;
  for (const auto& e : j.at("entries")) groups.insert(e.at("group").get<std::string>());
  EXPECT_EQ(groups, (std::set<std::string>{"op", "loss", "network"}));
}

TEST(CliMetrics, IdenticalFilesGiveInfAndOne) {
  TempDir dir;
  write_ppm(random_rgb(16, 24, 9), dir / "a.ppm");
  const Result r = run({"metrics", "--a", dir / "a.ppm", "--b", dir / "a.ppm"});
  ASSERT_EQ(r.code, 0) << r.err;
  const json j = json::parse(r.out);
  EXPECT_EQ(j.at("psnr_db"), "inf");
  EXPECT_NEAR(j.at("ssim").get<double>(), 1.0, 1e-6);
}

TEST(CliMetrics, DifferentFilesMatchLibrary) {
  TempDir dir;
  const Tensor<float> a = random_rgb(16, 24, 10), b = random_rgb(16, 24, 11);
  write_ppm(a, dir / "a.ppm");
  write_ppm(b, dir / "b.ppm");
  const Result r = run({"metrics", "--a", dir / "a.ppm", "--b", dir / "b.ppm"});
  ASSERT_EQ(r.code, 0) << r.err;
  const json j = json::parse(r.out);
  const Tensor<float> ra = read_ppm(dir / "a.ppm"), rb = read_ppm(dir / "b.ppm");
  EXPECT_DOUBLE_EQ(j.at("psnr_db").get<double>(), psnr(ra, rb));
  EXPECT_DOUBLE_EQ(j.at("ssim").get<double>(), ssim_metric(ra, rb));

  write_ppm(random_rgb(16, 16, 12), dir / "c.ppm");
  EXPECT_EQ(run({"metrics", "--a", dir / "a.ppm", "--b", dir / "c.ppm"}).code, 1);
}

TEST(CliEntropy, ConstantMosaicHasZeroEntropyAndGreensAreFlagged) {
  TempDir dir;
  RawMosaic m;
  m.height = m.width = 32;
  m.data.assign(32 * 32, 1234);
  write_pgm(m, dir / "c.pgm");
  const Result r = run({"entropy", "--input", dir / "c.pgm"});
  ASSERT_EQ(r.code, 0) << r.err;
  const json ch = json::parse(r.out).at("channels");
  ASSERT_EQ(ch.size(), 4u);
  const std::vector<std::string> names{"R", "G1", "G2", "B"};
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(ch[i].at("name"), names[i]);
    EXPECT_EQ(ch[i].at("entropy").get<double>(), 0.0);
    EXPECT_EQ(ch[i].at("green").get<bool>(), i == 1 || i == 2);
  }
}

TEST(CliEntropy, MatchesLibraryOnRandomMosaic) {
  TempDir dir;
  const RawMosaic m = random_mosaic(32, 64, 13, 65535);
  write_pgm(m, dir / "r.pgm");
  const Result r = run({"entropy", "--input", dir / "r.pgm"});
  ASSERT_EQ(r.code, 0) << r.err;
  const json ch = json::parse(r.out).at("channels");
  const Tensor<float> p = pack(m);
  const std::size_t plane = p.height() * p.width();
  for (std::size_t c = 0; c < 4; ++c) {
    EXPECT_DOUBLE_EQ(ch[c].at("entropy").get<double>(), channel_entropy(p.data().subspan(c * plane, plane)));
  }
}

TEST(Cli, HelpExitsZeroAndMissingSubcommandIsUsageError) {
  const Result help = run({"--help"});
  EXPECT_EQ(help.code, 0);
  EXPECT_NE(help.out.find("enhance"), std::string::npos);
  const Result none = run({});
  EXPECT_EQ(none.code, 2);
  EXPECT_EQ(none.err.rfind("error: ", 0), 0u);
}

}  // namespace
}  // namespace erienet
