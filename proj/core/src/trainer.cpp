#include "erienet/trainer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <set>

#include "erienet/error.hpp"
#include "erienet/ops.hpp"

namespace erienet {

// ---------------------------------- adam ----------------------------------

namespace {

template <typename T>
void adam_update(const std::string& name, std::span<T> w, std::span<const T> g, double grad_scale,
                 AdamState<T>& s) {
  auto& m = s.m[name];
  auto& v = s.v[name];
  if (m.size() != w.size()) m.assign(w.size(), T(0));
  if (v.size() != w.size()) v.assign(w.size(), T(0));
  const AdamConfig& c = s.config;
  const double t = static_cast<double>(s.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double gi = static_cast<double>(g[i]) * grad_scale;
    const double mi = c.beta1 * static_cast<double>(m[i]) + (1.0 - c.beta1) * gi;
    const double vi = c.beta2 * static_cast<double>(v[i]) + (1.0 - c.beta2) * gi * gi;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    const double update = c.lr * (mi / bc1) / (std::sqrt(vi / bc2) + c.eps);
    w[i] = static_cast<T>(static_cast<double>(w[i]) - update);
  }
}

}  // namespace

template <typename T>
void adam_step(Model<T>& model, AdamState<T>& state, double grad_scale) {
  for (const auto& p : model.params()) {
    if (!p.tensor.requires_grad() || !p.tensor.has_grad()) {
      throw StateError("adam_step: parameter '" + p.name + "' has no gradient");
    }
  }
  ++state.step;
  for (const auto& p : model.params()) adam_update(p.name, p.tensor.mutable_data(), p.tensor.grad(), grad_scale, state);
}

template <typename T>
void adam_step(Model<T>& model, const std::map<std::string, std::vector<T>>& grads, AdamState<T>& state) {
  for (const auto& p : model.params()) {
    auto it = grads.find(p.name);
    if (it == grads.end()) throw StateError("adam_step: parameter '" + p.name + "' has no gradient");
    if (it->second.size() != p.tensor.numel()) {
      throw ShapeError("adam_step: gradient for '" + p.name + "' has " + std::to_string(it->second.size()) +
                       " entries, parameter has " + std::to_string(p.tensor.numel()));
    }
  }
  ++state.step;
  for (const auto& p : model.params()) {
    adam_update(p.name, p.tensor.mutable_data(), std::span<const T>(grads.at(p.name)), 1.0, state);
  }
}

template <typename T>
double global_grad_norm(const Model<T>& model) {
  double sum = 0.0;
  for (const auto& p : model.params()) {
    if (!p.tensor.has_grad()) continue;
    for (T g : p.tensor.grad()) sum += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(sum);
}

template void adam_step(Model<float>&, AdamState<float>&, double);
template void adam_step(Model<double>&, AdamState<double>&, double);
template void adam_step(Model<float>&, const std::map<std::string, std::vector<float>>&, AdamState<float>&);
template void adam_step(Model<double>&, const std::map<std::string, std::vector<double>>&, AdamState<double>&);
template double global_grad_norm(const Model<float>&);
template double global_grad_norm(const Model<double>&);

// ---------------------------------- data ----------------------------------

Sample make_sample(const RawMosaic& dark, const Tensor<float>& target, double ratio, std::uint16_t black_level) {
  const Shape& ts = target.shape();
  if (ts.n != 1 || ts.c != 3 || ts.h != dark.height || ts.w != dark.width) {
    throw ShapeError("make_sample: target " + to_string(ts) + " does not match a " + std::to_string(dark.height) +
                     "x" + std::to_string(dark.width) + " mosaic");
  }
  Sample s;
  s.packed = amplify(pack(dark, black_level), ratio);
  s.green = extract_green(s.packed).clone();
  s.target = target;
  return s;
}

namespace {

// RGGB site colour: 0 = R, 1 = G, 2 = B.
int cfa_colour(std::size_t y, std::size_t x) {
  if (y % 2 == 0) return x % 2 == 0 ? 0 : 1;
  return x % 2 == 0 ? 1 : 2;
}

Tensor<float> synthetic_scene(std::size_t h, std::size_t w, Rng& rng) {
  Tensor<float> img(Shape{1, 3, h, w});
  const double fh = static_cast<double>(h), fw = static_cast<double>(w);
  for (std::size_t c = 0; c < 3; ++c) {
    const double base = rng.uniform(0.15, 0.65);
    const double gx = rng.uniform(-0.3, 0.3), gy = rng.uniform(-0.3, 0.3);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        img.at(0, c, y, x) = static_cast<float>(base + gx * (static_cast<double>(x) / fw - 0.5) +
                                                gy * (static_cast<double>(y) / fh - 0.5));
      }
  }
  const std::size_t shapes = 1 + rng.index(3);
  for (std::size_t k = 0; k < shapes; ++k) {
    float colour[3];
    for (float& v : colour) v = static_cast<float>(rng.uniform(0.0, 1.0));
    const bool disc = rng.index(2) == 1;
    const double cy = rng.uniform(0.0, fh), cx = rng.uniform(0.0, fw);
    const double ry = rng.uniform(0.1, 0.35) * fh, rx = rng.uniform(0.1, 0.35) * fw;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double dy = (static_cast<double>(y) - cy) / ry, dx = (static_cast<double>(x) - cx) / rx;
        const bool inside = disc ? dx * dx + dy * dy <= 1.0 : std::abs(dx) <= 1.0 && std::abs(dy) <= 1.0;
        if (!inside) continue;
        for (std::size_t c = 0; c < 3; ++c) img.at(0, c, y, x) = colour[c];
      }
  }
  for (float& v : img.mutable_data()) v = std::clamp(v, 0.0f, 1.0f);
  return img;
}

}  // namespace

std::vector<Sample> synthetic_dataset(const SyntheticOptions& o) {
  if (o.height == 0 || o.width == 0 || o.height % 32 != 0 || o.width % 32 != 0) {
    throw ShapeError("synthetic_dataset: patch dims must be positive multiples of 32");
  }
  if (!(o.ratio > 0.0)) throw ArgumentError("synthetic_dataset: ratio must be positive");
  if (o.noise_sigma < 0.0) throw ArgumentError("synthetic_dataset: noise_sigma must be nonnegative");
  Rng scenes = Rng::stream(o.seed, "synthetic.scenes");
  Rng noise = Rng::stream(o.seed, "synthetic.noise");
  std::vector<Sample> out;
  out.reserve(o.count);
  for (std::size_t i = 0; i < o.count; ++i) {
    Tensor<float> target = synthetic_scene(o.height, o.width, scenes);
    RawMosaic dark;
    dark.height = o.height;
    dark.width = o.width;
    dark.data.resize(o.height * o.width);
    for (std::size_t y = 0; y < o.height; ++y)
      for (std::size_t x = 0; x < o.width; ++x) {
        const double v = target.at(0, cfa_colour(y, x), y, x) / o.ratio + o.noise_sigma * noise.normal();
        dark.data[y * o.width + x] = static_cast<std::uint16_t>(std::lround(std::clamp(v, 0.0, 1.0) * 65535.0));
      }
    out.push_back(make_sample(dark, target, o.ratio));
  }
  return out;
}

// -------------------------------- training --------------------------------

namespace {

Tensor<float> stack(const std::vector<Tensor<float>>& xs) {
  Shape s = xs.at(0).shape();
  const std::size_t per = s.c * s.h * s.w;
  s.n = xs.size();
  Tensor<float> out(s);
  auto dst = out.mutable_data();
  for (std::size_t i = 0; i < xs.size(); ++i) {
    auto src = xs[i].data();
    std::copy(src.begin(), src.end(), dst.begin() + static_cast<std::ptrdiff_t>(i * per));
  }
  return out;
}

void check_data(const std::vector<Sample>& data) {
  if (data.empty()) throw ArgumentError("training data is empty");
  const Shape& s0 = data[0].target.shape();
  if (s0.h % 32 != 0 || s0.w % 32 != 0) throw ShapeError("training patches must have dims divisible by 32");
  for (const auto& d : data) {
    if (!(d.target.shape() == s0)) throw ShapeError("training patches must share one shape");
    if (!(d.packed.shape() == Shape{1, 4, s0.h / 2, s0.w / 2})) {
      throw ShapeError("packed input " + to_string(d.packed.shape()) + " does not match target " + to_string(s0));
    }
  }
}

}  // namespace

Trainer::Trainer(Model<float> model, std::vector<Sample> data, TrainOptions options)
    : model_(std::move(model)),
      data_(std::move(data)),
      options_(std::move(options)),
      rng_(Rng::stream(options_.seed, "trainer.batches")) {
  check_data(data_);
  if (options_.batch == 0) throw ArgumentError("batch size must be positive");
  options_.loss.validate();
  adam_.config = options_.adam;
  model_.set_requires_grad(true);
}

Trainer Trainer::resume(const Checkpoint& cp, std::vector<Sample> data, TrainOptions options) {
  Trainer t(cp.model.cast<float>(), std::move(data), std::move(options));
  if (cp.adam) {
    t.adam_ = *cp.adam;
    t.options_.adam = cp.adam->config;
  }
  if (cp.rng_state.empty()) throw StateError("checkpoint has no sampler state; it cannot be resumed");
  t.rng_.set_state(cp.rng_state);
  return t;
}

std::vector<std::size_t> Trainer::next_batch() {
  std::vector<std::size_t> idx(options_.batch);
  for (auto& i : idx) i = rng_.index(data_.size());
  return idx;
}

double Trainer::step() {
  std::vector<Tensor<float>> packed, green, target;
  for (std::size_t i : next_batch()) {
    const Sample& s = data_[i];
    if (options_.augment) {
      const Augmentation a = draw_augmentation(s.packed.height(), s.packed.width(), rng_);
      Tensor<float> p = apply_augmentation(s.packed, a);
      green.push_back(extract_green(p).clone());
      packed.push_back(p);
      target.push_back(apply_augmentation(s.target, a));
    } else {
      packed.push_back(s.packed);
      green.push_back(s.green);
      target.push_back(s.target);
    }
  }
  const Tensor<float> x = stack(packed), g = stack(green), y = stack(target);

  model_.zero_grad();
  Tape<float> tape;
  Tensor<float> loss;
  {
    Recording<float> rec(tape);
    loss = total_loss(model_.forward(x, g, Mode::train), y, options_.loss).total;
  }
  tape.backward(loss);
  const double value = loss.item();
  if (!std::isfinite(value)) throw StateError("training loss is not finite at step " + std::to_string(adam_.step + 1));

  const double norm = global_grad_norm(model_);
  const double scale = options_.clip_norm > 0.0 && norm > options_.clip_norm ? options_.clip_norm / norm : 1.0;
  adam_step(model_, adam_, scale);
  return value;
}

std::vector<double> Trainer::run(std::size_t steps) {
  std::vector<double> trace;
  trace.reserve(steps);
  for (std::size_t i = 0; i < steps; ++i) trace.push_back(step());
  return trace;
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint cp;
  cp.model = model_.cast<float>();
  cp.adam = adam_;
  cp.step = adam_.step;
  cp.rng_state = rng_.state();
  return cp;
}

std::vector<double> train_toy(Model<float>& model, const std::vector<Sample>& data, std::size_t steps,
                              std::uint64_t seed, TrainOptions options) {
  check_data(data);
  if (steps == 0) return {};
  options.seed = seed;
  // The trainer works on a copy so the caller's model is only touched on success.
  Trainer t(model.cast<float>(), data, options);
  std::vector<double> trace = t.run(steps);
  model = t.model().cast<float>();
  return trace;
}

// ------------------------------- checkpoint -------------------------------

namespace {

constexpr char kMagic[4] = {'E', 'R', 'I', 'E'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out.insert(out.end(), b, b + n);
  }
  template <typename U>
  void le(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void tensor(const std::string& name, const Shape& shape, std::span<const float> data) {
    if (name.size() > 0xFFFF) throw ArgumentError("tensor name too long: " + name.substr(0, 64));
    le<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
    bytes(name.data(), name.size());
    // Rank is the shape with leading unit dims dropped, but at least 1.
    std::vector<std::size_t> dims{shape.n, shape.c, shape.h, shape.w};
    while (dims.size() > 1 && dims.front() == 1) dims.erase(dims.begin());
    le<std::uint8_t>(static_cast<std::uint8_t>(dims.size()));
    for (std::size_t d : dims) le<std::uint32_t>(static_cast<std::uint32_t>(d));
    for (float v : data) le<std::uint32_t>(std::bit_cast<std::uint32_t>(v));
  }
  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : buf(b) {}
  void need(std::size_t n, const char* what) {
    if (buf.size() - pos < n) {
      throw TruncatedError(std::string("checkpoint truncated while reading ") + what + " at byte " +
                           std::to_string(pos));
    }
  }
  template <typename U>
  U le(const char* what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(buf[pos + i]) << (8 * i));
    pos += sizeof(U);
    return v;
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(buf.data() + pos), n);
    pos += n;
    return s;
  }
  const std::vector<std::uint8_t>& buf;
  std::size_t pos = 0;
};

template <typename T>
Tensor<float> vec_tensor(const std::vector<T>& v) {
  Tensor<float> t(Shape{1, 1, 1, v.size()});
  std::transform(v.begin(), v.end(), t.mutable_data().begin(), [](T x) { return static_cast<float>(x); });
  return t;
}

const std::string kBnMean = "bn.running_mean.";
const std::string kBnVar = "bn.running_var.";
const std::string kAdamM = "adam.m.";
const std::string kAdamV = "adam.v.";

bool starts_with(const std::string& s, const std::string& p) { return s.rfind(p, 0) == 0; }

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& cp) {
  nlohmann::json meta;
  meta["model"] = cp.model.config().to_json();
  meta["step"] = cp.step;
  meta["rng_state"] = cp.rng_state;
  nlohmann::json bn = nlohmann::json::object();
  for (const auto& [name, s] : cp.model.norm_stats()) bn[name] = {{"initialized", s.initialized}, {"momentum", s.momentum}};
  meta["batch_norm"] = bn;
  if (cp.adam) {
    const AdamConfig& c = cp.adam->config;
    meta["adam"] = {{"lr", c.lr}, {"beta1", c.beta1}, {"beta2", c.beta2}, {"eps", c.eps}, {"step", cp.adam->step}};
  }
  const std::string blob = meta.dump();

  Writer w;
  w.bytes(kMagic, 4);
  w.le<std::uint32_t>(kCheckpointVersion);
  w.le<std::uint32_t>(static_cast<std::uint32_t>(blob.size()));
  w.bytes(blob.data(), blob.size());

  std::size_t count = cp.model.params().size() + 2 * cp.model.norm_stats().size();
  if (cp.adam) count += cp.adam->m.size() + cp.adam->v.size();
  w.le<std::uint32_t>(static_cast<std::uint32_t>(count));
  for (const auto& p : cp.model.params()) w.tensor(p.name, p.tensor.shape(), p.tensor.data());
  for (const auto& [name, s] : cp.model.norm_stats()) {
    const Tensor<float> m = vec_tensor(s.running_mean), v = vec_tensor(s.running_var);
    w.tensor(kBnMean + name, m.shape(), m.data());
    w.tensor(kBnVar + name, v.shape(), v.data());
  }
  if (cp.adam) {
    for (const auto& [name, m] : cp.adam->m) w.tensor(kAdamM + name, Shape{1, 1, 1, m.size()}, m);
    for (const auto& [name, v] : cp.adam->v) w.tensor(kAdamV + name, Shape{1, 1, 1, v.size()}, v);
  }
  return std::move(w.out);
}

Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  const std::string magic = r.str(4, "magic");
  if (std::memcmp(magic.data(), kMagic, 4) != 0) throw BadMagicError("not a checkpoint: bad magic bytes");
  const auto version = r.le<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw VersionError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                       std::to_string(kCheckpointVersion) + ")");
  }
  const auto blob_len = r.le<std::uint32_t>("config length");
  const std::string blob = r.str(blob_len, "config");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(blob);
  } catch (const nlohmann::json::exception& e) {
    throw FieldError("config", std::string("checkpoint config is not valid JSON: ") + e.what());
  }
  if (!meta.is_object() || !meta.contains("model")) throw FieldError("model", "checkpoint config lacks 'model'");

  Checkpoint cp;
  ModelConfig config;
  try {
    config = ModelConfig::from_json(meta.at("model"));
    config.validate();
  } catch (const ConfigError& e) {
    throw FieldError("model", std::string("checkpoint model config invalid: ") + e.what());
  }
  try {
    cp.step = meta.value("step", std::uint64_t{0});
    cp.rng_state = meta.value("rng_state", std::string{});
  } catch (const nlohmann::json::exception& e) {
    throw FieldError("step", std::string("checkpoint metadata malformed: ") + e.what());
  }

  const auto count = r.le<std::uint32_t>("tensor count");
  std::set<std::string> seen;
  std::map<std::string, Tensor<float>> params, bn_mean, bn_var;
  std::map<std::string, std::vector<float>> adam_m, adam_v;
  std::vector<std::string> param_order;
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto name_len = r.le<std::uint16_t>("tensor name length");
    const std::string name = r.str(name_len, "tensor name");
    if (!seen.insert(name).second) throw NameCollisionError("checkpoint contains tensor '" + name + "' twice");
    const auto ndim = r.le<std::uint8_t>("tensor rank");
    if (ndim == 0 || ndim > 4) throw FormatError("tensor '" + name + "' has unsupported rank " + std::to_string(ndim));
    std::size_t d[4] = {1, 1, 1, 1};
    for (std::size_t i = 0; i < ndim; ++i) d[4 - ndim + i] = r.le<std::uint32_t>("tensor dims");
    const Shape shape{d[0], d[1], d[2], d[3]};
    r.need(shape.numel() * 4, "tensor payload");
    Tensor<float> t(shape);
    for (float& v : t.mutable_data()) v = std::bit_cast<float>(r.le<std::uint32_t>("tensor payload"));
    if (starts_with(name, kBnMean)) {
      bn_mean.emplace(name.substr(kBnMean.size()), t);
    } else if (starts_with(name, kBnVar)) {
      bn_var.emplace(name.substr(kBnVar.size()), t);
    } else if (starts_with(name, kAdamM)) {
      adam_m.emplace(name.substr(kAdamM.size()), std::vector<float>(t.data().begin(), t.data().end()));
    } else if (starts_with(name, kAdamV)) {
      adam_v.emplace(name.substr(kAdamV.size()), std::vector<float>(t.data().begin(), t.data().end()));
    } else {
      params.emplace(name, t);
      param_order.push_back(name);
    }
  }
  if (r.pos != bytes.size()) {
    throw FormatError("checkpoint has " + std::to_string(bytes.size() - r.pos) +
                      " trailing bytes after the declared " + std::to_string(count) + " tensors");
  }

  // Parameters must be exactly those of the configured network, in build order.
  const Model<float> reference = Model<float>::build(config, 0);
  if (reference.params().size() != params.size()) {
    throw FieldError("tensors", "checkpoint has " + std::to_string(params.size()) + " parameter tensors, config needs " +
                                    std::to_string(reference.params().size()));
  }
  cp.model.set_config(config);
  for (const auto& ref : reference.params()) {
    auto it = params.find(ref.name);
    if (it == params.end()) throw FieldError(ref.name, "checkpoint lacks parameter '" + ref.name + "'");
    if (!(it->second.shape() == ref.tensor.shape())) {
      throw FieldError(ref.name, "parameter '" + ref.name + "' has shape " + to_string(it->second.shape()) +
                                     ", config needs " + to_string(ref.tensor.shape()));
    }
    cp.model.add_param(ref.name, it->second);
  }
  const nlohmann::json bn_meta = meta.value("batch_norm", nlohmann::json::object());
  for (const auto& [name, ref] : reference.norm_stats()) {
    BatchNormStats<float> s = ref;
    auto m = bn_mean.find(name);
    auto v = bn_var.find(name);
    if (m != bn_mean.end() || v != bn_var.end()) {
      if (m == bn_mean.end() || v == bn_var.end()) throw FieldError(name, "incomplete batch norm statistics for " + name);
      if (m->second.numel() != ref.running_mean.size() || v->second.numel() != ref.running_var.size()) {
        throw FieldError(name, "batch norm statistics for " + name + " have the wrong length");
      }
      s.running_mean.assign(m->second.data().begin(), m->second.data().end());
      s.running_var.assign(v->second.data().begin(), v->second.data().end());
    }
    if (bn_meta.contains(name)) {
      s.initialized = bn_meta[name].value("initialized", true);
      s.momentum = bn_meta[name].value("momentum", s.momentum);
    }
    cp.model.norm_stats()[name] = std::move(s);
  }
  if (bn_mean.size() > reference.norm_stats().size() || bn_var.size() > reference.norm_stats().size()) {
    throw FieldError("batch_norm", "checkpoint has batch norm statistics for unknown layers");
  }

  if (meta.contains("adam")) {
    AdamState<float> a;
    const auto& j = meta["adam"];
    a.config.lr = j.value("lr", a.config.lr);
    a.config.beta1 = j.value("beta1", a.config.beta1);
    a.config.beta2 = j.value("beta2", a.config.beta2);
    a.config.eps = j.value("eps", a.config.eps);
    a.step = j.value("step", std::uint64_t{0});
    for (auto* buffers : {&adam_m, &adam_v}) {
      for (const auto& [name, b] : *buffers) {
        if (!cp.model.has_param(name)) throw FieldError(name, "Adam buffer for unknown parameter '" + name + "'");
        if (b.size() != cp.model.param(name).numel()) throw FieldError(name, "Adam buffer for '" + name + "' has the wrong length");
      }
    }
    a.m = std::move(adam_m);
    a.v = std::move(adam_v);
    cp.adam = std::move(a);
  } else if (!adam_m.empty() || !adam_v.empty()) {
    throw FieldError("adam", "checkpoint has Adam buffers but no Adam metadata");
  }
  return cp;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& cp) {
  const auto bytes = serialize_checkpoint(cp);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("failed writing " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace erienet
