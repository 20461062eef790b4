#include "erienet/model.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <future>
#include <optional>
#include <set>

#include "erienet/error.hpp"
#include "erienet/parallel.hpp"
#include "erienet/rng.hpp"

namespace erienet {

std::string to_string(Guidance g) {
  switch (g) {
    case Guidance::none_bn: return "none_bn";
    case Guidance::gcg_ln: return "gcg_ln";
    case Guidance::gcg_bn: return "gcg_bn";
  }
  return "?";
}

std::string to_string(BlockVariant b) {
  switch (b) {
    case BlockVariant::rb: return "rb";
    case BlockVariant::db: return "db";
    case BlockVariant::rdb: return "rdb";
    case BlockVariant::rdb_star: return "rdb_star";
    case BlockVariant::crdb: return "crdb";
  }
  return "?";
}

Guidance parse_guidance(const std::string& s) {
  for (Guidance g : {Guidance::none_bn, Guidance::gcg_ln, Guidance::gcg_bn}) {
    if (s == to_string(g)) return g;
  }
  throw ArgumentError("unknown guidance '" + s + "' (expected none_bn, gcg_ln or gcg_bn)");
}

BlockVariant parse_block_variant(const std::string& s) {
  for (BlockVariant b : {BlockVariant::rb, BlockVariant::db, BlockVariant::rdb, BlockVariant::rdb_star,
                         BlockVariant::crdb}) {
    if (s == to_string(b)) return b;
  }
  throw ArgumentError("unknown block variant '" + s + "' (expected rb, db, rdb, rdb_star or crdb)");
}

std::string to_string(Module m) {
  switch (m) {
    case Module::branch16: return "branch16";
    case Module::branch8: return "branch8";
    case Module::branch4: return "branch4";
    case Module::gcg: return "gcg";
    case Module::fusion: return "fusion";
    case Module::head: return "head";
  }
  return "?";
}

void ModelConfig::validate() const {
  std::vector<std::string> problems;
  std::set<int> seen;
  for (int s : scales) {
    if (s != 4 && s != 8 && s != 16) problems.push_back("scale " + std::to_string(s) + " is not one of 4, 8, 16");
    if (!seen.insert(s).second) problems.push_back("scale " + std::to_string(s) + " listed twice");
  }
  if (!seen.count(16)) problems.push_back("scales must include 16");
  for (int s : {16, 8, 4}) {
    const std::string tag = "[" + std::to_string(s) + "]";
    if (!widths.count(s) || widths.at(s) == 0) problems.push_back("widths" + tag + " must be positive");
    if (!growth.count(s) || growth.at(s) == 0) problems.push_back("growth" + tag + " must be positive");
    if (!crdb_depths.count(s) || crdb_depths.at(s) == 0) problems.push_back("crdb_depths" + tag + " must be positive");
  }
  if (parallel_crdbs_at_16 == 0) problems.push_back("parallel_crdbs_at_16 must be positive");
  if (eca_kernel <= 0 || eca_kernel % 2 == 0) problems.push_back("eca_kernel must be a positive odd integer");
  if (uses_san() && gcg_width == 0) problems.push_back("gcg_width must be positive");
  if (!problems.empty()) {
    std::string msg = "invalid model config:";
    for (const auto& p : problems) msg += "\n  - " + p;
    throw ConfigError(msg);
  }
}

std::vector<int> ModelConfig::sorted_scales() const {
  std::vector<int> s = scales;
  std::sort(s.begin(), s.end(), std::greater<>());
  return s;
}

nlohmann::json ModelConfig::to_json() const {
  auto by_scale = [](const std::map<int, std::size_t>& m) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [k, v] : m) j[std::to_string(k)] = v;
    return j;
  };
  return {{"scales", scales},
          {"widths", by_scale(widths)},
          {"growth", by_scale(growth)},
          {"crdb_depths", by_scale(crdb_depths)},
          {"parallel_crdbs_at_16", parallel_crdbs_at_16},
          {"guidance", to_string(guidance)},
          {"block_variant", to_string(block_variant)},
          {"eca_kernel", eca_kernel},
          {"gcg_width", gcg_width}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    auto by_scale = [](const nlohmann::json& o) {
      std::map<int, std::size_t> m;
      for (const auto& [k, v] : o.items()) m[std::stoi(k)] = v.get<std::size_t>();
      return m;
    };
    if (j.contains("scales")) c.scales = j.at("scales").get<std::vector<int>>();
    if (j.contains("widths")) c.widths = by_scale(j.at("widths"));
    if (j.contains("growth")) c.growth = by_scale(j.at("growth"));
    if (j.contains("crdb_depths")) c.crdb_depths = by_scale(j.at("crdb_depths"));
    if (j.contains("parallel_crdbs_at_16")) c.parallel_crdbs_at_16 = j.at("parallel_crdbs_at_16").get<std::size_t>();
    if (j.contains("guidance")) c.guidance = parse_guidance(j.at("guidance").get<std::string>());
    if (j.contains("block_variant")) c.block_variant = parse_block_variant(j.at("block_variant").get<std::string>());
    if (j.contains("eca_kernel")) c.eca_kernel = j.at("eca_kernel").get<int>();
    if (j.contains("gcg_width")) c.gcg_width = j.at("gcg_width").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed model config JSON: ") + e.what());
  } catch (const std::logic_error& e) {
    throw ConfigError(std::string("malformed model config JSON: ") + e.what());
  }
  c.validate();
  return c;
}

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.widths = {{16, 8}, {8, 6}, {4, 4}};
  c.growth = {{16, 4}, {8, 3}, {4, 2}};
  c.crdb_depths = {{16, 2}, {8, 2}, {4, 1}};
  c.gcg_width = 4;
  return c;
}

namespace {

Module branch_module(int s) {
  return s == 16 ? Module::branch16 : (s == 8 ? Module::branch8 : Module::branch4);
}

int log2_int(int v) {
  int r = 0;
  while ((1 << r) < v) ++r;
  return r;
}

std::size_t bottleneck_width(std::size_t cin, std::size_t g) {
  // Equal parameter budget: b * (cin + 9g) == 9 * cin * g.
  const double b = 9.0 * static_cast<double>(cin * g) / static_cast<double>(cin + 9 * g);
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(b)));
}

enum class NormKind { bn, ln };

// ---------------------------------------------------------------------------
// The architecture, written once against an engine. ShapeEngine infers shapes
// and cost; ComputeEngine evaluates tensors.
// ---------------------------------------------------------------------------

template <typename E>
class Graph {
 public:
  using V = typename E::Value;

  Graph(E& e, const ModelConfig& c) : e_(e), c_(c) {}

  V run(const V& packed, const V& green) {
    std::optional<V> guide;
    if (c_.uses_san()) {
      V pooled = e_.avg_pool("gcg.pool", Module::gcg, green, 8);
      guide = e_.relu("gcg.trunk.relu", Module::gcg,
                      e_.conv("gcg.trunk", Module::gcg, pooled, c_.gcg_width, 3, 1, 1, "he"));
    }
    const auto scales = c_.sorted_scales();
    std::vector<std::function<V()>> jobs;
    for (int s : scales) {
      jobs.push_back([this, s, &packed, &guide]() { return branch(s, packed, s == 16 ? guide : std::nullopt); });
    }
    std::vector<V> feats = e_.branches(jobs);
    return head(fusion(scales, feats), packed);
  }

 private:
  V branch(int s, const V& packed, const std::optional<V>& guide) {
    const std::string p = "branch" + std::to_string(s);
    const Module m = branch_module(s);
    const std::size_t w = c_.widths.at(s);
    const int stages = log2_int(s) - 1;
    V x = packed;
    for (int k = 0; k < stages; ++k) {
      const std::string d = p + ".down" + std::to_string(k);
      x = e_.depthwise(d + ".dw", m, x, 3, 2, 1);
      x = e_.conv(d + ".pw", m, x, w, 1, 1, 0, "he");
      if (k + 1 < stages) x = e_.relu(d + ".relu", m, x);
    }
    x = e_.mask(p + ".mask", m, x);
    if (s == 16 && c_.parallel_crdbs_at_16 > 1) {
      std::vector<V> outs;
      for (std::size_t b = 0; b < c_.parallel_crdbs_at_16; ++b) {
        outs.push_back(block(p + ".block" + std::to_string(b), m, x, s, guide));
      }
      return e_.average(p + ".average", m, outs);
    }
    return block(p + ".block0", m, x, s, guide);
  }

  V norm(const std::string& name, Module m, const V& x, std::size_t channels, const std::optional<V>& guide) {
    if (!guide) return e_.norm(name, m, x, NormKind::bn, true);
    const NormKind kind = c_.guidance == Guidance::gcg_ln ? NormKind::ln : NormKind::bn;
    V xhat = e_.norm(name, m, x, kind, false);
    V gamma = e_.conv(name + ".san_gamma", Module::gcg, *guide, channels, 3, 1, 1, "zero");
    V beta = e_.conv(name + ".san_beta", Module::gcg, *guide, channels, 3, 1, 1, "zero");
    return e_.san(name + ".san", Module::gcg, xhat, gamma, beta);
  }

  V block(const std::string& p, Module m, const V& x, int s, const std::optional<V>& guide) {
    const std::size_t C = c_.widths.at(s), g = c_.growth.at(s), n = c_.crdb_depths.at(s);
    const BlockVariant v = c_.block_variant;
    if (v == BlockVariant::rb) {
      V h = e_.relu(p + ".relu0", m, norm(p + ".norm", m, x, C, guide));
      h = e_.relu(p + ".relu1", m, e_.conv(p + ".conv_a", m, h, C, 3, 1, 1, "he"));
      h = e_.conv(p + ".conv_b", m, h, C, 3, 1, 1, "he");
      return e_.add(p + ".residual", m, x, h);
    }
    std::vector<V> feats{x};
    for (std::size_t j = 0; j < n; ++j) {
      const std::string d = p + ".dense" + std::to_string(j);
      const std::size_t cin = C + j * g;
      V in = e_.concat(d + ".concat", m, feats);
      V h = e_.relu(d + ".relu", m, norm(d + ".norm", m, in, cin, guide));
      if (v == BlockVariant::rdb_star) {
        const std::size_t b = bottleneck_width(cin, g);
        h = e_.conv(d + ".bottleneck", m, h, b, 1, 1, 0, "he",
                    "bottleneck width " + std::to_string(b) + " = round(9*" + std::to_string(cin) + "*" +
                        std::to_string(g) + "/(" + std::to_string(cin) + "+9*" + std::to_string(g) + "))");
        h = e_.relu(d + ".bottleneck_relu", m, h);
      }
      feats.push_back(e_.conv(d + ".conv", m, h, g, 3, 1, 1, "he"));
    }
    V fused = e_.conv(p + ".fuse", m, e_.concat(p + ".concat", m, feats), C, 1, 1, 0, "he");
    if (v == BlockVariant::db) return fused;
    if (v == BlockVariant::crdb) fused = eca(p + ".eca", m, fused);
    return e_.add(p + ".residual", m, x, fused);
  }

  V eca(const std::string& p, Module m, const V& x) {
    V pooled = e_.global_pool(p + ".pool", m, x);
    V gate = e_.sigmoid(p + ".sigmoid", m, e_.conv1d(p + ".conv1d", m, pooled, c_.eca_kernel));
    return e_.mul(p + ".scale", m, x, gate);
  }

  V fusion(const std::vector<int>& scales, const std::vector<V>& feats) {
    V cur = feats[0];
    int level = scales[0];
    int up = 0;
    for (std::size_t i = 1; i < scales.size(); ++i) {
      while (level > scales[i]) {
        cur = e_.upsample("fusion.up" + std::to_string(up++), Module::fusion, cur);
        level /= 2;
      }
      const std::string name = "fusion.merge" + std::to_string(scales[i]);
      cur = e_.concat(name + ".concat", Module::fusion, {cur, feats[i]});
      cur = e_.relu(name + ".relu", Module::fusion,
                    e_.conv(name, Module::fusion, cur, c_.widths.at(scales[i]), 3, 1, 1, "he"));
    }
    while (level > 2) {
      cur = e_.upsample("fusion.up" + std::to_string(up++), Module::fusion, cur);
      level /= 2;
    }
    return e_.relu("fusion.tail.relu", Module::fusion,
                   e_.conv("fusion.tail", Module::fusion, cur, c_.tail_width(), 3, 1, 1, "he"));
  }

  V head(const V& h, const V& packed) {
    const std::size_t t = c_.tail_width();
    V r = e_.relu("head.res_a.relu", Module::head, e_.conv("head.res_a", Module::head, h, t, 3, 1, 1, "he"));
    r = e_.conv("head.res_b", Module::head, r, t, 3, 1, 1, "he");
    V skip = e_.conv("head.skip", Module::head, packed, t, 1, 1, 0, "he");
    r = e_.add("head.skip_add", Module::head, e_.add("head.residual", Module::head, h, r), skip);
    V out = e_.conv("head.out", Module::head, r, 12, 3, 1, 1, "he");
    return e_.clamp("head.clamp", Module::head, e_.pixel_shuffle("head.shuffle", Module::head, out, 2));
  }

  E& e_;
  const ModelConfig& c_;
};

// --------------------------------- shapes ---------------------------------

class ShapeEngine {
 public:
  using Value = Shape;
  std::vector<LayerEntry> entries;

  Shape conv(const std::string& name, Module m, const Shape& x, std::size_t cout, std::size_t k, int stride,
             int pad, const std::string& init, const std::string& note = "") {
    LayerEntry e = base(name, "conv2d", m, {x});
    const LayerCost cost = conv2d_cost(x, cout, k, stride, pad, true);
    e.out_shape = cost.out;
    e.cin = x.c;
    e.cout = cout;
    e.kernel = k;
    e.stride = stride;
    e.pad = pad;
    e.bias = true;
    e.init = init;
    e.note = note;
    e.params = cost.params;
    e.flops = cost.flops;
    return push(e);
  }

  Shape depthwise(const std::string& name, Module m, const Shape& x, std::size_t k, int stride, int pad) {
    LayerEntry e = base(name, "depthwise_conv2d", m, {x});
    const LayerCost cost = conv2d_cost(x, x.c, k, stride, pad, true, x.c);
    e.out_shape = cost.out;
    e.cin = e.cout = x.c;
    e.kernel = k;
    e.stride = stride;
    e.pad = pad;
    e.bias = true;
    e.init = "he";
    e.params = cost.params;
    e.flops = cost.flops;
    return push(e);
  }

  Shape conv1d(const std::string& name, Module m, const Shape& x, int k) {
    LayerEntry e = base(name, "conv1d_channels", m, {x});
    e.out_shape = x;
    e.kernel = static_cast<std::size_t>(k);
    e.init = "eca";
    e.params = e.kernel;
    e.flops = 2ull * e.kernel * x.numel();
    return push(e);
  }

  Shape norm(const std::string& name, Module m, const Shape& x, NormKind kind, bool affine) {
    LayerEntry e = base(name, kind == NormKind::bn ? "batch_norm" : "layer_norm", m, {x});
    e.out_shape = x;
    e.params = affine ? 2 * x.c : 0;
    e.flops = x.numel();
    if (!affine) e.note = "affine disabled (modulated by guidance)";
    return push(e);
  }

  Shape san(const std::string& name, Module m, const Shape& xhat, const Shape& gamma, const Shape& beta) {
    require_equal(name, xhat, gamma);
    require_equal(name, xhat, beta);
    return elementwise(name, "san_modulate", m, {xhat, gamma, beta}, xhat, 3);
  }

  Shape relu(const std::string& n, Module m, const Shape& x) { return elementwise(n, "relu", m, {x}, x, 1); }
  Shape sigmoid(const std::string& n, Module m, const Shape& x) { return elementwise(n, "sigmoid", m, {x}, x, 1); }
  Shape clamp(const std::string& n, Module m, const Shape& x) { return elementwise(n, "clamp", m, {x}, x, 1); }
  Shape add(const std::string& n, Module m, const Shape& a, const Shape& b) {
    require_equal(n, a, b);
    return elementwise(n, "add", m, {a, b}, a, 1);
  }
  Shape mul(const std::string& n, Module m, const Shape& a, const Shape& b) {
    return elementwise(n, "mul", m, {a, b}, a, 1);
  }
  Shape mask(const std::string& n, Module m, const Shape& x) {
    LayerEntry e = base(n, "scalar_mask", m, {x});
    e.out_shape = x;
    e.params = 1;
    e.init = "one";
    e.flops = x.numel();
    return push(e);
  }
  Shape average(const std::string& n, Module m, const std::vector<Shape>& xs) {
    for (const auto& s : xs) require_equal(n, xs[0], s);
    return elementwise(n, "average", m, xs, xs[0], xs.size());
  }
  Shape upsample(const std::string& n, Module m, const Shape& x) {
    const Shape out{x.n, x.c, 2 * x.h, 2 * x.w};
    return elementwise(n, "bilinear_upsample2x", m, {x}, out, 1);
  }
  Shape avg_pool(const std::string& n, Module m, const Shape& x, std::size_t f) {
    if (x.h % f != 0 || x.w % f != 0) throw ShapeError(n + ": avg_pool factor does not divide " + to_string(x));
    LayerEntry e = base(n, "avg_pool", m, {x});
    e.out_shape = Shape{x.n, x.c, x.h / f, x.w / f};
    e.flops = x.numel();
    return push(e);
  }
  Shape global_pool(const std::string& n, Module m, const Shape& x) {
    LayerEntry e = base(n, "global_avg_pool", m, {x});
    e.out_shape = Shape{x.n, x.c, 1, 1};
    e.flops = x.numel();
    return push(e);
  }
  Shape concat(const std::string& n, Module m, const std::vector<Shape>& xs) {
    LayerEntry e = base(n, "concat", m, xs);
    e.out_shape = xs[0];
    e.out_shape.c = 0;
    for (const auto& s : xs) {
      if (s.n != xs[0].n || s.h != xs[0].h || s.w != xs[0].w) throw ShapeError(n + ": concat spatial mismatch");
      e.out_shape.c += s.c;
    }
    return push(e);
  }
  Shape pixel_shuffle(const std::string& n, Module m, const Shape& x, std::size_t r) {
    LayerEntry e = base(n, "pixel_shuffle", m, {x});
    e.out_shape = Shape{x.n, x.c / (r * r), x.h * r, x.w * r};
    return push(e);
  }
  std::vector<Shape> branches(const std::vector<std::function<Shape()>>& jobs) {
    std::vector<Shape> out;
    for (const auto& j : jobs) out.push_back(j());
    return out;
  }

 private:
  static void require_equal(const std::string& n, const Shape& a, const Shape& b) {
    if (!(a == b)) throw ShapeError(n + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
  }
  static LayerEntry base(const std::string& name, const char* type, Module m, std::vector<Shape> in) {
    LayerEntry e;
    e.name = name;
    e.type = type;
    e.module = m;
    e.in_shapes = std::move(in);
    return e;
  }
  Shape elementwise(const std::string& n, const char* type, Module m, std::vector<Shape> in, Shape out,
                    std::size_t per_element) {
    LayerEntry e = base(n, type, m, std::move(in));
    e.out_shape = out;
    e.flops = per_element * out.numel();
    return push(e);
  }
  Shape push(LayerEntry e) {
    entries.push_back(std::move(e));
    return entries.back().out_shape;
  }
};

// -------------------------------- compute ---------------------------------

template <typename T>
class ComputeEngine {
 public:
  using Value = Tensor<T>;

  ComputeEngine(Model<T>& model, Mode mode, const ForwardObserver<T>* observer)
      : model_(model), mode_(mode), observer_(observer) {}

  Value conv(const std::string& name, Module, const Value& x, std::size_t cout, std::size_t k, int stride, int pad,
             const std::string&, const std::string& = "") {
    const Tensor<T>& w = model_.param(name + ".weight");
    const Shape& ws = w.shape();
    if (ws.n != cout || ws.h != k || ws.w != k) {
      throw ShapeError(name + ": weight " + to_string(ws) + " does not match the configured layer");
    }
    return rec(name, conv2d(x, w, model_.param(name + ".bias"), stride, pad));
  }
  Value depthwise(const std::string& name, Module, const Value& x, std::size_t, int stride, int pad) {
    return rec(name, depthwise_conv2d(x, model_.param(name + ".weight"), model_.param(name + ".bias"), stride, pad));
  }
  Value conv1d(const std::string& name, Module, const Value& x, int) {
    return rec(name, conv1d_channels(x, model_.param(name + ".weight")));
  }
  Value norm(const std::string& name, Module, const Value& x, NormKind kind, bool affine) {
    Tensor<T> gamma, beta;
    if (affine) {
      gamma = model_.param(name + ".gamma");
      beta = model_.param(name + ".beta");
    }
    if (kind == NormKind::ln) return rec(name, layer_norm(x, gamma, beta));
    return rec(name, batch_norm(x, gamma, beta, model_.norm_stats().at(name), mode_));
  }
  Value san(const std::string& name, Module, const Value& xhat, const Value& gamma, const Value& beta) {
    return rec(name, erienet::add(erienet::add(xhat, erienet::mul(gamma, xhat)), beta));
  }
  Value relu(const std::string& n, Module, const Value& x) { return rec(n, erienet::relu(x)); }
  Value sigmoid(const std::string& n, Module, const Value& x) { return rec(n, erienet::sigmoid(x)); }
  Value clamp(const std::string& n, Module, const Value& x) {
    return rec(n, mode_ == Mode::eval ? erienet::clamp(x, T(0), T(1)) : x);
  }
  Value add(const std::string& n, Module, const Value& a, const Value& b) { return rec(n, erienet::add(a, b)); }
  Value mul(const std::string& n, Module, const Value& a, const Value& b) { return rec(n, erienet::mul(a, b)); }
  Value mask(const std::string& n, Module, const Value& x) { return rec(n, erienet::mul(x, model_.param(n))); }
  Value average(const std::string& n, Module, const std::vector<Value>& xs) {
    Tensor<T> acc = xs[0];
    for (std::size_t i = 1; i < xs.size(); ++i) acc = erienet::add(acc, xs[i]);
    return rec(n, scale(acc, T(1) / static_cast<T>(xs.size())));
  }
  Value upsample(const std::string& n, Module, const Value& x) { return rec(n, bilinear_upsample2x(x)); }
  Value avg_pool(const std::string& n, Module, const Value& x, std::size_t f) {
    return rec(n, erienet::avg_pool(x, f));
  }
  Value global_pool(const std::string& n, Module, const Value& x) { return rec(n, global_avg_pool(x)); }
  Value concat(const std::string& n, Module, const std::vector<Value>& xs) { return rec(n, concat_channels(xs)); }
  Value pixel_shuffle(const std::string& n, Module, const Value& x, std::size_t r) {
    return rec(n, erienet::pixel_shuffle(x, r));
  }

  std::vector<Value> branches(const std::vector<std::function<Value()>>& jobs) {
    // Branches only run concurrently when nothing is being recorded: the
    // tape and the observer are single-threaded, and train-mode norms write stats.
    const bool concurrent = mode_ == Mode::eval && observer_ == nullptr && active_tape<T>() == nullptr &&
                            max_threads() > 1 && jobs.size() > 1;
    std::vector<Value> out(jobs.size());
    if (!concurrent) {
      for (std::size_t i = 0; i < jobs.size(); ++i) out[i] = jobs[i]();
      return out;
    }
    std::vector<std::future<Value>> futures;
    for (std::size_t i = 1; i < jobs.size(); ++i) futures.push_back(std::async(std::launch::async, jobs[i]));
    out[0] = jobs[0]();
    for (std::size_t i = 1; i < jobs.size(); ++i) out[i] = futures[i - 1].get();
    return out;
  }

 private:
  Value rec(const std::string& name, Value v) {
    if (observer_) (*observer_)(name, v);
    return v;
  }

  Model<T>& model_;
  Mode mode_;
  const ForwardObserver<T>* observer_;
};

void check_mosaic_dims(std::size_t height, std::size_t width) {
  if (height == 0 || width == 0 || height % 32 != 0 || width % 32 != 0) {
    throw ShapeError("mosaic dims must be positive multiples of 32, got " + std::to_string(height) + "x" +
                     std::to_string(width));
  }
}

std::vector<LayerEntry> describe_unchecked(const ModelConfig& config, std::size_t height, std::size_t width) {
  ShapeEngine e;
  Graph<ShapeEngine> g(e, config);
  g.run(Shape{1, 4, height / 2, width / 2}, Shape{1, 2, height / 2, width / 2});
  return std::move(e.entries);
}

struct ParamSpec {
  std::string name;
  Shape shape;
  std::string init;  // he, zero, one, eca
  std::size_t fan_in = 1;
};

std::vector<ParamSpec> param_specs(const LayerEntry& e) {
  std::vector<ParamSpec> out;
  if (e.type == "conv2d") {
    out.push_back({e.name + ".weight", Shape{e.cout, e.cin, e.kernel, e.kernel}, e.init, e.cin * e.kernel * e.kernel});
    out.push_back({e.name + ".bias", Shape{1, e.cout, 1, 1}, "zero"});
  } else if (e.type == "depthwise_conv2d") {
    out.push_back({e.name + ".weight", Shape{e.cout, 1, e.kernel, e.kernel}, e.init, e.kernel * e.kernel});
    out.push_back({e.name + ".bias", Shape{1, e.cout, 1, 1}, "zero"});
  } else if (e.type == "conv1d_channels") {
    out.push_back({e.name + ".weight", Shape{1, 1, 1, e.kernel}, "eca", e.kernel});
  } else if ((e.type == "batch_norm" || e.type == "layer_norm") && e.params > 0) {
    const std::size_t c = e.out_shape.c;
    out.push_back({e.name + ".gamma", Shape{1, c, 1, 1}, "one"});
    out.push_back({e.name + ".beta", Shape{1, c, 1, 1}, "zero"});
  } else if (e.type == "scalar_mask") {
    out.push_back({e.name, Shape{1, 1, 1, 1}, "one"});
  }
  return out;
}

}  // namespace

LayerCost conv2d_cost(const Shape& in, std::size_t cout, std::size_t kernel, int stride, int pad, bool bias,
                      std::size_t groups) {
  if (groups == 0 || in.c % groups != 0 || cout % groups != 0) throw ArgumentError("conv groups must divide channels");
  if (in.h + 2 * static_cast<std::size_t>(pad) < kernel || in.w + 2 * static_cast<std::size_t>(pad) < kernel) {
    throw ShapeError("conv kernel larger than padded input " + to_string(in));
  }
  LayerCost c;
  const auto dim = [&](std::size_t v) { return (v + 2 * static_cast<std::size_t>(pad) - kernel) / static_cast<std::size_t>(stride) + 1; };
  c.out = Shape{in.n, cout, dim(in.h), dim(in.w)};
  const std::size_t cin_per_group = in.c / groups;
  c.params = cout * cin_per_group * kernel * kernel + (bias ? cout : 0);
  const std::uint64_t positions = static_cast<std::uint64_t>(c.out.n) * c.out.h * c.out.w;
  c.flops = 2ull * kernel * kernel * cin_per_group * cout * positions + (bias ? cout * positions : 0);
  return c;
}

std::vector<LayerEntry> describe(const ModelConfig& config, std::size_t height, std::size_t width) {
  config.validate();
  check_mosaic_dims(height, width);
  return describe_unchecked(config, height, width);
}

FlopReport flop_count(const ModelConfig& config, std::size_t height, std::size_t width) {
  FlopReport r;
  for (const auto& e : describe(config, height, width)) {
    r.per_module[to_string(e.module)] += e.flops;
    r.total += e.flops;
  }
  return r;
}

std::size_t param_count(const ModelConfig& config) {
  std::size_t n = 0;
  for (const auto& e : describe(config, 32, 32)) n += e.params;
  return n;
}

nlohmann::json manifest(const ModelConfig& config, std::size_t height, std::size_t width) {
  const auto entries = describe(config, height, width);
  auto shape_json = [](const Shape& s) { return nlohmann::json::array({s.n, s.c, s.h, s.w}); };
  nlohmann::json layers = nlohmann::json::array();
  std::map<std::string, std::uint64_t> per_module;
  std::map<std::string, std::size_t> params_per_module;
  std::uint64_t flops = 0;
  std::size_t params = 0;
  for (const auto& e : entries) {
    nlohmann::json in = nlohmann::json::array();
    for (const auto& s : e.in_shapes) in.push_back(shape_json(s));
    nlohmann::json l = {{"name", e.name},
                        {"type", e.type},
                        {"module", to_string(e.module)},
                        {"in_shape", e.in_shapes.size() == 1 ? in[0] : in},
                        {"out_shape", shape_json(e.out_shape)},
                        {"params", e.params},
                        {"flops", e.flops}};
    if (!e.note.empty()) l["note"] = e.note;
    layers.push_back(std::move(l));
    per_module[to_string(e.module)] += e.flops;
    params_per_module[to_string(e.module)] += e.params;
    flops += e.flops;
    params += e.params;
  }
  return {{"config", config.to_json()},
          {"height", height},
          {"width", width},
          {"layers", layers},
          {"per_module_flops", per_module},
          {"per_module_params", params_per_module},
          {"total_params", params},
          {"total_flops", flops},
          {"gflops", static_cast<double>(flops) / 1e9}};
}

// --------------------------------- Model ----------------------------------

template <typename T>
Model<T> Model<T>::build(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Model<T> m;
  m.config_ = config;
  for (const auto& e : describe_unchecked(config, 32, 32)) {
    if (e.type == "batch_norm") m.stats_.emplace(e.name, BatchNormStats<T>::identity(e.out_shape.c));
    for (const auto& decl : param_specs(e)) {
      std::vector<T> v(decl.shape.numel());
      if (decl.init == "he") {
        Rng rng = Rng::stream(seed, decl.name);
        // Kaiming-uniform, fan-in mode.
        const double bound = std::sqrt(6.0 / static_cast<double>(decl.fan_in));
        for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
      } else if (decl.init == "eca") {
        Rng rng = Rng::stream(seed, decl.name);
        const double bound = 1.0 / std::sqrt(static_cast<double>(decl.fan_in));
        for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
      } else if (decl.init == "one") {
        std::fill(v.begin(), v.end(), T(1));
      }
      m.add_param(decl.name, Tensor<T>(decl.shape, std::move(v)));
    }
  }
  return m;
}

template <typename T>
void Model<T>::add_param(const std::string& name, Tensor<T> t) {
  if (!index_.emplace(name, params_.size()).second) throw NameCollisionError("duplicate parameter name " + name);
  params_.push_back({name, std::move(t)});
}

template <typename T>
Tensor<T>& Model<T>::param(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ArgumentError("model has no parameter named " + name);
  return params_[it->second].tensor;
}

template <typename T>
const Tensor<T>& Model<T>::param(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ArgumentError("model has no parameter named " + name);
  return params_[it->second].tensor;
}

template <typename T>
std::size_t Model<T>::param_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

template <typename T>
void Model<T>::set_requires_grad(bool on) {
  for (auto& p : params_) p.tensor.set_requires_grad(on);
}

template <typename T>
void Model<T>::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

template <typename T>
Tensor<T> Model<T>::forward(const Tensor<T>& packed, const Tensor<T>& green, Mode mode,
                            const ForwardObserver<T>* observer) {
  const Shape& ps = packed.shape();
  if (ps.c != 4) throw ShapeError("forward expects 4 packed channels, got " + to_string(ps));
  check_mosaic_dims(2 * ps.h, 2 * ps.w);
  if (!(green.shape() == Shape{ps.n, 2, ps.h, ps.w})) {
    throw ShapeError("green input " + to_string(green.shape()) + " does not match packed " + to_string(ps));
  }
  ComputeEngine<T> e(*this, mode, observer);
  Graph<ComputeEngine<T>> g(e, config_);
  return g.run(packed, green);
}

template class Model<float>;
template class Model<double>;

BenchResult benchmark(Model<float>& model, std::size_t height, std::size_t width, std::size_t repeats,
                      std::size_t warmup) {
  if (repeats == 0) throw ArgumentError("benchmark needs at least one repeat");
  check_mosaic_dims(height, width);
  Rng rng(0x5eed);
  std::vector<float> v(4 * (height / 2) * (width / 2));
  for (auto& x : v) x = static_cast<float>(rng.uniform(0.0, 0.5));
  Tensor<float> packed(Shape{1, 4, height / 2, width / 2}, std::move(v));
  Tensor<float> green = channel_slice(packed, 1, 2);
  NoRecording<float> off;
  BenchResult r;
  for (std::size_t i = 0; i < warmup + repeats; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    model.forward(packed, green, Mode::eval);
    const auto t1 = std::chrono::steady_clock::now();
    if (i >= warmup) r.samples_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  double total = 0.0;
  for (double s : r.samples_ms) total += s;
  r.mean_ms = total / static_cast<double>(r.samples_ms.size());
  r.fps = r.mean_ms > 0.0 ? 1000.0 / r.mean_ms : 0.0;
  return r;
}

}  // namespace erienet
