#include "erienet/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "erienet/error.hpp"
#include "erienet/ops.hpp"
#include "erienet/parallel.hpp"
#include "erienet/wavelet.hpp"
#include "op_support.hpp"

namespace erienet {
namespace {

std::vector<double> gaussian_window(std::size_t size, double sigma) {
  std::vector<double> g(size);
  const double centre = (static_cast<double>(size) - 1.0) / 2.0;
  for (std::size_t i = 0; i < size; ++i) {
    const double d = static_cast<double>(i) - centre;
    g[i] = std::exp(-d * d / (2.0 * sigma * sigma));
  }
  const double total = std::accumulate(g.begin(), g.end(), 0.0);
  for (auto& v : g) v /= total;
  return g;
}

// Valid separable filtering of one H x W plane into an oh x ow plane.
template <typename A>
void filter_valid(const A* in, std::size_t H, std::size_t W, const std::vector<double>& gy,
                  const std::vector<double>& gx, A* tmp, A* out) {
  const std::size_t kh = gy.size(), kw = gx.size(), oh = H - kh + 1, ow = W - kw + 1;
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      A acc = 0;
      for (std::size_t k = 0; k < kw; ++k) acc += static_cast<A>(gx[k]) * in[y * W + x + k];
      tmp[y * ow + x] = acc;
    }
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      A acc = 0;
      for (std::size_t k = 0; k < kh; ++k) acc += static_cast<A>(gy[k]) * tmp[(y + k) * ow + x];
      out[y * ow + x] = acc;
    }
}

// Adjoint of filter_valid: scatters an oh x ow plane back to H x W.
void filter_adjoint(const double* in, std::size_t H, std::size_t W, const std::vector<double>& gy,
                    const std::vector<double>& gx, double* tmp, double* out) {
  const std::size_t kh = gy.size(), kw = gx.size(), oh = H - kh + 1, ow = W - kw + 1;
  std::fill(tmp, tmp + H * ow, 0.0);
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t k = 0; k < kh; ++k)
      for (std::size_t x = 0; x < ow; ++x) tmp[(y + k) * ow + x] += gy[k] * in[y * ow + x];
  std::fill(out, out + H * W, 0.0);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < ow; ++x)
      for (std::size_t k = 0; k < kw; ++k) out[y * W + x + k] += gx[k] * tmp[y * ow + x];
}

}  // namespace

template <typename T>
Tensor<T> ssim(const Tensor<T>& x, const Tensor<T>& y, double dynamic_range, const SsimOptions& opt) {
  detail::require(x.shape() == y.shape(),
                  "ssim shape mismatch: " + to_string(x.shape()) + " vs " + to_string(y.shape()));
  if (!(dynamic_range > 0.0)) throw ArgumentError("ssim dynamic range must be positive");
  const Shape& s = x.shape();
  const std::size_t kh = std::min(opt.window, s.h), kw = std::min(opt.window, s.w);
  detail::require(kh > 0 && kw > 0, "ssim on an empty image");
  const auto gy = gaussian_window(kh, opt.sigma), gx = gaussian_window(kw, opt.sigma);
  const double c1 = std::pow(opt.k1 * dynamic_range, 2), c2 = std::pow(opt.k2 * dynamic_range, 2);
  const std::size_t H = s.h, W = s.w, oh = H - kh + 1, ow = W - kw + 1, planes = s.n * s.c;
  const double positions = static_cast<double>(planes * oh * ow);

  // Per-plane partials of the mean SSIM with respect to the five local
  // moments (mx, my, exx, eyy, exy); only kept when a backward is needed.
  const bool need_grad = detail::recording_tape<T>({&x, &y}) != nullptr;
  auto partials = std::make_shared<std::vector<double>>(need_grad ? planes * 5 * oh * ow : 0);

  // The forward runs in extended precision so that the returned value is
  // (nearly) correctly rounded; finite-difference checks of near-zero
  // gradients depend on that.
  using A = long double;
  std::vector<A> plane_sum(planes, 0);
  auto xd = x.data();
  auto yd = y.data();
  parallel_for(planes, [&](std::size_t p) {
    std::vector<A> px(H * W), py(H * W), tmp(H * ow), m(5 * oh * ow), buf(H * W);
    for (std::size_t i = 0; i < H * W; ++i) {
      px[i] = static_cast<A>(xd[p * H * W + i]);
      py[i] = static_cast<A>(yd[p * H * W + i]);
    }
    A* mx = m.data();
    A* my = mx + oh * ow;
    A* exx = my + oh * ow;
    A* eyy = exx + oh * ow;
    A* exy = eyy + oh * ow;
    filter_valid(px.data(), H, W, gy, gx, tmp.data(), mx);
    filter_valid(py.data(), H, W, gy, gx, tmp.data(), my);
    for (std::size_t i = 0; i < H * W; ++i) buf[i] = px[i] * px[i];
    filter_valid(buf.data(), H, W, gy, gx, tmp.data(), exx);
    for (std::size_t i = 0; i < H * W; ++i) buf[i] = py[i] * py[i];
    filter_valid(buf.data(), H, W, gy, gx, tmp.data(), eyy);
    for (std::size_t i = 0; i < H * W; ++i) buf[i] = px[i] * py[i];
    filter_valid(buf.data(), H, W, gy, gx, tmp.data(), exy);
    A acc = 0;
    double* part = need_grad ? partials->data() + p * 5 * oh * ow : nullptr;
    for (std::size_t i = 0; i < oh * ow; ++i) {
      const A ux = mx[i], uy = my[i];
      const A a1 = 2 * ux * uy + c1;
      const A a2 = 2 * (exy[i] - ux * uy) + c2;
      const A b1 = ux * ux + uy * uy + c1;
      const A b2 = (exx[i] - ux * ux) + (eyy[i] - uy * uy) + c2;
      const A v = a1 * a2 / (b1 * b2);
      acc += v;
      if (part) {
        const A da1 = a2 / (b1 * b2), da2 = a1 / (b1 * b2), db1 = -v / b1, db2 = -v / b2;
        part[i] = static_cast<double>(2 * uy * (da1 - da2) + 2 * ux * (db1 - db2));            // d/dmx
        part[oh * ow + i] = static_cast<double>(2 * ux * (da1 - da2) + 2 * uy * (db1 - db2));  // d/dmy
        part[2 * oh * ow + i] = static_cast<double>(db2);                                      // d/dexx
        part[3 * oh * ow + i] = static_cast<double>(db2);                                      // d/deyy
        part[4 * oh * ow + i] = static_cast<double>(2 * da2);                                  // d/dexy
      }
    }
    plane_sum[p] = acc;
  });
  const A total = std::accumulate(plane_sum.begin(), plane_sum.end(), A(0));
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total / static_cast<A>(positions)));

  if (Tape<T>* tape = detail::recording_tape<T>({&x, &y})) {
    tape->record("ssim", {x, y}, out, [x, y, out, partials, gy, gx, s, oh, ow, positions]() {
      const double g = static_cast<double>(out.grad()[0]) / positions;
      const std::size_t H = s.h, W = s.w, planes = s.n * s.c;
      auto xd = x.data();
      auto yd = y.data();
      T* dx = x.requires_grad() ? x.grad_buffer().data() : nullptr;
      T* dy = y.requires_grad() ? y.grad_buffer().data() : nullptr;
      parallel_for(planes, [&](std::size_t p) {
        const double* part = partials->data() + p * 5 * oh * ow;
        std::vector<double> tmp(H * ow), scaled(oh * ow), back(5 * H * W);
        for (std::size_t k = 0; k < 5; ++k) {
          for (std::size_t i = 0; i < oh * ow; ++i) scaled[i] = g * part[k * oh * ow + i];
          filter_adjoint(scaled.data(), H, W, gy, gx, tmp.data(), back.data() + k * H * W);
        }
        const double* bmx = back.data();
        const double* bmy = bmx + H * W;
        const double* bxx = bmy + H * W;
        const double* byy = bxx + H * W;
        const double* bxy = byy + H * W;
        for (std::size_t i = 0; i < H * W; ++i) {
          const std::size_t j = p * H * W + i;
          const double xv = static_cast<double>(xd[j]), yv = static_cast<double>(yd[j]);
          if (dx) dx[j] += static_cast<T>(bmx[i] + 2.0 * xv * bxx[i] + yv * bxy[i]);
          if (dy) dy[j] += static_cast<T>(bmy[i] + 2.0 * yv * byy[i] + xv * bxy[i]);
        }
      });
    });
  }
  return out;
}

void LossWeights::validate(std::size_t levels) const {
  if (wssim < 0.0 || wmse < 0.0) throw ArgumentError("loss weights must be nonnegative");
  if (ratios.size() != 4 * levels) {
    throw ArgumentError("expected " + std::to_string(4 * levels) + " wavelet ssim ratios, got " +
                        std::to_string(ratios.size()));
  }
  const double total = std::accumulate(ratios.begin(), ratios.end(), 0.0);
  if (std::any_of(ratios.begin(), ratios.end(), [](double r) { return r < 0.0; }) || std::abs(total - 1.0) > 1e-9) {
    throw ArgumentError("wavelet ssim ratios must be nonnegative and sum to 1");
  }
}

template <typename T>
Tensor<T> wavelet_ssim_loss(const Tensor<T>& out, const Tensor<T>& gt, const LossWeights& weights) {
  detail::require(out.shape() == gt.shape(),
                  "loss shape mismatch: " + to_string(out.shape()) + " vs " + to_string(gt.shape()));
  weights.validate();
  const auto po = dwt_pyramid(out, 3);
  WaveletPyramid<T> pg;
  {
    NoRecording<T> off;
    pg = dwt_pyramid(gt, 3);
  }
  std::vector<Tensor<T>> terms;
  std::vector<T> coeffs;
  for (std::size_t t = 0; t < 3; ++t) {
    const auto bo = po.levels[t].list();
    const auto bg = pg.levels[t].list();
    for (std::size_t b = 0; b < 4; ++b) {
      double range = 1.0;
      for (T v : bg[b].data()) range = std::max(range, std::abs(static_cast<double>(v)));
      terms.push_back(ssim(bo[b], bg[b], range));
      coeffs.push_back(static_cast<T>(-weights.ratios[4 * t + b]));
    }
  }
  return weighted_sum<T>(terms, coeffs);
}

template <typename T>
Tensor<T> wavelet_mse_loss(const Tensor<T>& out, const Tensor<T>& gt) {
  detail::require(out.shape() == gt.shape(),
                  "loss shape mismatch: " + to_string(out.shape()) + " vs " + to_string(gt.shape()));
  const auto po = dwt_pyramid(out, 3);
  WaveletPyramid<T> pg;
  {
    NoRecording<T> off;
    pg = dwt_pyramid(gt, 3);
  }
  std::vector<Tensor<T>> terms{mean_squared_error(out, gt)};
  for (std::size_t t = 0; t < 3; ++t) terms.push_back(mean_squared_error(po.stacked[t], pg.stacked[t]));
  const std::vector<T> ones(terms.size(), T(1));
  return weighted_sum<T>(terms, ones);
}

template <typename T>
LossTerms<T> total_loss(const Tensor<T>& out, const Tensor<T>& gt, const LossWeights& weights) {
  LossTerms<T> r;
  r.l1 = mean_abs_error(out, gt);
  r.wssim = wavelet_ssim_loss(out, gt, weights);
  r.wmse = wavelet_mse_loss(out, gt);
  const std::vector<Tensor<T>> terms{r.l1, r.wssim, r.wmse};
  const std::vector<T> coeffs{T(1), static_cast<T>(weights.wssim), static_cast<T>(weights.wmse)};
  r.total = weighted_sum<T>(terms, coeffs);
  return r;
}

double psnr(const Tensor<float>& out, const Tensor<float>& gt, double max_val) {
  detail::require(out.shape() == gt.shape(),
                  "psnr shape mismatch: " + to_string(out.shape()) + " vs " + to_string(gt.shape()));
  double mse = 0.0;
  auto a = out.data();
  auto b = gt.data();
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    mse += d * d;
  }
  mse /= static_cast<double>(a.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(max_val * max_val / mse);
}

double ssim_metric(const Tensor<float>& out, const Tensor<float>& gt) {
  NoRecording<float> off;
  return static_cast<double>(ssim(out, gt, 1.0).item());
}

#define ERIENET_INSTANTIATE(T)                                                                  \
  template Tensor<T> ssim(const Tensor<T>&, const Tensor<T>&, double, const SsimOptions&);      \
  template Tensor<T> wavelet_ssim_loss(const Tensor<T>&, const Tensor<T>&, const LossWeights&); \
  template Tensor<T> wavelet_mse_loss(const Tensor<T>&, const Tensor<T>&);                      \
  template LossTerms<T> total_loss(const Tensor<T>&, const Tensor<T>&, const LossWeights&);
ERIENET_INSTANTIATE(float)
ERIENET_INSTANTIATE(double)
#undef ERIENET_INSTANTIATE

}  // namespace erienet
