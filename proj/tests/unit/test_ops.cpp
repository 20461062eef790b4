#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <set>

#include "erienet/gradcheck.hpp"
#include "erienet/gradient_suite.hpp"
#include "erienet/ops.hpp"
#include "test_support.hpp"

namespace erienet {
namespace {

using testing::max_abs_diff;
using testing::random_tensor;
using D = Tensor<double>;
using F = Tensor<float>;

D ones_bias(std::size_t c) { return D(Shape{1, c, 1, 1}, 0.0); }

// Scalar probe sum(out * r) with a fixed random r, so every output element
// carries a distinct weight into the gradient.
D probe(const D& out, std::uint64_t seed) {
  Rng rng(seed);
  D r = random_tensor<double>(out.shape(), rng);
  return sum(mul(out, r));
}

TEST(Conv2d, OneByOneIdentityKernelReproducesInput) {
  Rng rng(1);
  F x = random_tensor<float>(Shape{2, 3, 4, 5}, rng);
  F w(Shape{3, 3, 1, 1}, 0.0f);
  for (std::size_t c = 0; c < 3; ++c) w.at(c, c, 0, 0) = 1.0f;
  F y = conv2d(x, w, F(Shape{1, 3, 1, 1}, 0.0f), 1, 0);
  EXPECT_EQ(y.shape(), x.shape());
  EXPECT_EQ(max_abs_diff(x, y), 0.0);
}

TEST(Conv2d, AllOnesKernelOnConstantInputSumsNineTapsInInterior) {
  F x(Shape{1, 1, 5, 5}, 1.0f);
  F w(Shape{1, 1, 3, 3}, 1.0f);
  F y = conv2d(x, w, F(), 1, 1);
  EXPECT_FLOAT_EQ(y.at(0, 0, 2, 2), 9.0f);
  EXPECT_FLOAT_EQ(y.at(0, 0, 0, 0), 4.0f);  // corner sees 4 taps under zero padding
}

TEST(Conv2d, OutputSizeFollowsFloorFormula) {
  for (std::size_t h : {5u, 6u, 7u, 8u}) {
    for (int stride : {1, 2, 3}) {
      for (int pad : {0, 1, 2}) {
        F x(Shape{1, 2, h, h + 1}, 0.5f);
        F w(Shape{4, 2, 3, 3}, 0.1f);
        F y = conv2d(x, w, F(), stride, pad);
        EXPECT_EQ(y.height(), (h + 2 * pad - 3) / stride + 1);
        EXPECT_EQ(y.width(), (h + 1 + 2 * pad - 3) / stride + 1);
      }
    }
  }
}

TEST(Conv2d, ChannelMismatchNamesTheDimension) {
  F x(Shape{1, 3, 4, 4});
  F w(Shape{2, 4, 3, 3});
  try {
    conv2d(x, w, F(), 1, 1);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("input channels 3"), std::string::npos) << e.what();
  }
  EXPECT_THROW(conv2d(F(Shape{1, 4, 4, 4}), w, F(), 0, 1), ArgumentError);
  EXPECT_THROW(conv2d(F(Shape{1, 4, 4, 4}), w, F(), 1, -1), ArgumentError);
}

TEST(Conv2d, WeightGradientOfSumMatchesCentralDifferences) {
  Rng rng(7);
  D x = random_tensor<double>(Shape{1, 2, 5, 5}, rng);
  D w = random_tensor<double>(Shape{3, 2, 3, 3}, rng);
  auto report = gradcheck([&](const std::vector<D>& in) { return sum(conv2d(x, in[0], D(), 1, 1)); },
                          {w});
  EXPECT_LT(report.max_rel_err, 1e-6);
  EXPECT_EQ(report.checked, w.numel());
}

TEST(Conv2d, MatchesSixLoopReferenceOnRandomShapes) {
  Rng rng(2024);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t n = 1 + rng.index(2), cin = 1 + rng.index(4), cout = 1 + rng.index(4);
    const std::size_t h = 3 + rng.index(6), w = 3 + rng.index(6);
    const std::size_t k = rng.index(2) == 0 ? 1 : 3;
    const int stride = 1 + static_cast<int>(rng.index(2));
    const int pad = static_cast<int>(rng.index(2));
    F x = random_tensor<float>(Shape{n, cin, h, w}, rng);
    F wt = random_tensor<float>(Shape{cout, cin, k, k}, rng);
    F b = random_tensor<float>(Shape{1, cout, 1, 1}, rng);
    F y = conv2d(x, wt, b, stride, pad);
    auto ref = testing::reference_conv2d(std::vector<double>(x.data().begin(), x.data().end()), x.shape(),
                                         std::vector<double>(wt.data().begin(), wt.data().end()), wt.shape(),
                                         std::vector<double>(b.data().begin(), b.data().end()), stride, pad);
    ASSERT_EQ(ref.size(), y.numel());
    double m = 0.0;
    for (std::size_t i = 0; i < ref.size(); ++i) m = std::max(m, std::abs(ref[i] - y.data()[i]));
    EXPECT_LT(m, 1e-5) << "trial " << trial;
  }
}

TEST(DepthwiseSeparable, IdentityKernelsLeaveInputUnchanged) {
  Rng rng(3);
  F x = random_tensor<float>(Shape{1, 4, 6, 6}, rng);
  F dw(Shape{4, 1, 3, 3}, 0.0f);
  for (std::size_t c = 0; c < 4; ++c) dw.at(c, 0, 1, 1) = 1.0f;
  F pw(Shape{4, 4, 1, 1}, 0.0f);
  for (std::size_t c = 0; c < 4; ++c) pw.at(c, c, 0, 0) = 1.0f;
  F y = depthwise_separable_conv(x, dw, F(Shape{1, 4, 1, 1}), pw, F(Shape{1, 4, 1, 1}), 1, 1);
  EXPECT_EQ(max_abs_diff(x, y), 0.0);
}

TEST(DepthwiseSeparable, StrideTwoHalvesEvenDims) {
  F x(Shape{1, 4, 16, 12}, 0.3f);
  F y = depthwise_separable_conv(x, F(Shape{4, 1, 3, 3}, 0.1f), F(), F(Shape{8, 4, 1, 1}, 0.1f), F(), 2, 1);
  EXPECT_EQ(y.shape(), (Shape{1, 8, 8, 6}));
}

TEST(DepthwiseSeparable, ParameterCountForFourToThirtyTwo) {
  const F dw(Shape{4, 1, 3, 3}), dwb(Shape{1, 4, 1, 1}), pw(Shape{32, 4, 1, 1}), pwb(Shape{1, 32, 1, 1});
  EXPECT_EQ(dw.numel() + dwb.numel() + pw.numel() + pwb.numel(), 200u);
}

TEST(DepthwiseSeparable, RejectsChannelMismatch) {
  EXPECT_THROW(depthwise_conv2d(F(Shape{1, 3, 4, 4}), F(Shape{4, 1, 3, 3}), F(), 1, 1), ShapeError);
}

TEST(Activations, ReluAndSigmoidValues) {
  F x(Shape{1, 1, 1, 3}, std::vector<float>{-1.0f, 2.0f, 0.0f});
  F r = relu(x);
  EXPECT_EQ(r.data()[0], 0.0f);
  EXPECT_EQ(r.data()[1], 2.0f);
  EXPECT_FLOAT_EQ(sigmoid(F::scalar(0.0f)).item(), 0.5f);
}

TEST(Activations, SigmoidSlopeAtZeroIsQuarter) {
  D x = D::scalar(0.0);
  Tape<double> tape;
  x.set_requires_grad();
  D y;
  {
    Recording<double> rec(tape);
    y = sigmoid(x);
  }
  tape.backward(y);
  EXPECT_NEAR(x.grad()[0], 0.25, 1e-15);
  const double h = 1e-4;
  const double fd = (1.0 / (1.0 + std::exp(-h)) - 1.0 / (1.0 + std::exp(h))) / (2 * h);
  EXPECT_NEAR(x.grad()[0], fd, 1e-9);
}

TEST(Concat, SingleInputIsReturnedAsIs) {
  F a(Shape{1, 3, 2, 2}, 1.0f);
  F out = concat_channels(std::vector<F>{a});
  EXPECT_TRUE(out.same_storage(a));
}

TEST(Concat, ChannelCountsAddAndBackwardRoutesOnes) {
  Rng rng(5);
  D a = random_tensor<double>(Shape{2, 3, 4, 4}, rng);
  D b = random_tensor<double>(Shape{2, 5, 4, 4}, rng);
  a.set_requires_grad();
  b.set_requires_grad();
  Tape<double> tape;
  D loss;
  {
    Recording<double> rec(tape);
    D c = concat_channels(std::vector<D>{a, b});
    EXPECT_EQ(c.channels(), 8u);
    EXPECT_EQ(c.at(1, 4, 2, 3), b.at(1, 1, 2, 3));
    loss = sum(c);
  }
  tape.backward(loss);
  for (double g : a.grad()) EXPECT_EQ(g, 1.0);
  for (double g : b.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Concat, SpatialMismatchThrows) {
  EXPECT_THROW(concat_channels(std::vector<F>{F(Shape{1, 1, 2, 2}), F(Shape{1, 1, 2, 3})}), ShapeError);
}

TEST(GlobalAvgPool, ValuesAndUniformBackward) {
  EXPECT_FLOAT_EQ(global_avg_pool(F(Shape{1, 1, 3, 3}, 0.7f)).item(), 0.7f);
  D x(Shape{1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  x.set_requires_grad();
  Tape<double> tape;
  D p;
  {
    Recording<double> rec(tape);
    p = global_avg_pool(x);
  }
  EXPECT_DOUBLE_EQ(p.item(), 2.5);
  tape.backward(p);
  for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, 0.25);
}

TEST(Conv1dChannels, IdentityAndZeroPaddedSum) {
  F v(Shape{1, 3, 1, 1}, std::vector<float>{1, 2, 3});
  F id = conv1d_channels(v, F(Shape{1, 1, 1, 3}, std::vector<float>{0, 1, 0}));
  EXPECT_EQ(max_abs_diff(v, id), 0.0);
  F s = conv1d_channels(v, F(Shape{1, 1, 1, 3}, std::vector<float>{1, 1, 1}));
  EXPECT_FLOAT_EQ(s.data()[0], 3.0f);
  EXPECT_FLOAT_EQ(s.data()[1], 6.0f);
  EXPECT_FLOAT_EQ(s.data()[2], 5.0f);
  EXPECT_THROW(conv1d_channels(v, F(Shape{1, 1, 1, 2})), ArgumentError);
}

TEST(Conv1dChannels, GradientMatchesFiniteDifferences) {
  Rng rng(11);
  D v = random_tensor<double>(Shape{2, 7, 1, 1}, rng);
  D w = random_tensor<double>(Shape{1, 1, 1, 3}, rng);
  auto report = gradcheck([](const std::vector<D>& in) { return probe(conv1d_channels(in[0], in[1]), 3); },
                          {v, w});
  EXPECT_LT(report.max_rel_err, 1e-6);
}

TEST(BatchNorm, TrainModeStandardizesEachChannel) {
  Rng rng(12);
  D x = random_tensor<double>(Shape{3, 4, 5, 5}, rng, -2.0, 5.0);
  auto stats = BatchNormStats<double>{};
  D y = batch_norm(x, D(Shape{1, 4, 1, 1}, 1.0), D(Shape{1, 4, 1, 1}, 0.0), stats, Mode::train);
  for (std::size_t c = 0; c < 4; ++c) {
    double m = 0, v = 0;
    for (std::size_t n = 0; n < 3; ++n)
      for (std::size_t i = 0; i < 25; ++i) m += y.at(n, c, i / 5, i % 5);
    m /= 75;
    for (std::size_t n = 0; n < 3; ++n)
      for (std::size_t i = 0; i < 25; ++i) v += std::pow(y.at(n, c, i / 5, i % 5) - m, 2);
    v /= 75;
    EXPECT_NEAR(m, 0.0, 1e-4);
    EXPECT_NEAR(v, 1.0, 1e-4);
  }
  EXPECT_TRUE(stats.initialized);
}

TEST(BatchNorm, AffineShiftsAndScales) {
  Rng rng(13);
  D x = random_tensor<double>(Shape{4, 2, 6, 6}, rng);
  auto stats = BatchNormStats<double>{};
  D y = batch_norm(x, D(Shape{1, 2, 1, 1}, 2.0), D(Shape{1, 2, 1, 1}, 3.0), stats, Mode::train);
  double m = 0, v = 0;
  for (double e : y.data()) m += e;
  m /= static_cast<double>(y.numel());
  for (double e : y.data()) v += (e - m) * (e - m);
  v /= static_cast<double>(y.numel());
  EXPECT_NEAR(m, 3.0, 1e-4);
  EXPECT_NEAR(std::sqrt(v), 2.0, 1e-4);
}

TEST(BatchNorm, ConstantChannelCollapsesToBeta) {
  D x(Shape{2, 1, 3, 3}, 4.2);
  auto stats = BatchNormStats<double>{};
  D y = batch_norm(x, D(Shape{1, 1, 1, 1}, 1.7), D(Shape{1, 1, 1, 1}, -0.3), stats, Mode::train, 1e-5);
  // the mean of a constant carries one rounding step, amplified by 1/sqrt(eps)
  for (double e : y.data()) EXPECT_NEAR(e, -0.3, 1e-9);
}

TEST(BatchNorm, EvalWithoutStatisticsIsAnError) {
  BatchNormStats<float> stats;
  EXPECT_THROW(batch_norm(F(Shape{1, 2, 2, 2}), F(), F(), stats, Mode::eval), StateError);
  auto init = BatchNormStats<float>::identity(2);
  EXPECT_NO_THROW(batch_norm(F(Shape{1, 2, 2, 2}), F(), F(), init, Mode::eval));
}

TEST(BatchNorm, RunningStatisticsFollowMomentum) {
  D x(Shape{1, 1, 1, 4}, std::vector<double>{1, 2, 3, 4});
  auto stats = BatchNormStats<double>::identity(1);
  batch_norm(x, D(), D(), stats, Mode::train);
  // mean 2.5, unbiased variance 5/3
  EXPECT_NEAR(stats.running_mean[0], 0.25, 1e-12);
  EXPECT_NEAR(stats.running_var[0], 0.9 + 0.1 * 5.0 / 3.0, 1e-12);
}

TEST(LayerNorm, StandardizesEachSample) {
  Rng rng(14);
  D x = random_tensor<double>(Shape{3, 4, 3, 3}, rng, -1.0, 3.0);
  D y = layer_norm(x, D(), D());
  for (std::size_t n = 0; n < 3; ++n) {
    double m = 0, v = 0;
    for (std::size_t i = 0; i < 36; ++i) m += y.data()[n * 36 + i];
    m /= 36;
    for (std::size_t i = 0; i < 36; ++i) v += std::pow(y.data()[n * 36 + i] - m, 2);
    EXPECT_NEAR(m, 0.0, 1e-4);
    EXPECT_NEAR(v / 36, 1.0, 1e-4);
  }
  D z = layer_norm(x, D(Shape{1, 4, 1, 1}, 2.0), D(Shape{1, 4, 1, 1}, 3.0));
  double m = 0;
  for (double e : z.data()) m += e;
  EXPECT_NEAR(m / static_cast<double>(z.numel()), 3.0, 1e-4);
  D c = layer_norm(D(Shape{1, 2, 2, 2}, 5.0), D(Shape{1, 2, 1, 1}, 1.0), D(Shape{1, 2, 1, 1}, 0.25));
  for (double e : c.data()) EXPECT_DOUBLE_EQ(e, 0.25);
}

TEST(Resample, ConstantImagesStayConstant) {
  F x(Shape{1, 2, 4, 6}, 0.37f);
  const F up = bilinear_upsample2x(x);
  const F down = avg_pool(x, 2);
  for (float v : up.data()) EXPECT_FLOAT_EQ(v, 0.37f);
  for (float v : down.data()) EXPECT_FLOAT_EQ(v, 0.37f);
  EXPECT_EQ(bilinear_upsample2x(x).shape(), (Shape{1, 2, 8, 12}));
}

TEST(Resample, AvgPoolOfTwoByTwoBlock) {
  F x(Shape{1, 1, 2, 2}, std::vector<float>{1, 2, 3, 4});
  EXPECT_FLOAT_EQ(avg_pool(x, 2).item(), 2.5f);
  EXPECT_THROW(avg_pool(F(Shape{1, 1, 3, 4}), 2), ShapeError);
}

TEST(Resample, UpsampleUsesHalfPixelCentres) {
  // Row [0, 4]: outputs sample coordinates -0.25, 0.25, 0.75, 1.25 (edge-clamped).
  F x(Shape{1, 1, 1, 2}, std::vector<float>{0, 4});
  F y = bilinear_upsample2x(x);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 2, 4}));
  const float expected[4] = {0.0f, 1.0f, 3.0f, 4.0f};
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t i = 0; i < 4; ++i) EXPECT_FLOAT_EQ(y.at(0, 0, r, i), expected[i]);
}

TEST(PixelShuffle, ShapeAndIndexMappingByEnumeration) {
  std::vector<float> v(12 * 2 * 2);
  std::iota(v.begin(), v.end(), 0.0f);
  F x(Shape{1, 12, 2, 2}, v);
  F y = pixel_shuffle(x, 2);
  ASSERT_EQ(y.shape(), (Shape{1, 3, 4, 4}));
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t dy = 0; dy < 2; ++dy)
      for (std::size_t dx = 0; dx < 2; ++dx)
        for (std::size_t yy = 0; yy < 2; ++yy)
          for (std::size_t xx = 0; xx < 2; ++xx)
            EXPECT_EQ(y.at(0, c, 2 * yy + dy, 2 * xx + dx), x.at(0, c * 4 + 2 * dy + dx, yy, xx));
  EXPECT_EQ(max_abs_diff(pixel_unshuffle(y, 2), x), 0.0);
  EXPECT_THROW(pixel_shuffle(F(Shape{1, 6, 2, 2}), 2), ShapeError);
}

TEST(Backward, SumAndSquareGradients) {
  Rng rng(15);
  D x = random_tensor<double>(Shape{1, 2, 3, 3}, rng);
  x.set_requires_grad();
  {
    Tape<double> tape;
    D l;
    {
      Recording<double> rec(tape);
      l = sum(x);
    }
    tape.backward(l);
    for (double g : x.grad()) EXPECT_EQ(g, 1.0);
  }
  x.zero_grad();
  {
    Tape<double> tape;
    D l;
    {
      Recording<double> rec(tape);
      l = sum(mul(x, x));
    }
    tape.backward(l);
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 2.0 * x.data()[i]);
  }
}

TEST(Backward, NonScalarLossIsRejected) {
  D x(Shape{1, 1, 2, 2}, 1.0);
  x.set_requires_grad();
  Tape<double> tape;
  D y;
  {
    Recording<double> rec(tape);
    y = scale(x, 2.0);
  }
  EXPECT_THROW(tape.backward(y), ShapeError);
}

TEST(Backward, RepeatedBackwardDoublesLeafGradients) {
  Rng rng(16);
  D x = random_tensor<double>(Shape{1, 2, 4, 4}, rng);
  D w = random_tensor<double>(Shape{3, 2, 3, 3}, rng);
  x.set_requires_grad();
  w.set_requires_grad();
  Tape<double> tape;
  D l;
  {
    Recording<double> rec(tape);
    l = probe(sigmoid(conv2d(x, w, D(), 1, 1)), 9);
  }
  tape.backward(l);
  std::vector<double> gx(x.grad().begin(), x.grad().end()), gw(w.grad().begin(), w.grad().end());
  tape.backward(l);
  // partial sums land in the already-populated buffer, so only the last bits may differ
  for (std::size_t i = 0; i < gx.size(); ++i) EXPECT_NEAR(x.grad()[i], 2.0 * gx[i], 1e-12 * std::abs(gx[i]) + 1e-15);
  for (std::size_t i = 0; i < gw.size(); ++i) EXPECT_NEAR(w.grad()[i], 2.0 * gw[i], 1e-12 * std::abs(gw[i]) + 1e-15);
}

TEST(Backward, VisitsEveryRecordedEntryOnce) {
  Rng rng(17);
  D x = random_tensor<double>(Shape{1, 2, 4, 4}, rng);
  x.set_requires_grad();
  Tape<double> tape;
  D l;
  {
    Recording<double> rec(tape);
    D a = relu(x);
    D b = sigmoid(x);
    l = sum(add(mul(a, b), a));
  }
  EXPECT_EQ(tape.size(), 5u);
  EXPECT_EQ(tape.backward(l), tape.size());
}

TEST(Backward, EmptyTapeLeavesGradientsZero) {
  D x(Shape{1, 1, 2, 2}, 1.0);
  x.set_requires_grad();
  Tape<double> tape;
  D s = D::scalar(3.0);
  EXPECT_EQ(tape.backward(s), 0u);
  for (double g : x.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, NoRecordingWithoutActiveTape) {
  D x(Shape{1, 1, 2, 2}, 1.0);
  x.set_requires_grad();
  D y = relu(x);
  EXPECT_TRUE(y.is_leaf());
  EXPECT_FALSE(y.requires_grad());
}

TEST(Gradcheck, LinearFunctionIsExactToRoundoff) {
  Rng rng(18);
  D x = random_tensor<double>(Shape{1, 3, 4, 4}, rng);
  auto report = gradcheck([](const std::vector<D>& in) { return probe(scale(in[0], 3.5), 4); }, {x});
  EXPECT_LT(report.max_rel_err, 1e-9);
}

TEST(Gradcheck, ReluPassesAwayFromKinkAfterPrePerturbation) {
  D x(Shape{1, 1, 1, 3}, std::vector<double>{0.0, 0.0, 0.0});
  GradcheckOptions opts;
  opts.pre_perturb = 0.1;
  auto report = gradcheck([](const std::vector<D>& in) { return sum(relu(in[0])); }, {x}, opts);
  EXPECT_LT(report.max_rel_err, 1e-9);
  for (double v : x.data()) EXPECT_EQ(v, 0.0);  // inputs restored
}

TEST(Gradcheck, SigmoidChainOfDepthThree) {
  Rng rng(19);
  D x = random_tensor<double>(Shape{1, 2, 3, 3}, rng, -2.0, 2.0);
  auto report = gradcheck(
      [](const std::vector<D>& in) { return probe(sigmoid(sigmoid(sigmoid(in[0]))), 5); }, {x});
  EXPECT_LT(report.max_rel_err, 1e-6);
}

TEST(Gradcheck, PieceSignatureSetsAsideKinkStraddles) {
  D x(Shape{1, 1, 1, 3}, std::vector<double>{0.5, 5e-5, -0.5});
  GradcheckOptions opts;
  std::vector<bool> piece;
  opts.piece_signature = [&]() { return piece; };
  auto f = [&](const std::vector<D>& in) {
    piece.clear();
    for (double v : in[0].data()) piece.push_back(v > 0.0);
    return sum(relu(in[0]));
  };
  auto report = gradcheck(f, {x}, opts);
  EXPECT_EQ(report.skipped, 1u);
  EXPECT_EQ(report.checked, 2u);
  EXPECT_LT(report.max_rel_err, 1e-9);
  // Without the signature the straddling coordinate reads 0.75 instead of 1.
  EXPECT_NEAR(gradcheck(f, {x}).max_rel_err, 0.25, 1e-6);
}

TEST(Gradcheck, StabilityGuardSetsAsideUnconvergedDifferences) {
  // f = 1e6 x^3 at x = 0: the true slope is 0 but the h-difference reads 1e6 h^2.
  D x(Shape{1, 1, 1, 2}, std::vector<double>{0.0, 0.3});
  auto f = [](const std::vector<D>& in) {
    D c = mul(mul(in[0], in[0]), in[0]);
    return sum(scale(c, 1e6));
  };
  EXPECT_GT(gradcheck(f, {x}).max_rel_err, 0.99);
  GradcheckOptions opts;
  opts.stability_tolerance = 5e-5;
  auto report = gradcheck(f, {x}, opts);
  EXPECT_EQ(report.unstable, 1u);
  EXPECT_EQ(report.checked, 1u);
  EXPECT_LT(report.max_rel_err, 1e-7);
  EXPECT_GT(report.unguarded_max_rel_err, 0.99);
}

TEST(GradientSuite, ShortRunCoversEveryGroupAndPasses) {
  SuiteOptions o;
  o.op_trials = 2;
  o.loss_pairs = 1;
  o.network_samples_per_tensor = 1;
  const SuiteReport r = run_gradient_suite(o);
  std::set<std::string> groups, names;
  for (const auto& e : r.entries) {
    groups.insert(e.group);
    names.insert(e.name);
    EXPECT_TRUE(e.passed()) << e.name << " " << e.max_rel_err;
    EXPECT_GT(e.checked, 0u) << e.name;
  }
  EXPECT_EQ(groups, (std::set<std::string>{"op", "loss", "network"}));
  for (const char* n : {"conv2d", "haar_dwt", "haar_idwt", "ssim", "wavelet_ssim_loss", "wavelet_mse_loss",
                        "total_loss", "tiny_total_loss"}) {
    EXPECT_TRUE(names.count(n)) << n;
  }
  EXPECT_TRUE(r.passed());
  EXPECT_LT(r.worst("op"), 1e-5);
}

TEST(Determinism, RepeatedForwardIsBitwiseIdentical) {
  Rng rng(20);
  F x = random_tensor<float>(Shape{2, 4, 9, 7}, rng);
  F w = random_tensor<float>(Shape{5, 4, 3, 3}, rng);
  F a = bilinear_upsample2x(relu(conv2d(x, w, F(), 1, 1)));
  F b = bilinear_upsample2x(relu(conv2d(x, w, F(), 1, 1)));
  EXPECT_TRUE(testing::bitwise_equal(a, b));
}

// --- Gradient property suite: >= 20 random trials per differentiable op. ---

struct OpCase {
  const char* name;
  std::function<std::vector<D>(Rng&)> make_inputs;
  std::function<D(const std::vector<D>&)> apply;
};

D away_from_zero(Shape s, Rng& rng) {
  std::vector<double> v(s.numel());
  for (auto& e : v) e = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.1, 1.0);
  return D(s, v);
}

Shape small_shape(Rng& rng, std::size_t max_c = 3) {
  return Shape{1 + rng.index(2), 1 + rng.index(max_c), 2 + 2 * rng.index(3), 2 + 2 * rng.index(3)};
}

std::vector<OpCase> op_cases() {
  std::vector<OpCase> cases;
  cases.push_back({"conv2d",
                   [](Rng& r) {
                     Shape s = small_shape(r);
                     const std::size_t k = r.index(2) == 0 ? 1 : 3;
                     return std::vector<D>{random_tensor<double>(s, r),
                                           random_tensor<double>(Shape{1 + r.index(3), s.c, k, k}, r)};
                   },
                   [](const std::vector<D>& in) {
                     const int stride = in[0].height() % 4 == 0 ? 2 : 1;
                     return conv2d(in[0], in[1], D(), stride, static_cast<int>(in[1].height() / 2));
                   }});
  cases.push_back({"conv2d_bias",
                   [](Rng& r) {
                     Shape s = small_shape(r);
                     return std::vector<D>{random_tensor<double>(s, r),
                                           random_tensor<double>(Shape{2, s.c, 3, 3}, r),
                                           random_tensor<double>(Shape{1, 2, 1, 1}, r)};
                   },
                   [](const std::vector<D>& in) { return conv2d(in[0], in[1], in[2], 1, 1); }});
  cases.push_back({"depthwise_separable_conv",
                   [](Rng& r) {
                     Shape s = small_shape(r);
                     return std::vector<D>{random_tensor<double>(s, r),
                                           random_tensor<double>(Shape{s.c, 1, 3, 3}, r),
                                           random_tensor<double>(Shape{1, s.c, 1, 1}, r),
                                           random_tensor<double>(Shape{2, s.c, 1, 1}, r),
                                           random_tensor<double>(Shape{1, 2, 1, 1}, r)};
                   },
                   [](const std::vector<D>& in) {
                     return depthwise_separable_conv(in[0], in[1], in[2], in[3], in[4], 2, 1);
                   }});
  cases.push_back({"relu", [](Rng& r) { return std::vector<D>{away_from_zero(small_shape(r), r)}; },
                   [](const std::vector<D>& in) { return relu(in[0]); }});
  cases.push_back({"sigmoid", [](Rng& r) { return std::vector<D>{random_tensor<double>(small_shape(r), r, -3, 3)}; },
                   [](const std::vector<D>& in) { return sigmoid(in[0]); }});
  cases.push_back({"add_broadcast",
                   [](Rng& r) {
                     Shape s = small_shape(r);
                     return std::vector<D>{random_tensor<double>(s, r),
                                           random_tensor<double>(Shape{s.n, s.c, 1, 1}, r)};
                   },
                   [](const std::vector<D>& in) { return add(in[0], in[1]); }});
  cases.push_back({"sub",
                   [](Rng& r) {
                     Shape s = small_shape(r);
                     return std::vector<D>{random_tensor<double>(s, r), random_tensor<double>(s, r)};
                   },
                   [](const std::vector<D>& in) { return sub(in[0], in[1]); }});
  cases.push_back({"mul_broadcast",
                   [](Rng& r) {
                     Shape s = small_shape(r);
                     return std::vector<D>{random_tensor<double>(s, r),
                                           random_tensor<double>(Shape{1, s.c, 1, 1}, r)};
                   },
                   [](const std::vector<D>& in) { return mul(in[0], in[1]); }});
  cases.push_back({"mul_scalar_mask",
                   [](Rng& r) {
                     return std::vector<D>{random_tensor<double>(small_shape(r), r),
                                           random_tensor<double>(Shape{1, 1, 1, 1}, r)};
                   },
                   [](const std::vector<D>& in) { return mul(in[0], in[1]); }});
  cases.push_back({"scale", [](Rng& r) { return std::vector<D>{random_tensor<double>(small_shape(r), r)}; },
                   [](const std::vector<D>& in) { return scale(in[0], -0.7); }});
  cases.push_back({"clamp",
                   [](Rng& r) {
                     // keep values away from the clamp bounds +-0.5
                     Shape s = small_shape(r);
                     std::vector<double> v(s.numel());
                     for (auto& e : v) {
                       const double u = r.uniform();
                       e = u < 0.3 ? r.uniform(-1.0, -0.6) : (u < 0.7 ? r.uniform(-0.4, 0.4) : r.uniform(0.6, 1.0));
                     }
                     return std::vector<D>{D(s, v)};
                   },
                   [](const std::vector<D>& in) { return clamp(in[0], -0.5, 0.5); }});
  cases.push_back({"concat_channels",
                   [](Rng& r) {
                     Shape s = small_shape(r);
                     Shape t = s;
                     t.c = 1 + r.index(3);
                     return std::vector<D>{random_tensor<double>(s, r), random_tensor<double>(t, r)};
                   },
                   [](const std::vector<D>& in) { return concat_channels(in); }});
  cases.push_back({"channel_slice",
                   [](Rng& r) {
                     Shape s = small_shape(r);
                     s.c = 3;
                     return std::vector<D>{random_tensor<double>(s, r)};
                   },
                   [](const std::vector<D>& in) { return channel_slice(in[0], 1, 2); }});
  cases.push_back({"global_avg_pool",
                   [](Rng& r) { return std::vector<D>{random_tensor<double>(small_shape(r), r)}; },
                   [](const std::vector<D>& in) { return global_avg_pool(in[0]); }});
  cases.push_back({"conv1d_channels",
                   [](Rng& r) {
                     return std::vector<D>{random_tensor<double>(Shape{1 + r.index(2), 2 + r.index(6), 1, 1}, r),
                                           random_tensor<double>(Shape{1, 1, 1, r.index(2) == 0 ? 3u : 5u}, r)};
                   },
                   [](const std::vector<D>& in) { return conv1d_channels(in[0], in[1]); }});
  cases.push_back({"batch_norm_train",
                   [](Rng& r) {
                     Shape s = small_shape(r);
                     return std::vector<D>{random_tensor<double>(s, r, -2, 2),
                                           random_tensor<double>(Shape{1, s.c, 1, 1}, r, 0.5, 1.5),
                                           random_tensor<double>(Shape{1, s.c, 1, 1}, r)};
                   },
                   [](const std::vector<D>& in) {
                     BatchNormStats<double> stats;
                     return batch_norm(in[0], in[1], in[2], stats, Mode::train);
                   }});
  cases.push_back({"batch_norm_eval",
                   [](Rng& r) {
                     Shape s = small_shape(r);
                     return std::vector<D>{random_tensor<double>(s, r, -2, 2),
                                           random_tensor<double>(Shape{1, s.c, 1, 1}, r, 0.5, 1.5),
                                           random_tensor<double>(Shape{1, s.c, 1, 1}, r)};
                   },
                   [](const std::vector<D>& in) {
                     auto stats = BatchNormStats<double>::identity(in[0].channels());
                     stats.running_mean.assign(in[0].channels(), 0.2);
                     stats.running_var.assign(in[0].channels(), 1.7);
                     return batch_norm(in[0], in[1], in[2], stats, Mode::eval);
                   }});
  cases.push_back({"layer_norm",
                   [](Rng& r) {
                     Shape s = small_shape(r);
                     return std::vector<D>{random_tensor<double>(s, r, -2, 2),
                                           random_tensor<double>(Shape{1, s.c, 1, 1}, r, 0.5, 1.5),
                                           random_tensor<double>(Shape{1, s.c, 1, 1}, r)};
                   },
                   [](const std::vector<D>& in) { return layer_norm(in[0], in[1], in[2]); }});
  cases.push_back({"bilinear_upsample2x",
                   [](Rng& r) { return std::vector<D>{random_tensor<double>(small_shape(r), r)}; },
                   [](const std::vector<D>& in) { return bilinear_upsample2x(in[0]); }});
  cases.push_back({"avg_pool",
                   [](Rng& r) { return std::vector<D>{random_tensor<double>(small_shape(r), r)}; },
                   [](const std::vector<D>& in) { return avg_pool(in[0], 2); }});
  cases.push_back({"pixel_shuffle",
                   [](Rng& r) {
                     Shape s = small_shape(r);
                     s.c = 4 * (1 + r.index(3));
                     return std::vector<D>{random_tensor<double>(s, r)};
                   },
                   [](const std::vector<D>& in) { return pixel_shuffle(in[0], 2); }});
  cases.push_back({"mean_abs_error",
                   [](Rng& r) {
                     Shape s = small_shape(r);
                     return std::vector<D>{random_tensor<double>(s, r), random_tensor<double>(s, r)};
                   },
                   [](const std::vector<D>& in) { return mean_abs_error(in[0], in[1]); }});
  cases.push_back({"mean_squared_error",
                   [](Rng& r) {
                     Shape s = small_shape(r);
                     return std::vector<D>{random_tensor<double>(s, r), random_tensor<double>(s, r)};
                   },
                   [](const std::vector<D>& in) { return mean_squared_error(in[0], in[1]); }});
  return cases;
}

class OpGradient : public ::testing::TestWithParam<std::size_t> {};

TEST_P(OpGradient, MatchesCentralDifferencesOnRandomTrials) {
  const auto cases = op_cases();
  const OpCase& op = cases[GetParam()];
  Rng rng(1000 + GetParam());
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    auto inputs = op.make_inputs(rng);
    const std::uint64_t probe_seed = rng.next_u64();
    auto report = gradcheck(
        [&](const std::vector<D>& in) {
          D out = op.apply(in);
          return out.numel() == 1 ? out : probe(out, probe_seed);
        },
        inputs);
    worst = std::max(worst, report.max_rel_err);
  }
  EXPECT_LT(worst, 1e-5) << op.name;
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradient, ::testing::Range<std::size_t>(0, op_cases().size()),
                         [](const ::testing::TestParamInfo<std::size_t>& info) {
                           return std::string(op_cases()[info.param].name);
                         });

}  // namespace
}  // namespace erienet
