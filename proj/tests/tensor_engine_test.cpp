#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "copanet/gradcheck.hpp"
#include "copanet/ops.hpp"
#include "test_util.hpp"

namespace copanet {
namespace {

using test::random_tensor;
using test::random_weights;

TEST(Conv2d, OnesKernelCountsOverlap) {
  Tensor<double> x({1, 1, 3, 3}, 1.0);
  Tensor<double> w({1, 1, 3, 3}, 1.0);
  auto y = conv2d(x, w, 1, 1);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 3, 3}));
  EXPECT_EQ(y[4], 9.0);
  for (std::size_t corner : {0, 2, 6, 8}) EXPECT_EQ(y[corner], 4.0);
  for (std::size_t edge : {1, 3, 5, 7}) EXPECT_EQ(y[edge], 6.0);
}

TEST(Conv2d, PointwiseKernelScales) {
  Tensor<double> x({1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor<double> w({1, 1, 1, 1}, {2});
  auto y = conv2d(x, w, 1, 0);
  EXPECT_EQ(y.values(), (std::vector<double>{2, 4, 6, 8}));
}

TEST(Conv2d, OutputShapeWithStride) {
  std::mt19937_64 rng(1);
  auto x = random_tensor({2, 3, 9, 7}, rng);
  auto w = random_tensor({5, 3, 3, 3}, rng);
  EXPECT_EQ(conv2d(x, w, 2, 1).shape(), (Shape{2, 5, 5, 4}));
  EXPECT_EQ(conv2d(x, w, 1, 0).shape(), (Shape{2, 5, 7, 5}));
}

// Direct six-loop cross-correlation with explicit zero padding.
std::vector<double> direct_conv(const Tensor<double>& x, const Tensor<double>& w,
                                std::size_t stride, std::size_t pad) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t o = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const std::size_t oh = (h + 2 * pad - kh) / stride + 1, ow = (wd + 2 * pad - kw) / stride + 1;
  std::vector<double> y(n * o * oh * ow, 0.0);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t f = 0; f < o; ++f)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          double acc = 0;
          for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t a = 0; a < kh; ++a)
              for (std::size_t e = 0; e < kw; ++e) {
                const long r = static_cast<long>(i * stride + a) - static_cast<long>(pad);
                const long q = static_cast<long>(j * stride + e) - static_cast<long>(pad);
                if (r < 0 || q < 0 || r >= static_cast<long>(h) || q >= static_cast<long>(wd)) continue;
                acc += x[((b * c + ch) * h + r) * wd + q] * w[((f * c + ch) * kh + a) * kw + e];
              }
          y[((b * o + f) * oh + i) * ow + j] = acc;
        }
  return y;
}

TEST(Conv2d, MatchesDirectLoops) {
  std::mt19937_64 rng(11);
  for (std::size_t stride : {1, 2}) {
    for (std::size_t pad : {0, 1}) {
      for (Shape xs : {Shape{2, 3, 7, 5}, Shape{1, 2, 3, 3}, Shape{1, 1, 8, 6}}) {
        for (std::size_t k : {1, 3}) {
          auto x = random_tensor(xs, rng);
          auto w = random_tensor({4, xs[1], k, k}, rng);
          const auto y = conv2d(x, w, stride, pad).values();
          const auto ref = direct_conv(x, w, stride, pad);
          ASSERT_EQ(y.size(), ref.size());
          for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);
        }
      }
    }
  }
}

TEST(Conv2d, ChannelMismatchNamesBothShapes) {
  Tensor<double> x({1, 2, 4, 4});
  Tensor<double> w({3, 4, 3, 3});
  try {
    conv2d(x, w, 1, 1);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[1x2x4x4]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[3x4x3x3]"), std::string::npos) << msg;
  }
  EXPECT_THROW(conv2d(Tensor<double>({1, 4, 4, 4}), w, 3, 1), ConfigError);
  EXPECT_THROW(conv2d(Tensor<double>({1, 4, 4, 4}), w, 1, 2), ConfigError);
}

TEST(Conv2d, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(7);
  auto x = random_tensor({2, 3, 8, 8}, rng, -1, 1, true);
  auto w = random_tensor({4, 3, 3, 3}, rng, -1, 1, true);
  for (std::size_t stride : {1, 2}) {
    for (std::size_t pad : {0, 1}) {
      const auto proj = random_weights(numel(conv2d(x, w, stride, pad).shape()), rng);
      auto result = check_gradients(
          [&] { return weighted_sum<double>(conv2d(x, w, stride, pad), proj); },
          {{"input", x}, {"weight", w}});
      EXPECT_LT(result.max_relative_error, 1e-4) << result.worst;
      EXPECT_EQ(result.skipped_kinks, 0u);
      EXPECT_EQ(result.checked, x.numel() + w.numel());
    }
  }
}

TEST(Conv2d, PointwiseGradient) {
  std::mt19937_64 rng(8);
  auto x = random_tensor({2, 5, 4, 4}, rng, -1, 1, true);
  auto w = random_tensor({3, 5, 1, 1}, rng, -1, 1, true);
  const auto proj = random_weights(2 * 3 * 16, rng);
  auto result = check_gradients(
      [&] { return weighted_sum<double>(conv2d(x, w, 1, 0), proj); },
      {{"input", x}, {"weight", w}});
  EXPECT_LT(result.max_relative_error, 1e-6) << result.worst;
}

double channel_mean(const Tensor<double>& t, std::size_t ch) {
  const std::size_t n = t.dim(0), c = t.dim(1), plane = t.dim(2) * t.dim(3);
  double s = 0;
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t i = 0; i < plane; ++i) s += t[(b * c + ch) * plane + i];
  return s / static_cast<double>(n * plane);
}

double channel_std(const Tensor<double>& t, std::size_t ch) {
  const double mu = channel_mean(t, ch);
  const std::size_t n = t.dim(0), c = t.dim(1), plane = t.dim(2) * t.dim(3);
  double s = 0;
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t i = 0; i < plane; ++i) {
      const double d = t[(b * c + ch) * plane + i] - mu;
      s += d * d;
    }
  return std::sqrt(s / static_cast<double>(n * plane));
}

TEST(BatchNorm, NormalizesPerChannel) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> dist(5.0, 2.0);
  Tensor<double> x({8, 3, 6, 6});
  for (auto& v : x.data()) v = dist(rng);
  BatchNormState<double> bn(3);
  auto y = batchnorm2d(x, bn, true);
  for (std::size_t ch = 0; ch < 3; ++ch) {
    EXPECT_NEAR(channel_mean(y, ch), 0.0, 1e-6);
    EXPECT_NEAR(channel_std(y, ch), 1.0, 1e-3);
  }
  std::fill(bn.gamma.data().begin(), bn.gamma.data().end(), 3.0);
  std::fill(bn.beta.data().begin(), bn.beta.data().end(), -1.0);
  auto z = batchnorm2d(x, bn, true);
  for (std::size_t ch = 0; ch < 3; ++ch) {
    EXPECT_NEAR(channel_mean(z, ch), -1.0, 1e-6);
    EXPECT_NEAR(channel_std(z, ch), 3.0, 3e-3);
  }
}

TEST(BatchNorm, RunningStatisticsFollowEma) {
  Tensor<double> x({2, 1, 1, 2}, {1, 3, 5, 7});  // mean 4, unbiased var 20/3
  BatchNormState<double> bn(1);
  batchnorm2d(x, bn, true);
  EXPECT_DOUBLE_EQ(bn.running_mean[0], 0.1 * 4.0);
  EXPECT_DOUBLE_EQ(bn.running_var[0], 0.9 * 1.0 + 0.1 * (20.0 / 3.0));
  // Eval mode normalizes with the running statistics.
  auto y = batchnorm2d(x, bn, false);
  const double expected = (1.0 - bn.running_mean[0]) / std::sqrt(bn.running_var[0] + 1e-5);
  EXPECT_NEAR(y[0], expected, 1e-12);
}

TEST(BatchNorm, SingleElementStatisticsRejected) {
  BatchNormState<double> bn(2);
  EXPECT_THROW(batchnorm2d(Tensor<double>({1, 2, 1, 1}), bn, true), ConfigError);
  EXPECT_NO_THROW(batchnorm2d(Tensor<double>({1, 2, 1, 1}), bn, false));
  EXPECT_THROW(batchnorm2d(Tensor<double>({2, 3, 2, 2}), bn, true), ConfigError);
}

TEST(BatchNorm, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  auto x = random_tensor({2, 2, 3, 3}, rng, -2, 2, true);
  BatchNormState<double> bn(2);
  bn.gamma[0] = 1.3;
  bn.gamma[1] = -0.7;
  bn.beta[0] = 0.2;
  bn.beta[1] = -0.4;
  const auto proj = random_weights(x.numel(), rng);
  for (bool training : {true, false}) {
    auto result = check_gradients(
        [&] { return weighted_sum<double>(batchnorm2d(x, bn, training), proj); },
        {{"input", x}, {"gamma", bn.gamma}, {"beta", bn.beta}});
    EXPECT_LT(result.max_relative_error, 1e-4) << result.worst;
  }
}

TEST(MaxK, ForwardAndTieRule) {
  Tensor<double> a({3}, {1, -2, 3});
  Tensor<double> b({3}, {0, 5, 3});
  auto r = elementwise_max_k<double>({a, b}, true);
  EXPECT_EQ(r.output.values(), (std::vector<double>{1, 5, 3}));
  EXPECT_EQ(r.routing.winners, (std::vector<std::uint8_t>{0, 1, 0}));
  EXPECT_EQ(r.routing.pathways, 2u);
}

TEST(MaxK, IdenticalInputsRouteToFirst) {
  std::mt19937_64 rng(2);
  auto a = random_tensor({2, 3, 4}, rng);
  auto r = elementwise_max_k<double>({a, a.clone(), a.clone()}, true);
  EXPECT_EQ(r.output.values(), a.values());
  for (auto w : r.routing.winners) EXPECT_EQ(w, 0);
}

TEST(MaxK, GradientRoutesToWinnerOnly) {
  Tensor<double> a({3}, {1, -2, 3});
  Tensor<double> b({3}, {0, 5, 3});
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  backward(sum(elementwise_max_k<double>({a, b}, false).output));
  EXPECT_EQ(std::vector<double>(a.grad().begin(), a.grad().end()),
            (std::vector<double>{1, 0, 1}));
  EXPECT_EQ(std::vector<double>(b.grad().begin(), b.grad().end()),
            (std::vector<double>{0, 1, 0}));
  // Away from the tie, finite differences agree with the routed gradient.
  Tensor<double> c({2}, {1, -2});
  Tensor<double> d({2}, {0, 5});
  c.set_requires_grad(true);
  d.set_requires_grad(true);
  auto result = check_gradients(
      [&] { return sum(elementwise_max_k<double>({c, d}, false).output); },
      {{"a", c}, {"b", d}});
  EXPECT_LT(result.max_relative_error, 1e-6) << result.worst;
}

TEST(MaxK, RejectsBadInputs) {
  Tensor<double> a({3});
  EXPECT_THROW(elementwise_max_k<double>({}, false), ConfigError);
  EXPECT_THROW(elementwise_max_k<double>({a}, false), ConfigError);
  EXPECT_THROW(elementwise_max_k<double>({a, Tensor<double>({4})}, false), ConfigError);
}

TEST(MaxK, GradientConservationProperty) {
  std::mt19937_64 rng(99);
  std::uniform_int_distribution<int> kdist(2, 5);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t k = static_cast<std::size_t>(kdist(rng));
    std::vector<Tensor<double>> inputs;
    for (std::size_t i = 0; i < k; ++i) {
      inputs.push_back(random_tensor({2, 3, 5}, rng, -1, 1, true));
    }
    auto upstream = random_weights(30, rng);
    backward(weighted_sum<double>(elementwise_max_k(inputs, false).output, upstream));
    for (std::size_t i = 0; i < 30; ++i) {
      double total = 0;
      for (auto& in : inputs) total += in.grad()[i];
      ASSERT_EQ(total, upstream[i]);
    }
  }
}

TEST(Pointwise, ReluForwardAndGradient) {
  Tensor<double> x({3}, {-1, 0, 2});
  EXPECT_EQ(relu(x).values(), (std::vector<double>{0, 0, 2}));
  std::mt19937_64 rng(5);
  auto y = random_tensor({40}, rng, -1, 1, true);
  for (auto& v : y.data()) v += v > 0 ? 0.1 : -0.1;  // keep away from the kink
  const auto proj = random_weights(40, rng);
  auto result = check_gradients([&] { return weighted_sum<double>(relu(y), proj); },
                                {{"x", y}});
  EXPECT_LT(result.max_relative_error, 1e-6) << result.worst;
}

TEST(Pooling, AverageWindow) {
  Tensor<double> x({1, 1, 2, 2}, {1, 2, 3, 4});
  auto y = avgpool2d(x, 2, 2);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(y[0], 2.5);
  auto g = global_avgpool(x);
  EXPECT_EQ(g.shape(), (Shape{1, 1}));
  EXPECT_EQ(g[0], 2.5);
}

TEST(Pooling, Gradients) {
  std::mt19937_64 rng(6);
  auto x = random_tensor({2, 3, 4, 6}, rng, -1, 1, true);
  const auto p1 = random_weights(2 * 3 * 2 * 3, rng);
  const auto p2 = random_weights(6, rng);
  auto r1 = check_gradients([&] { return weighted_sum<double>(avgpool2d(x, 2, 2), p1); },
                            {{"x", x}});
  auto r2 = check_gradients([&] { return weighted_sum<double>(global_avgpool(x), p2); },
                            {{"x", x}});
  EXPECT_LT(r1.max_relative_error, 1e-6) << r1.worst;
  EXPECT_LT(r2.max_relative_error, 1e-6) << r2.worst;
}

TEST(Concat, ChannelsRecoverableBySlicing) {
  std::mt19937_64 rng(4);
  auto a = random_tensor({2, 3, 4, 4}, rng, -1, 1, true);
  auto b = random_tensor({2, 5, 4, 4}, rng, -1, 1, true);
  auto c = concat_channels<double>({a, b});
  EXPECT_EQ(c.shape(), (Shape{2, 8, 4, 4}));
  EXPECT_EQ(slice_channels(c, 0, 3).values(), a.values());
  EXPECT_EQ(slice_channels(c, 3, 5).values(), b.values());
  EXPECT_THROW(concat_channels<double>({a, Tensor<double>({2, 1, 3, 4})}), ConfigError);

  const auto proj = random_weights(c.numel(), rng);
  auto result = check_gradients(
      [&] { return weighted_sum<double>(concat_channels<double>({a, b}), proj); },
      {{"a", a}, {"b", b}});
  EXPECT_LT(result.max_relative_error, 1e-6) << result.worst;
}

TEST(Linear, ForwardAndGradient) {
  Tensor<double> x({1, 2}, {1, 2});
  Tensor<double> w({2, 2}, {1, 2, 3, 4});
  Tensor<double> b({2}, {0.5, -0.5});
  EXPECT_EQ(linear(x, w, b).values(), (std::vector<double>{7.5, 9.5}));
  EXPECT_THROW(linear(x, Tensor<double>({3, 2}), b), ConfigError);

  std::mt19937_64 rng(12);
  auto xi = random_tensor({4, 6}, rng, -1, 1, true);
  auto wi = random_tensor({6, 3}, rng, -1, 1, true);
  auto bi = random_tensor({3}, rng, -1, 1, true);
  const auto proj = random_weights(12, rng);
  auto result = check_gradients(
      [&] { return weighted_sum<double>(linear(xi, wi, bi), proj); },
      {{"x", xi}, {"w", wi}, {"b", bi}});
  EXPECT_LT(result.max_relative_error, 1e-6) << result.worst;
}

TEST(Dropout, EvalScalesByKeepProbability) {
  Tensor<double> x({2}, {10, 5});
  auto y = dropout(x, 0.2, false, nullptr);
  EXPECT_DOUBLE_EQ(y[0], 8.0);
  EXPECT_DOUBLE_EQ(y[1], 4.0);
}

TEST(Dropout, ZeroRateIsIdentity) {
  std::mt19937_64 rng(1);
  auto x = random_tensor({10}, rng);
  EXPECT_EQ(dropout(x, 0.0, true, &rng).values(), x.values());
  EXPECT_EQ(dropout(x, 0.0, false, nullptr).values(), x.values());
}

TEST(Dropout, TrainingDropsWithoutRescaling) {
  std::mt19937_64 rng(2024);
  Tensor<double> x({100000}, 1.0);
  auto y = dropout(x, 0.5, true, &rng);
  std::size_t zeros = 0;
  for (double v : y.data()) {
    if (v == 0.0) {
      ++zeros;
    } else {
      ASSERT_EQ(v, 1.0);
    }
  }
  EXPECT_NEAR(static_cast<double>(zeros) / 1e5, 0.5, 0.01);
}

TEST(Dropout, RateOutsideRangeRejected) {
  Tensor<double> x({2});
  std::mt19937_64 rng(1);
  EXPECT_THROW(dropout(x, 1.0, true, &rng), ConfigError);
  EXPECT_THROW(dropout(x, -0.1, false, nullptr), ConfigError);
}

TEST(SoftmaxCrossEntropy, KnownValues) {
  Tensor<double> uniform({2, 10}, 0.0);
  std::vector<int> labels{3, 7};
  EXPECT_NEAR(softmax_cross_entropy(uniform, labels).item(), std::log(10.0), 1e-12);
  Tensor<double> saturated({1, 10}, 0.0);
  saturated[4] = 30.0;
  std::vector<int> label{4};
  EXPECT_LT(softmax_cross_entropy(saturated, label).item(), 1e-9);
  std::vector<int> bad{10};
  EXPECT_THROW(softmax_cross_entropy(saturated, bad), DataError);
}

TEST(SoftmaxCrossEntropy, Gradient) {
  std::mt19937_64 rng(13);
  auto z = random_tensor({5, 4}, rng, -3, 3, true);
  std::vector<int> labels{0, 3, 2, 2, 1};
  auto result = check_gradients([&] { return softmax_cross_entropy(z, labels); },
                                {{"logits", z}});
  EXPECT_LT(result.max_relative_error, 1e-6) << result.worst;
}

TEST(Backward, SumGivesOnes) {
  std::mt19937_64 rng(1);
  auto x = random_tensor({2, 3, 4}, rng, -1, 1, true);
  backward(sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, MaxRoutesToLargerInput) {
  std::mt19937_64 rng(1);
  auto y = random_tensor({20}, rng, -1, 0, true);
  auto x = random_tensor({20}, rng, 0.5, 1, true);
  backward(sum(elementwise_max_k<double>({x, y}, false).output));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
  for (double g : y.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, UsageErrors) {
  std::mt19937_64 rng(1);
  auto x = random_tensor({3}, rng, -1, 1, true);
  auto loss = sum(x);
  backward(loss);
  EXPECT_THROW(backward(loss), UsageError);
  EXPECT_THROW(backward(relu(x)), UsageError);
  EXPECT_THROW(backward(sum(random_tensor({3}, rng))), UsageError);
}

TEST(Backward, GradientsAccumulateAcrossUses) {
  Tensor<double> x({2}, {1, 2});
  x.set_requires_grad(true);
  backward(sum(add(x, x)));
  EXPECT_EQ(x.grad()[0], 2.0);
  EXPECT_EQ(x.grad()[1], 2.0);
}

TEST(Backward, NoGradGuardSkipsRecording) {
  std::mt19937_64 rng(1);
  auto x = random_tensor({3}, rng, -1, 1, true);
  NoGradGuard guard;
  auto y = relu(x);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Backward, IsLinearInTheLoss) {
  std::mt19937_64 rng(21);
  auto x = random_tensor({2, 3, 5, 5}, rng, -1, 1, true);
  auto w = random_tensor({4, 3, 3, 3}, rng, -1, 1, true);
  BatchNormState<double> bn(4);
  std::vector<int> labels{1, 3};
  const auto proj = random_weights(2 * 4 * 25, rng);
  auto loss1 = [&] {
    return weighted_sum<double>(relu(batchnorm2d(conv2d(x, w, 1, 1), bn, true)), proj);
  };
  auto loss2 = [&] {
    auto h = global_avgpool(relu(conv2d(x, w, 1, 1)));
    return softmax_cross_entropy(h, labels);
  };
  auto grads_of = [&](auto build) {
    x.zero_grad();
    w.zero_grad();
    backward(build());
    std::vector<double> g(x.grad().begin(), x.grad().end());
    g.insert(g.end(), w.grad().begin(), w.grad().end());
    return g;
  };
  const double a = 0.75, b = -1.5;
  auto g1 = grads_of(loss1);
  auto g2 = grads_of(loss2);
  auto g12 = grads_of([&] { return add(scale(loss1(), a), scale(loss2(), b)); });
  for (std::size_t i = 0; i < g12.size(); ++i) {
    EXPECT_NEAR(g12[i], a * g1[i] + b * g2[i], 1e-12);
  }
}

TEST(Determinism, RepeatedForwardIsBitIdentical) {
  std::mt19937_64 rng(31);
  auto x = random_tensor({2, 3, 6, 6}, rng);
  auto w = random_tensor({4, 3, 3, 3}, rng);
  auto run = [&] {
    std::mt19937_64 drop_rng(5);
    BatchNormState<float> bn(4);
    Tensor<float> xf(x.shape());
    Tensor<float> wf(w.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) xf[i] = static_cast<float>(x[i]);
    for (std::size_t i = 0; i < w.numel(); ++i) wf[i] = static_cast<float>(w[i]);
    auto h = batchnorm2d(conv2d(xf, wf, 1, 1), bn, true);
    auto r = elementwise_max_k<float>({h, scale(h, -1.0f)}, true);
    return std::make_pair(dropout(r.output, 0.3, true, &drop_rng).values(), r.routing.winners);
  };
  EXPECT_EQ(run(), run());
}

TEST(Tensor, ShapeInvariants) {
  EXPECT_THROW(Tensor<double>({2, 2}, std::vector<double>{1, 2, 3}), ConfigError);
  Tensor<double> t({2, 3});
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_FALSE(t.has_grad());
  t.set_requires_grad(true);
  t.mutable_grad();
  EXPECT_EQ(t.grad().size(), 6u);
  EXPECT_THROW(t.item(), UsageError);
  Tensor<double> bad({1}, {std::nan("")});
  EXPECT_FALSE(all_finite(bad));
}

}  // namespace
}  // namespace copanet
