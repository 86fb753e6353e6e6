#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "mdrwkv/ops.hpp"
#include "support/gradcheck.hpp"

using namespace mdrwkv;
using mdrwkv::testing::check_gradients;
using mdrwkv::testing::random_tensor;

namespace {

constexpr double kGradTol = 1e-3;

void expect_values(const Tensor& t, const std::vector<float>& expected, float tol = 0.0f) {
  ASSERT_EQ(t.numel(), expected.size());
  for (std::size_t i = 0; i < expected.size(); ++i) {
    EXPECT_NEAR(t.data()[i], expected[i], tol) << "index " << i;
  }
}

}  // namespace

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<float>(5)), ShapeError);
  Tensor t({2, 3}, std::vector<float>(6, 1.0f));
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(shape_str(t.shape()), "[2, 3]");
}

TEST(Autodiff, SquareGradient) {
  Tensor x = Tensor::parameter({1}, {3.0f});
  backward(mul(x, x));
  EXPECT_FLOAT_EQ(x.grad()[0], 6.0f);
}

TEST(Autodiff, ReluSumGradient) {
  Tensor x = Tensor::parameter({2}, {-1.0f, 2.0f});
  backward(sum(relu(x)));
  EXPECT_FLOAT_EQ(x.grad()[0], 0.0f);
  EXPECT_FLOAT_EQ(x.grad()[1], 1.0f);
}

TEST(Autodiff, NonScalarLossRejected) {
  Tensor x = Tensor::parameter({2}, {1.0f, 2.0f});
  EXPECT_THROW(backward(scale(x, 2.0f)), ShapeError);
}

TEST(Autodiff, TapeVisitsSharedNodesOnce) {
  Tensor x = Tensor::parameter({1}, {2.0f});
  Tensor y = mul(x, x);
  Tensor z = add(y, y);  // diamond through y
  GradTape tape(z);
  EXPECT_EQ(tape.size(), 3u);
  backward(z);
  EXPECT_FLOAT_EQ(x.grad()[0], 8.0f);
}

TEST(Autodiff, UnreachedParameterHasZeroGradient) {
  Tensor used = Tensor::parameter({1}, {1.5f});
  Tensor unused = Tensor::parameter({1}, {4.0f});
  Tensor other = mul(unused, unused);
  backward(mul(used, used));
  EXPECT_FALSE(unused.has_grad());
  EXPECT_FLOAT_EQ(used.grad()[0], 3.0f);
  (void)other;
}

TEST(Autodiff, NoGradGuardSkipsRecording) {
  Tensor x = Tensor::parameter({1}, {1.0f});
  NoGradGuard guard;
  Tensor y = mul(x, x);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Conv2d, IdentityKernel) {
  auto x = random_tensor({2, 1, 4, 5}, 1);
  Tensor w({1, 1, 1, 1}, {1.0f});
  expect_values(conv2d(x, w), x.to_vector());
}

TEST(Conv2d, OnesKernelOnConstantInput) {
  const float c = 0.75f;
  auto x = Tensor::full({1, 1, 5, 5}, c);
  auto w = Tensor::full({1, 1, 3, 3}, 1.0f);
  auto y = conv2d(x, w, {}, 1, 1);
  for (std::size_t i = 1; i < 4; ++i)
    for (std::size_t j = 1; j < 4; ++j) EXPECT_FLOAT_EQ(y.at(0, 0, i, j), 9.0f * c);
  EXPECT_FLOAT_EQ(y.at(0, 0, 0, 0), 4.0f * c);  // corner sees 2x2 of the window
}

TEST(Conv2d, StridedOutputShape) {
  auto x = random_tensor({1, 2, 5, 5}, 2);
  auto w = random_tensor({7, 2, 3, 3}, 3);
  auto y = conv2d(x, w, {}, 2, 1);
  EXPECT_EQ(y.shape(), (Shape{1, 7, 3, 3}));
}

TEST(Conv2d, MismatchNamesBothShapes) {
  auto x = random_tensor({1, 3, 5, 5}, 2);
  auto w = random_tensor({8, 4, 3, 3}, 3);
  try {
    conv2d(x, w);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[1, 3, 5, 5]"), std::string::npos);
    EXPECT_NE(msg.find("[8, 4, 3, 3]"), std::string::npos);
  }
}

TEST(Conv2d, MatchesDirectLoop) {
  auto x = random_tensor({2, 3, 6, 5}, 4);
  auto w = random_tensor({4, 3, 3, 3}, 5);
  auto b = random_tensor({4}, 6);
  auto y = conv2d(x, w, b, 2, 1);
  const std::size_t oh = y.dim(2), ow = y.dim(3);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t co = 0; co < 4; ++co)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          double acc = b.data()[co];
          for (std::size_t ci = 0; ci < 3; ++ci)
            for (int ki = 0; ki < 3; ++ki)
              for (int kj = 0; kj < 3; ++kj) {
                const int iy = static_cast<int>(oy * 2) + ki - 1;
                const int ix = static_cast<int>(ox * 2) + kj - 1;
                if (iy < 0 || iy >= 6 || ix < 0 || ix >= 5) continue;
                acc += x.at(n, ci, iy, ix) * w.at(co, ci, ki, kj);
              }
          EXPECT_NEAR(y.at(n, co, oy, ox), acc, 1e-5);
        }
}

TEST(Conv2d, Linearity) {
  auto x = random_tensor({1, 4, 8, 8}, 7);
  auto w = random_tensor({3, 4, 3, 3}, 8);
  const float a = 0.5f;  // power of two: scaling is exact in f32
  auto lhs = conv2d(scale(x, a), w, {}, 1, 1);
  auto rhs = scale(conv2d(x, w, {}, 1, 1), a);
  expect_values(lhs, rhs.to_vector(), 1e-6f);
  const float a2 = 0.3f;
  auto lhs2 = conv2d(scale(x, a2), w, {}, 1, 1);
  auto rhs2 = scale(conv2d(x, w, {}, 1, 1), a2);
  expect_values(lhs2, rhs2.to_vector(), 1e-6f);
}

TEST(DepthwiseSeparable, ComposedIdentities) {
  auto x = random_tensor({1, 3, 4, 4}, 9);
  std::vector<float> dw(3 * 9, 0.0f);
  for (int c = 0; c < 3; ++c) dw[c * 9 + 4] = 1.0f;
  std::vector<float> pw(9, 0.0f);
  for (int c = 0; c < 3; ++c) pw[c * 3 + c] = 1.0f;
  auto y = depthwise_separable_conv(x, Tensor({3, 1, 3, 3}, dw), Tensor({3, 3, 1, 1}, pw));
  expect_values(y, x.to_vector());
}

TEST(DepthwiseSeparable, ChannelSumAfterDepthwise) {
  // 1x2x2x2 input, 3x3 dw filters scaling by 2 (ch0) and -1 (ch1), pw = [[1, 1]].
  Tensor x({1, 2, 2, 2}, {1, 2, 3, 4, 10, 20, 30, 40});
  std::vector<float> dw(18, 0.0f);
  dw[4] = 2.0f;
  dw[9 + 4] = -1.0f;
  auto y = depthwise_separable_conv(x, Tensor({2, 1, 3, 3}, dw), Tensor({1, 2, 1, 1}, {1, 1}));
  EXPECT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  expect_values(y, {2 - 10, 4 - 20, 6 - 30, 8 - 40});
}

TEST(DepthwiseSeparable, ParameterCount) {
  const std::size_t C = 8, k = 3, Cout = 8;
  EXPECT_EQ(numel({C, 1, k, k}) + numel({Cout, C, 1, 1}), 136u);
}

TEST(DepthwiseSeparable, ChannelMismatch) {
  auto x = random_tensor({1, 3, 4, 4}, 1);
  EXPECT_THROW(depthwise_separable_conv(x, random_tensor({2, 1, 3, 3}, 2),
                                        random_tensor({2, 2, 1, 1}, 3)),
               ShapeError);
}

TEST(Normalize, ConstantInputGivesZeros) {
  auto x = Tensor::full({2, 3, 2, 2}, 4.0f);
  auto one = Tensor::full({3}, 1.0f), zero = Tensor::zeros({3});
  expect_values(normalize(x, NormMode::layer, one, zero), std::vector<float>(24, 0.0f));
  expect_values(normalize(x, NormMode::batch, one, zero), std::vector<float>(24, 0.0f));
}

TEST(Normalize, TwoValueAxis) {
  Tensor x({1, 2, 1, 1}, {1.0f, 3.0f});
  auto y = normalize(x, NormMode::layer, Tensor::full({2}, 1.0f), Tensor::zeros({2}), 1e-12f);
  expect_values(y, {-1.0f, 1.0f}, 1e-6f);
}

TEST(Normalize, ZeroScaleCollapsesToBias) {
  auto x = random_tensor({2, 2, 3, 3}, 11);
  Tensor bias({2}, {0.25f, -2.0f});
  for (auto mode : {NormMode::layer, NormMode::batch}) {
    auto y = normalize(x, mode, Tensor::zeros({2}), bias);
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t i = 0; i < 3; ++i)
          for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(y.at(b, c, i, j), bias.data()[c]);
  }
}

TEST(Normalize, MomentsOverNormalizedAxes) {
  auto x = random_tensor({3, 5, 4, 4}, 12, -3.0f, 5.0f);
  auto one = Tensor::full({5}, 1.0f), zero = Tensor::zeros({5});
  auto layer = normalize(x, NormMode::layer, one, zero);
  for (std::size_t b = 0; b < 3; ++b)
    for (std::size_t p = 0; p < 16; ++p) {
      double m = 0, v = 0;
      for (std::size_t c = 0; c < 5; ++c) m += layer.at(b, c, p / 4, p % 4);
      m /= 5;
      for (std::size_t c = 0; c < 5; ++c) v += std::pow(layer.at(b, c, p / 4, p % 4) - m, 2);
      v /= 5;
      EXPECT_LT(std::abs(m), 1e-5);
      EXPECT_LT(std::abs(v - 1.0), 1e-3);
    }
  auto batch = normalize(x, NormMode::batch, one, zero);
  for (std::size_t c = 0; c < 5; ++c) {
    double m = 0, v = 0;
    for (std::size_t b = 0; b < 3; ++b)
      for (std::size_t p = 0; p < 16; ++p) m += batch.at(b, c, p / 4, p % 4);
    m /= 48;
    for (std::size_t b = 0; b < 3; ++b)
      for (std::size_t p = 0; p < 16; ++p) v += std::pow(batch.at(b, c, p / 4, p % 4) - m, 2);
    v /= 48;
    EXPECT_LT(std::abs(m), 1e-5);
    EXPECT_LT(std::abs(v - 1.0), 1e-3);
  }
}

TEST(Activation, Examples) {
  Tensor x({3}, {-1.0f, 0.0f, 2.0f});
  expect_values(activation(x, Activation::relu), {0.0f, 0.0f, 2.0f});
  EXPECT_FLOAT_EQ(activation(Tensor::scalar(0.0f), Activation::sigmoid).item(), 0.5f);
  expect_values(activation(Tensor({1, 2}, {1.7f, 1.7f}), Activation::softmax, 1), {0.5f, 0.5f});
}

TEST(Activation, SoftmaxSumsToOneAlongAxis) {
  auto x = random_tensor({2, 5, 3, 4}, 13, -4.0f, 4.0f);
  for (std::size_t axis = 0; axis < 4; ++axis) {
    auto y = softmax(x, axis);
    const auto& s = y.shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < 4; ++i) inner *= s[i];
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < inner; ++i) {
        double total = 0;
        for (std::size_t k = 0; k < s[axis]; ++k) total += y.data()[(o * s[axis] + k) * inner + i];
        EXPECT_NEAR(total, 1.0, 1e-6);
      }
  }
}

TEST(Pool, Examples) {
  auto c = Tensor::full({2, 3, 4, 4}, 1.25f);
  expect_values(pool(c, PoolKind::global_avg), std::vector<float>(6, 1.25f));
  expect_values(pool(c, PoolKind::channel_avg), std::vector<float>(32, 1.25f));
  Tensor px({1, 2, 1, 1}, {1.0f, 5.0f});
  EXPECT_FLOAT_EQ(pool(px, PoolKind::channel_max).item(), 5.0f);
  EXPECT_FLOAT_EQ(pool(px, PoolKind::channel_avg).item(), 3.0f);
  EXPECT_EQ(pool(c, PoolKind::global_avg).shape(), (Shape{2, 3}));
  EXPECT_EQ(pool(c, PoolKind::channel_max).shape(), (Shape{2, 1, 4, 4}));
}

TEST(BilinearSample, IdentityCoordinates) {
  auto x = random_tensor({2, 3, 4, 5}, 14);
  std::vector<float> coords(2 * 2 * 20);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t p = 0; p < 20; ++p) {
      coords[(b * 2 + 0) * 20 + p] = static_cast<float>(p / 5);
      coords[(b * 2 + 1) * 20 + p] = static_cast<float>(p % 5);
    }
  expect_values(bilinear_sample(x, Tensor({2, 2, 4, 5}, coords)), x.to_vector());
}

TEST(BilinearSample, MidpointAndOutOfBounds) {
  Tensor x({1, 1, 1, 2}, {2.0f, 4.0f});
  auto mid = bilinear_sample(x, Tensor({1, 2, 1, 2}, {0.0f, 0.0f, 0.5f, 0.5f}));
  expect_values(mid, {3.0f, 3.0f});
  auto far = bilinear_sample(x, Tensor({1, 2, 1, 2}, {-5.0f, -5.0f, -5.0f, -5.0f}));
  expect_values(far, {0.0f, 0.0f});
}

TEST(BilinearSample, RelativeMatchesAbsolute) {
  auto x = random_tensor({2, 3, 4, 5}, 14);
  const auto off = mdrwkv::testing::uniform_values(2 * 2 * 20, 15, -1.5f, 1.5f);
  std::vector<float> abs(off);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t p = 0; p < 20; ++p) {
      abs[(b * 2 + 0) * 20 + p] += static_cast<float>(p / 5);
      abs[(b * 2 + 1) * 20 + p] += static_cast<float>(p % 5);
    }
  const auto rel = bilinear_sample(x, Tensor({2, 2, 4, 5}, off), true).to_vector();
  const auto ref = bilinear_sample(x, Tensor({2, 2, 4, 5}, abs)).to_vector();
  for (std::size_t i = 0; i < rel.size(); ++i) EXPECT_NEAR(rel[i], ref[i], 1e-5) << i;
  expect_values(bilinear_sample(x, Tensor::zeros({2, 2, 4, 5}), true), x.to_vector());
}

TEST(Concat, ChannelsStack) {
  auto a = random_tensor({1, 2, 3, 3}, 15);
  auto b = random_tensor({1, 3, 3, 3}, 16);
  auto y = concat_channels(a, b);
  EXPECT_EQ(y.dim(1), 5u);
  EXPECT_EQ(y.at(0, 0, 1, 1), a.at(0, 0, 1, 1));
  EXPECT_EQ(y.at(0, 4, 2, 0), b.at(0, 2, 2, 0));
  auto empty = Tensor::zeros({1, 0, 3, 3});
  expect_values(concat_channels(a, empty), a.to_vector());
  EXPECT_THROW(concat_channels(a, random_tensor({1, 2, 4, 3}, 1)), ShapeError);
}

// ---------------------------------------------------------------------------
// Finite-difference checks for every differentiable primitive.

TEST(GradCheck, Conv2dStridedWithBias) {
  auto x = random_tensor({1, 4, 8, 8}, 20, -1, 1, true);
  auto w = random_tensor({3, 4, 3, 3}, 21, -1, 1, true);
  auto b = random_tensor({3}, 22, -1, 1, true);
  auto r = check_gradients([&] { return conv2d(x, w, b, 2, 1); }, {{"x", x}, {"w", w}, {"b", b}});
  EXPECT_LT(r.max_rel_error(), kGradTol);
}

TEST(GradCheck, DepthwiseSeparable) {
  auto x = random_tensor({1, 4, 8, 8}, 23, -1, 1, true);
  auto dw = random_tensor({4, 1, 3, 3}, 24, -1, 1, true);
  auto pw = random_tensor({4, 4, 1, 1}, 25, -1, 1, true);
  auto r = check_gradients([&] { return depthwise_separable_conv(x, dw, pw); },
                           {{"x", x}, {"dw", dw}, {"pw", pw}});
  EXPECT_LT(r.max_rel_error(), kGradTol);
}

TEST(GradCheck, DepthwiseWithBiasLargeKernel) {
  auto x = random_tensor({1, 3, 6, 7}, 26, -1, 1, true);
  auto w = random_tensor({3, 1, 5, 5}, 27, -1, 1, true);
  auto b = random_tensor({3}, 28, -1, 1, true);
  auto r = check_gradients([&] { return depthwise_conv2d(x, w, b, 2); },
                           {{"x", x}, {"w", w}, {"b", b}});
  EXPECT_LT(r.max_rel_error(), kGradTol);
}

TEST(GradCheck, NormalizeBothModes) {
  for (auto mode : {NormMode::layer, NormMode::batch}) {
    auto x = random_tensor({2, 4, 4, 4}, 29, -1, 1, true);
    auto s = random_tensor({4}, 30, 0.5f, 1.5f, true);
    auto b = random_tensor({4}, 31, -1, 1, true);
    auto r = check_gradients([&] { return normalize(x, mode, s, b); },
                             {{"x", x}, {"scale", s}, {"bias", b}});
    EXPECT_LT(r.max_rel_error(), kGradTol);
  }
}

TEST(GradCheck, ActivationsAndElementwise) {
  auto x = random_tensor({1, 4, 8, 8}, 32, -1, 1, true);
  auto y = random_tensor({1, 1, 8, 8}, 33, -1, 1, true);
  auto r = check_gradients(
      [&] {
        auto s = sigmoid(x);
        auto sm = softmax(x, 1);
        auto sp = softplus(y);
        return add(mul(s, sp), sub(sm, one_minus(mul(x, y))));
      },
      {{"x", x}, {"y", y}});
  EXPECT_LT(r.max_rel_error(), kGradTol);
}

TEST(GradCheck, Pools) {
  auto x = random_tensor({1, 4, 8, 8}, 34, -1, 1, true);
  auto r = check_gradients(
      [&] {
        auto a = pool(x, PoolKind::channel_avg);
        auto m = pool(x, PoolKind::channel_max);
        auto g = reshape(pool(x, PoolKind::global_avg), {1, 4, 1, 1});
        return mul(add(a, m), g);
      },
      {{"x", x}});
  EXPECT_LT(r.max_rel_error(), kGradTol);
}

TEST(GradCheck, BilinearSampleInputAndCoords) {
  auto x = random_tensor({1, 3, 6, 6}, 35, -1, 1, true);
  // Positions kept away from integer lattice lines so the +-h probe does not
  // straddle a kink of the piecewise-bilinear surface.
  std::vector<float> c(2 * 36);
  auto jitter = mdrwkv::testing::uniform_values(c.size(), 36, 0.1f, 0.9f);
  for (std::size_t p = 0; p < 36; ++p) {
    c[p] = static_cast<float>(p / 6) - 1.0f + jitter[p];
    c[36 + p] = static_cast<float>(p % 6) - 1.0f + jitter[36 + p];
  }
  auto coords = Tensor({1, 2, 6, 6}, c, true);
  auto r = check_gradients([&] { return bilinear_sample(x, coords); },
                           {{"x", x}, {"coords", coords}});
  EXPECT_LT(r.max_rel_error(), kGradTol);
}

TEST(GradCheck, LayoutOps) {
  auto a = random_tensor({1, 2, 4, 4}, 37, -1, 1, true);
  auto b = random_tensor({1, 3, 4, 4}, 38, -1, 1, true);
  auto r = check_gradients(
      [&] {
        auto cat = concat_channels(a, b);
        auto part = slice_channels(cat, 1, 3);
        return flip(flip(upsample_nearest2x(part), 3), 2);
      },
      {{"a", a}, {"b", b}});
  EXPECT_LT(r.max_rel_error(), kGradTol);
}
