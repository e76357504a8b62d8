#include <gtest/gtest.h>

#include <array>
#include <cmath>

#include "crowdfuse/errors.hpp"
#include "crowdfuse/tensor.hpp"
#include "grad_check.hpp"

namespace crowdfuse {
namespace {

using testing::max_grad_error;
using testing::random_param;
using testing::readout;

constexpr double kTol = 1e-6;

TEST(Tensor, ElementwiseGradients) {
  Rng rng(1);
  auto a = random_param({2, 3, 4}, rng);
  auto b = random_param({2, 3, 4}, rng);
  EXPECT_LT(max_grad_error([&] { return readout(nn::add(a, b)); }, {a, b}), kTol);
  EXPECT_LT(max_grad_error([&] { return readout(nn::sub(a, b)); }, {a, b}), kTol);
  EXPECT_LT(max_grad_error([&] { return readout(nn::mul(a, b)); }, {a, b}), kTol);
  EXPECT_LT(max_grad_error([&] { return readout(nn::scale(a, -2.5)); }, {a}), kTol);
  EXPECT_LT(max_grad_error([&] { return readout(nn::gelu(a)); }, {a}), kTol);
  EXPECT_LT(max_grad_error([&] { return readout(nn::sigmoid(a)); }, {a}), kTol);
  EXPECT_LT(max_grad_error([&] { return readout(nn::relu(a)); }, {a}), kTol);
}

TEST(Tensor, StructuralGradients) {
  Rng rng(2);
  auto a = random_param({2, 3, 4, 2}, rng);
  auto b = random_param({2, 3, 4, 3}, rng);
  std::array<nn::Var, 2> parts{a, b};
  EXPECT_LT(max_grad_error([&] { return readout(nn::concat_last(parts)); }, {a, b}), kTol);
  EXPECT_LT(max_grad_error([&] { return readout(nn::slice_last(b, 1, 3)); }, {b}), kTol);
  auto batched = [&] {
    std::array<nn::Var, 2> batch{a, nn::scale(a, 2.0)};
    return readout(nn::concat_batch(batch));
  };
  EXPECT_LT(max_grad_error(batched, {a}), kTol);
  EXPECT_LT(max_grad_error([&] { return readout(nn::select_batch(a, 1)); }, {a}), kTol);
  EXPECT_LT(max_grad_error([&] { return readout(nn::reflect_pad(a, 2, 3)); }, {a}), kTol);
  EXPECT_LT(max_grad_error([&] { return readout(nn::crop(a, 2, 3)); }, {a}), kTol);
  EXPECT_LT(max_grad_error([&] { return readout(nn::resize_bilinear(a, 7, 5)); }, {a}), kTol);
  EXPECT_LT(max_grad_error([&] { return readout(nn::reshape(a, {6, 8})); }, {a}), kTol);
}

TEST(Tensor, LayerGradients) {
  Rng rng(3);
  auto x = random_param({2, 6, 5, 3}, rng);
  auto w = random_param({3, 3, 3, 4}, rng, 0.3);
  auto bias = random_param({4}, rng);
  EXPECT_LT(max_grad_error([&] { return readout(nn::conv2d(x, w, bias, {2, 1, 1})); }, {x, w, bias}), kTol);
  EXPECT_LT(max_grad_error([&] { return readout(nn::conv2d(x, w, bias, {1, 2, 2})); }, {x, w, bias}), kTol);

  auto dw = random_param({3, 3, 3}, rng, 0.3);
  auto db = random_param({3}, rng);
  EXPECT_LT(max_grad_error([&] { return readout(nn::depthwise_conv2d(x, dw, db, {1, 1, 1})); }, {x, dw, db}),
            kTol);

  auto lw = random_param({3, 7}, rng, 0.5);
  auto lb = random_param({7}, rng);
  EXPECT_LT(max_grad_error([&] { return readout(nn::linear(x, lw, lb)); }, {x, lw, lb}), kTol);

  auto gamma = random_param({3}, rng);
  auto beta = random_param({3}, rng);
  EXPECT_LT(max_grad_error([&] { return readout(nn::layer_norm(x, gamma, beta, 1e-6)); }, {x, gamma, beta}),
            1e-5);
}

TEST(Tensor, AttentionGradients) {
  Rng rng(4);
  auto q = random_param({2, 5, 6}, rng);
  auto k = random_param({2, 3, 6}, rng);
  auto v = random_param({2, 3, 6}, rng);
  EXPECT_LT(max_grad_error([&] { return readout(nn::attention(q, k, v, 2)); }, {q, k, v}), 1e-5);
}

TEST(Tensor, AttentionRowsAreConvexCombinations) {
  // With identical keys every query attends uniformly, so output = mean of values.
  auto q = nn::constant({1, 2, 2}, {1, 2, 3, 4});
  auto k = nn::constant({1, 3, 2}, {1, 1, 1, 1, 1, 1});
  auto v = nn::constant({1, 3, 2}, {0, 3, 6, 9, 3, 0});
  auto out = nn::attention(q, k, v, 1);
  EXPECT_NEAR(out.value()[0], 3.0, 1e-12);
  EXPECT_NEAR(out.value()[1], 4.0, 1e-12);
}

TEST(Tensor, ConvMatchesDirectSum) {
  Rng rng(8);
  auto x = testing::random_const({1, 5, 5, 2}, rng);
  auto w = testing::random_const({3, 3, 2, 1}, rng);
  auto b = nn::constant({1}, {0.25});
  auto y = nn::conv2d(x, w, b, {1, 2, 2});
  ASSERT_EQ(y.shape(), (nn::Shape{1, 5, 5, 1}));
  // Output (2, 2) with dilation 2 taps rows/cols {0, 2, 4}.
  double expected = 0.25;
  for (int ky = 0; ky < 3; ++ky)
    for (int kx = 0; kx < 3; ++kx)
      for (int c = 0; c < 2; ++c)
        expected += x.value()[((ky * 2) * 5 + kx * 2) * 2 + c] * w.value()[(ky * 3 + kx) * 2 + c];
  EXPECT_NEAR(y.value()[2 * 5 + 2], expected, 1e-12);
}

TEST(Tensor, BilinearUpsampleOfConstantIsConstant) {
  auto x = nn::full({1, 3, 4, 2}, 1.5);
  auto y = nn::resize_bilinear(x, 9, 8);
  for (double v : y.value()) EXPECT_DOUBLE_EQ(v, 1.5);
}

TEST(Tensor, ReflectPadMirrorsWithoutEdgeRepeat) {
  auto x = nn::constant({1, 1, 3, 1}, {1, 2, 3});
  auto y = nn::reflect_pad(x, 0, 2);
  ASSERT_EQ(y.dim(2), 5);
  EXPECT_EQ(std::vector<double>(y.value().begin(), y.value().end()), (std::vector<double>{1, 2, 3, 2, 1}));
}

TEST(Tensor, ShapeErrors) {
  EXPECT_THROW(nn::add(nn::zeros({2}), nn::zeros({3})), ShapeError);
  EXPECT_THROW(nn::conv2d(nn::zeros({1, 4, 4, 3}), nn::zeros({3, 3, 2, 1}), nn::zeros({1}), {}), ShapeError);
  EXPECT_THROW(nn::attention(nn::zeros({1, 2, 3}), nn::zeros({1, 2, 3}), nn::zeros({1, 2, 3}), 2), ShapeError);
}

TEST(Tensor, NoGradGuardSkipsGraph) {
  auto a = nn::parameter({2}, {1, 2});
  nn::Var b;
  {
    nn::NoGradGuard guard;
    b = nn::scale(a, 3.0);
  }
  EXPECT_FALSE(b.requires_grad());
  EXPECT_TRUE(nn::grad_enabled());
}

}  // namespace
}  // namespace crowdfuse
