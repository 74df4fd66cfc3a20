#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "latentvision/autodiff.hpp"
#include "latentvision/nn.hpp"
#include "latentvision/random.hpp"

using namespace lvc;
using lvc::testing::gradcheck;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, scale);
  return t;
}

TEST(Autodiff, ElementwiseGradients) {
  Rng rng(1);
  Var x = parameter(random_tensor({2, 3, 4, 4}, rng));
  // Keep values away from kinks of abs/clamp.
  for (int64_t i = 0; i < x->value.size(); ++i)
    if (std::fabs(x->value[i]) < 0.15) x->value[i] += 0.3;

  auto check = [&](const std::function<Var(const Var&)>& f) {
    double err = gradcheck([&] { return sum(f(x)); }, x, 12);
    EXPECT_LT(err, 1e-6);
  };
  check([](const Var& v) { return mul(v, v); });
  check([](const Var& v) { return square(v); });
  check([](const Var& v) { return abs_op(v); });
  check([](const Var& v) { return exp_op(scale(v, 0.3)); });
  check([](const Var& v) { return sigmoid(v); });
  check([](const Var& v) { return softplus(v); });
  check([](const Var& v) { return normal_cdf(v); });
  check([](const Var& v) { return sqrt_op(add_scalar(square(v), 1.0)); });
  check([](const Var& v) { return rsqrt(add_scalar(square(v), 1.0)); });
  check([](const Var& v) { return divide(v, add_scalar(square(v), 2.0)); });
  check([](const Var& v) { return log_op(add_scalar(square(v), 1.0)); });
}

TEST(Autodiff, Conv2dMatchesFiniteDifferences) {
  Rng rng(2);
  Var x = parameter(random_tensor({2, 3, 8, 8}, rng));
  Var w = parameter(random_tensor({4, 3, 3, 3}, rng, 0.2));
  Var b = parameter(random_tensor({4}, rng, 0.1));
  auto loss = [&] { return mean(square(conv2d(x, w, b, 2, 1))); };
  EXPECT_LT(gradcheck(loss, w, 10), 1e-6);
  EXPECT_LT(gradcheck(loss, x, 10), 1e-6);
  EXPECT_LT(gradcheck(loss, b, 4), 1e-6);
}

TEST(Autodiff, ConvTranspose2dShapesAndGradients) {
  Rng rng(3);
  Var x = parameter(random_tensor({1, 4, 5, 5}, rng));
  Var w = parameter(random_tensor({4, 3, 5, 5}, rng, 0.1));
  Var b = parameter(random_tensor({3}, rng, 0.1));
  Var y = conv_transpose2d(x, w, b, 2, 2, 1);
  EXPECT_EQ(y->value.shape(), (std::vector<int>{1, 3, 10, 10}));
  auto loss = [&] {
    return mean(square(conv_transpose2d(x, w, b, 2, 2, 1)));
  };
  EXPECT_LT(gradcheck(loss, w, 10), 1e-6);
  EXPECT_LT(gradcheck(loss, x, 10), 1e-6);
}

TEST(Autodiff, BatchNormGradients) {
  Rng rng(4);
  Var x = parameter(random_tensor({3, 2, 4, 4}, rng));
  Var gamma = parameter(random_tensor({2}, rng, 0.5));
  Var beta = parameter(random_tensor({2}, rng, 0.5));
  Var w = constant(random_tensor({3, 2, 4, 4}, rng));
  auto loss = [&] {
    Var y = batchnorm2d_train(x, gamma, beta, 1e-5);
    return mean(square(add(mul(y, w), w)));
  };
  EXPECT_LT(gradcheck(loss, x, 10, 1e-4), 1e-5);
  EXPECT_LT(gradcheck(loss, gamma, 2), 1e-6);
  EXPECT_LT(gradcheck(loss, beta, 2), 1e-6);
}

TEST(Autodiff, StructuralOpGradients) {
  Rng rng(5);
  Var x = parameter(random_tensor({2, 3, 6, 6}, rng));
  auto check = [&](const std::function<Var(const Var&)>& f) {
    double err = gradcheck([&] { return mean(square(f(x))); }, x, 12);
    EXPECT_LT(err, 1e-6);
  };
  check([](const Var& v) { return resize2d(v, 9, 9); });
  check([](const Var& v) { return resize2d(v, 4, 4); });
  check([](const Var& v) { return crop2d(v, 1, 2, 4, 3); });
  check([](const Var& v) { return hflip(v); });
  check([](const Var& v) { return global_avg_pool(v); });
  check([](const Var& v) { return concat_channels(v, square(v)); });
}

TEST(Autodiff, DenseAndSoftmaxCrossEntropy) {
  Rng rng(6);
  Var x = parameter(random_tensor({4, 5}, rng));
  Var w = parameter(random_tensor({5, 3}, rng, 0.5));
  Var b = parameter(random_tensor({3}, rng, 0.1));
  std::vector<int> labels = {0, 2, 1, 2};
  auto loss = [&] { return softmax_cross_entropy(dense(x, w, b), labels); };
  EXPECT_LT(gradcheck(loss, w, 10), 1e-6);
  EXPECT_LT(gradcheck(loss, x, 10), 1e-6);
  EXPECT_LT(gradcheck(loss, b, 3), 1e-6);
}

TEST(Autodiff, GdnForwardAndInverseGradients) {
  Rng rng(7);
  Gdn gdn(3, false, rng);
  Gdn igdn(3, true, rng);
  Var x = parameter(random_tensor({2, 3, 4, 4}, rng, 0.8));
  auto loss_g = [&] { return mean(square(gdn(x))); };
  auto loss_i = [&] { return mean(square(igdn(x))); };
  EXPECT_LT(gradcheck(loss_g, x, 10), 1e-6);
  EXPECT_LT(gradcheck(loss_g, gdn.gamma_raw, 10), 1e-6);
  EXPECT_LT(gradcheck(loss_g, gdn.beta_raw, 3), 1e-6);
  EXPECT_LT(gradcheck(loss_i, x, 10), 1e-6);
}

TEST(Autodiff, RoundSteIsStraightThrough) {
  Var x = parameter(Tensor({4}, {0.4, -0.4, 1.5, -1.5}));
  Var y = round_ste(x);
  EXPECT_EQ(y->value[0], 0.0);
  EXPECT_EQ(y->value[1], 0.0);
  EXPECT_EQ(y->value[2], 2.0);   // half away from zero
  EXPECT_EQ(y->value[3], -2.0);
  backward(sum(mul(y, y)));
  // Identity gradient: d/dx sum(round(x)^2) treated as 2*round(x).
  EXPECT_DOUBLE_EQ(x->grad[2], 4.0);
}

TEST(Autodiff, NoGradModeBuildsNoGraph) {
  Rng rng(8);
  Var x = parameter(random_tensor({2, 2}, rng));
  NoGradGuard ng;
  Var y = mul(x, x);
  EXPECT_FALSE(y->requires_grad);
  EXPECT_TRUE(y->inputs.empty());
}

TEST(Autodiff, AdamReducesSimpleLoss) {
  Rng rng(9);
  Var w = parameter(random_tensor({10}, rng));
  Adam opt({w}, 0.1);
  double first = 0;
  for (int i = 0; i < 50; ++i) {
    Var loss = sum(square(w));
    if (i == 0) first = loss->value[0];
    opt.zero_grad();
    backward(loss);
    opt.step();
  }
  Var final_loss = sum(square(w));
  EXPECT_LT(final_loss->value[0], first * 0.01);
}

}  // namespace
