#include <cmath>
#include <filesystem>

#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "latentvision/classifier.hpp"

using namespace lvc;

namespace {

Tensor random_latents(int b, int c, Rng& rng, double scale = 1.0) {
  Tensor t({b, c, 28, 28});
  for (int64_t i = 0; i < t.size(); ++i) t[i] = rng.normal() * scale;
  return t;
}

Tensor random_sigmas(int b, int c, Rng& rng) {
  Tensor t({b, c, 28, 28});
  for (int64_t i = 0; i < t.size(); ++i) t[i] = 0.11 + rng.uniform() * 2.0;
  return t;
}

ClassifierConfig tiny_config(int num_classes, int latent_channels) {
  ClassifierConfig cfg;
  cfg.num_classes = num_classes;
  cfg.latent_channels = latent_channels;
  return cfg.scaled(8);
}

}  // namespace

TEST(Classifier, HeadWidthMatchesClassCount) {
  Rng rng(1);
  for (int classes : {23, 7, 45}) {
    CResNet model(tiny_config(classes, 192), 3);
    Var logits = model.forward(constant(random_latents(2, 192, rng)),
                               constant(random_sigmas(2, 192, rng)), false);
    EXPECT_EQ(logits->value.shape(), (std::vector<int>{2, classes}));
    EXPECT_TRUE(logits->value.all_finite());
  }
}

TEST(Classifier, FullWidthTrunkIsTable2) {
  ClassifierConfig cfg;
  ASSERT_EQ(cfg.trunk.size(), 3u);
  EXPECT_EQ(cfg.stem_width, 32);
  EXPECT_EQ(cfg.stem_out, 128);
  EXPECT_EQ(cfg.trunk[0].c1, 128);
  EXPECT_EQ(cfg.trunk[0].c3, 512);
  EXPECT_EQ(cfg.trunk[0].repeat, 4);
  EXPECT_EQ(cfg.trunk[1].c1, 256);
  EXPECT_EQ(cfg.trunk[1].c3, 1024);
  EXPECT_EQ(cfg.trunk[1].repeat, 6);
  EXPECT_EQ(cfg.trunk[2].c1, 512);
  EXPECT_EQ(cfg.trunk[2].c3, 2048);
  EXPECT_EQ(cfg.trunk[2].repeat, 3);
  for (const auto& s : cfg.trunk) EXPECT_EQ(s.stride, 2);
  // Dual stems concatenate to 128 + 128 = 256 channels for either codec
  // width; the stem output does not depend on latent_channels.
  EXPECT_EQ(2 * cfg.stem_out, 256);
}

TEST(Classifier, BothLatentWidthsBuild) {
  Rng rng(2);
  for (int c : {192, 320}) {
    CResNet model(tiny_config(4, c), 5);
    Var logits = model.forward(constant(random_latents(1, c, rng)),
                               constant(random_sigmas(1, c, rng)), false);
    EXPECT_EQ(logits->value.dim(1), 4);
  }
  ClassifierConfig bad;
  bad.latent_channels = 100;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Classifier, SoftmaxRowsSumToOne) {
  Rng rng(3);
  CResNet model(tiny_config(23, 192), 7);
  Var logits = model.forward(constant(random_latents(3, 192, rng)),
                             constant(random_sigmas(3, 192, rng)), false);
  Tensor probs = softmax(logits->value);
  for (int b = 0; b < 3; ++b) {
    double sum = 0;
    for (int k = 0; k < 23; ++k)
      sum += probs[static_cast<int64_t>(b) * 23 + k];
    EXPECT_NEAR(sum, 1.0, 1e-5);
  }
  // Argmax is invariant under softmax.
  for (int b = 0; b < 3; ++b) {
    int arg_l = 0, arg_p = 0;
    for (int k = 1; k < 23; ++k) {
      if (logits->value[static_cast<int64_t>(b) * 23 + k] >
          logits->value[static_cast<int64_t>(b) * 23 + arg_l])
        arg_l = k;
      if (probs[static_cast<int64_t>(b) * 23 + k] >
          probs[static_cast<int64_t>(b) * 23 + arg_p])
        arg_p = k;
    }
    EXPECT_EQ(arg_l, arg_p);
  }
}

TEST(Classifier, RejectsWrongSpatialDims) {
  Rng rng(4);
  CResNet model(tiny_config(4, 192), 9);
  Tensor bad({1, 192, 32, 32});
  EXPECT_THROW(model.forward(constant(bad), constant(bad), false),
               std::invalid_argument);
  Tensor bad_c({1, 64, 28, 28});
  EXPECT_THROW(model.forward(constant(bad_c), constant(bad_c), false),
               ConfigError);
}

TEST(Classifier, SpatialTraceThroughTrunk) {
  // 28 -> 14 -> 7 -> 4 under the stride-2 schedule; verified through the
  // conv geometry used by the blocks.
  auto down = [](int s) { return (s - 1) / 2 + 1; };  // k3 s2 p1
  int s = 28;
  std::vector<int> trace = {s};
  for (int i = 0; i < 3; ++i) {
    s = down(s);
    trace.push_back(s);
  }
  EXPECT_EQ(trace, (std::vector<int>{28, 14, 7, 4}));
}

TEST(Classifier, TopKAccuracyBasics) {
  // One-hot logits at the labels -> 100 at k=1.
  Tensor logits({3, 5});
  std::vector<int> labels = {0, 3, 4};
  for (int i = 0; i < 3; ++i)
    logits[static_cast<int64_t>(i) * 5 + labels[static_cast<size_t>(i)]] = 1.0;
  EXPECT_EQ(top_k_accuracy(logits, labels, 1), 100.0);

  // True label ranked exactly 5th still counts at k=5.
  Tensor ranked({1, 6}, {6, 5, 4, 3, 2, 1});
  EXPECT_EQ(top_k_accuracy(ranked, {4}, 5), 100.0);
  EXPECT_EQ(top_k_accuracy(ranked, {4}, 4), 0.0);

  // k = num_classes is always 100.
  Rng rng(5);
  Tensor any({4, 7});
  for (int64_t i = 0; i < any.size(); ++i) any[i] = rng.normal();
  EXPECT_EQ(top_k_accuracy(any, {0, 6, 3, 2}, 7), 100.0);

  // Ties break toward the lower class index.
  Tensor tied({1, 3}, {1.0, 1.0, 0.0});
  EXPECT_EQ(top_k_accuracy(tied, {0}, 1), 100.0);
  EXPECT_EQ(top_k_accuracy(tied, {1}, 1), 0.0);
}

TEST(Classifier, TopKUniformMonteCarlo) {
  // Uniform random logits over 23 classes: top-1 converges to 100/23.
  Rng rng(6);
  const int n = 100000, K = 23;
  Tensor logits({n, K});
  std::vector<int> labels(n);
  for (int64_t i = 0; i < logits.size(); ++i) logits[i] = rng.uniform();
  for (auto& l : labels) l = static_cast<int>(rng.uniform_int(K));
  double acc = top_k_accuracy(logits, labels, 1);
  EXPECT_NEAR(acc, 100.0 / 23.0, 0.5);
}

TEST(Classifier, BatchPermutationEquivariance) {
  Rng rng(7);
  CResNet model(tiny_config(4, 192), 11);
  Tensor y = random_latents(3, 192, rng), s = random_sigmas(3, 192, rng);
  Var fwd = model.forward(constant(y), constant(s), false);

  // Reverse the batch and compare row-wise.
  auto reverse_batch = [](const Tensor& t) {
    Tensor out(t.shape());
    int64_t row = t.size() / t.dim(0);
    for (int b = 0; b < t.dim(0); ++b)
      std::copy_n(t.data() + b * row, row,
                  out.data() + (t.dim(0) - 1 - b) * row);
    return out;
  };
  Var rev = model.forward(constant(reverse_batch(y)),
                          constant(reverse_batch(s)), false);
  for (int b = 0; b < 3; ++b)
    for (int k = 0; k < 4; ++k)
      EXPECT_NEAR(fwd->value[static_cast<int64_t>(b) * 4 + k],
                  rev->value[static_cast<int64_t>(2 - b) * 4 + k], 1e-9);
}

TEST(Classifier, EvalForwardDeterministic) {
  Rng rng(8);
  CResNet model(tiny_config(4, 192), 13);
  Tensor y = random_latents(2, 192, rng), s = random_sigmas(2, 192, rng);
  Var a = model.forward(constant(y), constant(s), false);
  Var b = model.forward(constant(y), constant(s), false);
  for (int64_t i = 0; i < a->value.size(); ++i)
    EXPECT_EQ(a->value[i], b->value[i]);
}

TEST(Classifier, GradientCheckTinyConfig) {
  Rng rng(9);
  ClassifierConfig cfg = tiny_config(3, 192);
  cfg.trunk = {{4, 4, 8, 1, 2}};  // single tiny stage keeps this quick
  CResNet model(cfg, 15);
  Tensor y = random_latents(2, 192, rng, 0.5);
  Tensor s = random_sigmas(2, 192, rng);
  std::vector<int> labels = {0, 2};
  auto loss = [&] {
    // train=false keeps the loss a fixed function of the parameters
    // (training mode would advance batchnorm running stats every call).
    Var logits = model.forward(constant(y), constant(s), false);
    return softmax_cross_entropy(logits, labels);
  };
  ParamList params = model.parameters();
  Rng pick(10);
  int checked = 0;
  for (int i = 0; i < 10 && checked < 10; ++i) {
    const auto& p = params[static_cast<size_t>(
        pick.uniform_int(static_cast<int64_t>(params.size())))];
    if (!p.trainable) continue;
    double err = lvc::testing::gradcheck(loss, p.var, 2, 1e-4, 77 + i);
    EXPECT_LT(err, 1e-3) << p.name;
    ++checked;
  }
  EXPECT_GE(checked, 5);
}

TEST(Classifier, CheckpointRoundTrip) {
  Rng rng(11);
  CResNet model(tiny_config(5, 320), 17);
  std::string path =
      (std::filesystem::temp_directory_path() / "lvc_classifier_test.lvcw")
          .string();
  save_classifier(path, model);
  CResNet back = load_classifier(path);
  EXPECT_EQ(params_hash(back.parameters()), params_hash(model.parameters()));
  EXPECT_EQ(back.cfg.num_classes, 5);
  EXPECT_EQ(back.cfg.latent_channels, 320);
  std::filesystem::remove(path);
}
