#include <gtest/gtest.h>

#include <cmath>

#include "ffecg/backbone.hpp"
#include "ffecg/data.hpp"
#include "support.hpp"

using namespace ffecg;
using testing_support::random_tensor;

namespace {

// Narrow layout with the same stage structure; keeps the 128-channel
// stride-4 tap.
FFEConfig small_config(int resolution = 32) {
  FFEConfig fc;
  fc.input_resolution = resolution;
  fc.stem_channels = 16;
  fc.bottlenecks = {{2, 16, 1, 2}, {2, 128, 1, 1}, {2, 32, 1, 2}, {2, 32, 1, 2}};
  fc.head_channels = 32;
  fc.embedding_dim = 128;
  return fc;
}

double row_norm(const Tensor<float>& e, int i) {
  double s = 0;
  for (int j = 0; j < e.shape()[1]; ++j) s += double(e[static_cast<std::size_t>(i) * e.shape()[1] + j]) *
                                           e[static_cast<std::size_t>(i) * e.shape()[1] + j];
  return std::sqrt(s);
}

}  // namespace

TEST(FfeSpatial, OutputIsStride4With128Channels) {
  Rng rng(1);
  FFEConfig fc;
  auto ps = init_ffe<float>(fc, rng);
  NoGradGuard g;
  EXPECT_EQ(ffe_forward_spatial(Var<float>(random_tensor<float>(Shape{2, 3, 256, 256}, rng)), fc, ps).shape(),
            (Shape{2, 128, 64, 64}));
  for (int side : {64, 128})
    EXPECT_EQ(ffe_forward_spatial(Var<float>(random_tensor<float>(Shape{1, 3, side, side}, rng)), fc, ps).shape(),
              (Shape{1, 128, side / 4, side / 4}));
}

TEST(FfeSpatial, BadShapesRaise) {
  Rng rng(1);
  FFEConfig fc = small_config();
  auto ps = init_ffe<float>(fc, rng);
  NoGradGuard g;
  EXPECT_THROW(ffe_forward_spatial(Var<float>(Tensor<float>(Shape{1, 3, 63, 63})), fc, ps), ShapeError);
  EXPECT_THROW(ffe_forward_spatial(Var<float>(Tensor<float>(Shape{1, 1, 64, 64})), fc, ps), ShapeError);
  EXPECT_THROW(ffe_forward_spatial(Var<float>(Tensor<float>(Shape{3, 64, 64})), fc, ps), ShapeError);
  try {
    ffe_forward_spatial(Var<float>(Tensor<float>(Shape{1, 3, 64, 63})), fc, ps);
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("width"), std::string::npos) << e.what();
  }
}

TEST(FfeEmbedding, DefaultLayoutGives128UnitRows) {
  Rng rng(2);
  FFEConfig fc;
  auto ps = init_ffe<float>(fc, rng);
  const auto e = embed_images(random_tensor<float>(Shape{4, 3, 112, 112}, rng), fc, ps);
  ASSERT_EQ(e.shape(), (Shape{4, 128}));
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(row_norm(e, i), 1.0, 1e-5);
}

TEST(FfeEmbedding, UnitNormOverManyRandomInputs) {
  Rng rng(3);
  const FFEConfig fc = small_config(16);
  auto ps = init_ffe<float>(fc, rng);
  const auto e = embed_images(random_tensor<float>(Shape{1000, 3, 16, 16}, rng), fc, ps, 100);
  for (int i = 0; i < 1000; ++i) ASSERT_NEAR(row_norm(e, i), 1.0, 1e-5) << "row " << i;
}

TEST(FfeEmbedding, DuplicatedInputsGiveIdenticalRows) {
  Rng rng(4);
  const FFEConfig fc = small_config();
  auto ps = init_ffe<float>(fc, rng);
  const auto one = random_tensor<float>(Shape{1, 3, 32, 32}, rng);
  const std::vector<Tensor<float>> pair{one, one};
  const auto e = embed_images(concat_batch<float>(pair), fc, ps);
  double dot = 0;
  for (int j = 0; j < 128; ++j) dot += double(e[static_cast<std::size_t>(j)]) * e[static_cast<std::size_t>(128 + j)];
  EXPECT_NEAR(dot, 1.0, 1e-6);
}

TEST(FfeEmbedding, ZeroParametersAreDegenerate) {
  Rng rng(5);
  const FFEConfig fc = small_config();
  auto ps = init_ffe<float>(fc, rng);
  for (auto& e : ps.entries())
    for (auto& v : e.var.mutable_value().vec()) v = 0.0f;
  EXPECT_THROW(embed_images(random_tensor<float>(Shape{2, 3, 32, 32}, rng), fc, ps), DegenerateEmbeddingError);
}

TEST(FfeEmbedding, WrongResolutionRaises) {
  Rng rng(5);
  const FFEConfig fc = small_config();
  auto ps = init_ffe<float>(fc, rng);
  NoGradGuard g;
  EXPECT_THROW(ffe_forward_embedding(Var<float>(Tensor<float>(Shape{1, 3, 64, 64})), fc, ps), ShapeError);
}

// The head reduces space with a learned per-position kernel; with all-ones
// weights it must equal s^2 times the spatial mean.
TEST(GlobalDepthwise, AllOnesKernelIsScaledMean) {
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const int c = 1 + static_cast<int>(rng.below(6)), s = 1 + static_cast<int>(rng.below(8));
    const auto x = random_tensor<double>(Shape{2, c, s, s}, rng);
    const auto y = ops::depthwise_conv2d(Var<double>(x), Var<double>(Tensor<double>(Shape{c, 1, s, s}, 1.0)),
                                         static_cast<const Var<double>*>(nullptr), 1, 0)
                       .value();
    ASSERT_EQ(y.shape(), (Shape{2, c, 1, 1}));
    for (int n = 0; n < 2; ++n)
      for (int ch = 0; ch < c; ++ch) {
        double mean = 0;
        for (int i = 0; i < s; ++i)
          for (int j = 0; j < s; ++j) mean += x.at(n, ch, i, j);
        mean /= s * s;
        EXPECT_NEAR(y.at(n, ch, 0, 0), s * s * mean, 1e-5);
      }
  }
}

TEST(FfeConfig, ValidationRejectsBadLayouts) {
  FFEConfig fc;
  EXPECT_NO_THROW(fc.validate());
  fc.bottlenecks[1].out_channels = 64;
  EXPECT_THROW(fc.validate(), ConfigError);
  fc = FFEConfig{};
  fc.spatial_tap_stage = 2;
  EXPECT_THROW(fc.validate(), ConfigError);
  fc = FFEConfig{};
  fc.input_resolution = 100;
  EXPECT_THROW(fc.validate(), ConfigError);
}

TEST(Pretrain, BeatsChanceAndIsDeterministic) {
  const FFEConfig fc = small_config(32);
  const auto ds = render_labeled_set(8, 16, 32, 77);
  PretrainOptions opt;
  opt.batch_size = 16;
  const auto a = pretrain_ffe(ds, fc, 20, 3, opt);
  EXPECT_GT(a.train_accuracy, 1.0 / 8.0);
  const auto b = pretrain_ffe(ds, fc, 20, 3, opt);
  EXPECT_NEAR(a.final_loss, b.final_loss, 1e-6);
  ASSERT_EQ(a.params.entries().size(), b.params.entries().size());
  for (std::size_t i = 0; i < a.params.entries().size(); ++i)
    EXPECT_EQ(a.params.entries()[i].var.value().vec(), b.params.entries()[i].var.value().vec());
}

TEST(Pretrain, SingleIdentityIsProtocolError) {
  const FFEConfig fc = small_config(32);
  LabeledFaceSet ds = render_labeled_set(1, 4, 32, 1);
  EXPECT_THROW(pretrain_ffe(ds, fc, 1, 0), ProtocolError);
  ds = render_labeled_set(2, 1, 32, 1);
  EXPECT_THROW(pretrain_ffe(ds, fc, 1, 0), ProtocolError);
}
