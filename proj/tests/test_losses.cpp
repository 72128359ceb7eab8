#include <gtest/gtest.h>

#include "ffecg/losses.hpp"
#include "support.hpp"

using namespace ffecg;
using testing_support::random_tensor;

namespace {

Tensor<double> vec1(std::vector<double> v) {
  const int n = static_cast<int>(v.size());
  return Tensor<double>(Shape{1, 1, 1, n}, std::move(v));
}

// Independent scalar references.
double ref_mse_to(const std::vector<double>& v, double target) {
  double s = 0;
  for (double x : v) s += (x - target) * (x - target);
  return s / static_cast<double>(v.size());
}
double ref_mad(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

Tensor<double> filled(const Shape& s, double v) { return Tensor<double>(s, v); }

const Shape kMap{2, 1, 3, 3};
const Shape kImg{1, 3, 4, 4};

}  // namespace

TEST(LsganDiscriminator, Examples) {
  EXPECT_NEAR(lsgan_loss_discriminator(filled(kMap, 1.0), filled(kMap, 0.0)), 0.0, 1e-12);
  EXPECT_NEAR(lsgan_loss_discriminator(filled(kMap, 0.5), filled(kMap, 0.5)), 0.5, 1e-12);
  EXPECT_NEAR(lsgan_loss_discriminator(vec1({0.9, 1.1}), vec1({0.3, -0.1})), 0.06, 1e-12);
}

TEST(LsganDiscriminator, ShapeMismatchRaises) {
  EXPECT_THROW(lsgan_loss_discriminator(vec1({1, 1}), vec1({0, 0, 0})), ShapeError);
}

TEST(LsganDiscriminator, NonFiniteRaises) {
  EXPECT_THROW(lsgan_loss_discriminator(vec1({1, NAN}), vec1({0, 0})), NumericError);
  EXPECT_THROW(lsgan_loss_discriminator(vec1({1, 1}), vec1({INFINITY, 0})), NumericError);
}

TEST(LsganGenerator, Examples) {
  EXPECT_NEAR(lsgan_loss_generator(filled(kMap, 1.0)), 0.0, 1e-12);
  EXPECT_NEAR(lsgan_loss_generator(filled(kMap, 0.0)), 1.0, 1e-12);
  EXPECT_NEAR(lsgan_loss_generator(vec1({0.2, 0.6})), 0.4, 1e-12);
  EXPECT_THROW(lsgan_loss_generator(vec1({NAN})), NumericError);
}

TEST(CycleLoss, Examples) {
  Rng rng(3);
  const auto x = random_tensor(kImg, rng), y = random_tensor(kImg, rng);
  EXPECT_NEAR(cycle_loss(x, x, y, y), 0.0, 1e-12);
  Tensor<double> shifted = x;
  for (auto& v : shifted.vec()) v += 0.5;
  EXPECT_NEAR(cycle_loss(x, shifted, y, y), 0.5, 1e-12);
  // 2x2 single channel, per-pixel diffs {0.1, 0.3, 0.0, 0.2} in one direction only.
  const Tensor<double> a(Shape{1, 1, 2, 2}, {0.0, 0.0, 0.0, 0.0});
  const Tensor<double> a_rec(Shape{1, 1, 2, 2}, {0.1, -0.3, 0.0, 0.2});
  EXPECT_NEAR(cycle_loss(a, a_rec, a, a), 0.15, 1e-12);
  EXPECT_THROW(cycle_loss(x, a, y, y), ShapeError);
}

TEST(PixelConsistency, Examples) {
  Rng rng(4);
  const auto n = random_tensor(kImg, rng), v = random_tensor(kImg, rng);
  EXPECT_NEAR(pixel_consistency_loss(n, n, v, v), 0.0, 1e-12);
  Tensor<double> n_off = n, v_off = v;
  for (auto& e : n_off.vec()) e += 0.2;
  for (auto& e : v_off.vec()) e -= 0.2;
  EXPECT_NEAR(pixel_consistency_loss(n_off, n, v_off, v), 0.4, 1e-12);
  EXPECT_NEAR(pixel_consistency_loss(vec1({0.4, 0.0}), vec1({0.0, 0.0}), vec1({0.1, 0.1}), vec1({0.0, 0.0})), 0.3,
              1e-12);
}

TEST(PixelConsistency, UnpairedKeysRaise) {
  const std::vector<std::string> vis{"s000/smile_001"}, nir{"s001/smile_001"}, none{};
  EXPECT_THROW(pixel_consistency_loss(vec1({0.1}), vec1({0.0}), vec1({0.1}), vec1({0.0}), vis, nir), ProtocolError);
  EXPECT_THROW(pixel_consistency_loss(vec1({0.1}), vec1({0.0}), vec1({0.1}), vec1({0.0}), vis, none), ProtocolError);
  EXPECT_NO_THROW(pixel_consistency_loss(vec1({0.1}), vec1({0.0}), vec1({0.1}), vec1({0.0}), vis, vis));
  EXPECT_THROW(pixel_consistency_loss(vec1({0.1, 0.2}), vec1({0.0}), vec1({0.1}), vec1({0.0})), ShapeError);
}

TEST(TotalObjective, Examples) {
  EXPECT_NEAR(total_objective(0.5, 0.5, 2.0, 0.3, LossWeights{1.0, 10.0}), 6.0, 1e-12);
  EXPECT_DOUBLE_EQ(total_objective(0, 0, 0, 0, LossWeights{}), 0.0);
  // gamma = 0 gives the plain cycle-consistent objective.
  EXPECT_NEAR(total_objective(0.5, 0.5, 2.0, 0.3, LossWeights{1.0, 0.0}), 3.0, 1e-12);
}

TEST(TotalObjective, RejectsBadInput) {
  EXPECT_THROW(total_objective(NAN, 0, 0, 0, LossWeights{}), NumericError);
  EXPECT_THROW(total_objective(0, 0, 0, 0, LossWeights{-1.0, 10.0}), ConfigError);
  EXPECT_THROW(total_objective(0, 0, 0, 0, LossWeights{1.0, -10.0}), ConfigError);
}

TEST(TotalObjective, PixelTermIsHomogeneous) {
  const LossWeights w{};
  const double base = total_objective(0.3, 0.2, 0.7, 0.0, w);
  for (double c : {0.0, 1.0, 2.0})
    EXPECT_NEAR(total_objective(0.3, 0.2, 0.7, 0.25 * c, w) - base, w.gamma_pc * 0.25 * c, 1e-12);
}

// Property: each loss equals an elementwise scalar reference on random inputs.
TEST(LossProperties, MatchScalarReferences) {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const Shape s{1 + static_cast<int>(rng.below(2)), 1 + static_cast<int>(rng.below(3)), 1 + static_cast<int>(rng.below(4)),
                  1 + static_cast<int>(rng.below(4))};
    auto a = random_tensor(s, rng), b = random_tensor(s, rng), c = random_tensor(s, rng), d = random_tensor(s, rng);
    EXPECT_NEAR(lsgan_loss_discriminator(a, b), ref_mse_to(a.vec(), 1) + ref_mse_to(b.vec(), 0), 1e-12);
    EXPECT_NEAR(lsgan_loss_generator(a), ref_mse_to(a.vec(), 1), 1e-12);
    EXPECT_NEAR(cycle_loss(a, b, c, d), ref_mad(a.vec(), b.vec()) + ref_mad(c.vec(), d.vec()), 1e-12);
    EXPECT_NEAR(pixel_consistency_loss(a, b, c, d), ref_mad(a.vec(), b.vec()) + ref_mad(c.vec(), d.vec()), 1e-12);
    // Non-negativity and symmetry of the L1 terms.
    EXPECT_GE(cycle_loss(a, b, c, d), 0.0);
    EXPECT_GE(pixel_consistency_loss(a, b, c, d), 0.0);
    EXPECT_GE(lsgan_loss_discriminator(a, b), 0.0);
    EXPECT_NEAR(cycle_loss(a, b, c, d), cycle_loss(c, d, a, b), 1e-12);
    EXPECT_NEAR(pixel_consistency_loss(a, b, c, d), pixel_consistency_loss(c, d, a, b), 1e-12);
  }
}

TEST(LossProperties, PixelTermHasGradientOnSinglePixelDiscrepancy) {
  Rng rng(5);
  auto target = random_tensor(Shape{1, 3, 4, 4}, rng);
  Tensor<double> fake = target;
  fake.at(0, 1, 2, 3) += 0.25;
  Var<double> f(fake, true), t(target), fv(target), tv(target);
  Var<double> loss = losses::pixel_consistency(f, t, fv, tv);
  backward(loss);
  double g = 0;
  for (double v : f.grad().vec()) g += std::abs(v);
  EXPECT_GT(g, 0.0);
  EXPECT_NEAR(f.grad().at(0, 1, 2, 3), 1.0 / 48.0, 1e-12);
}
