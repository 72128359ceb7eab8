#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "ffecg/evaluation.hpp"
#include "metric_oracles.hpp"
#include "support.hpp"

using namespace ffecg;
using namespace metric_oracles;
using testing_support::random_tensor;
using testing_support::scratch_dir;

namespace {

ScoreMatrix matrix(std::vector<std::vector<double>> rows, std::vector<std::string> probe_ids,
                   std::vector<std::string> gallery_ids) {
  ScoreMatrix m;
  m.probes = static_cast<int>(rows.size());
  m.gallery = static_cast<int>(rows[0].size());
  for (const auto& r : rows) m.scores.insert(m.scores.end(), r.begin(), r.end());
  m.probe_ids = std::move(probe_ids);
  m.gallery_ids = std::move(gallery_ids);
  return m;
}

// Genuine/impostor lists as a 1 x k matrix: one probe "a", gallery ids set
// so the genuine scores carry id "a".
ScoreMatrix from_lists(const std::vector<double>& genuine, const std::vector<double>& impostor) {
  ScoreMatrix m;
  m.probes = 1;
  m.probe_ids = {"a"};
  for (double g : genuine) {
    m.scores.push_back(g);
    m.gallery_ids.push_back("a");
  }
  for (double i : impostor) {
    m.scores.push_back(i);
    m.gallery_ids.push_back("b");
  }
  m.gallery = static_cast<int>(m.scores.size());
  return m;
}

}  // namespace

TEST(Rank1, Examples) {
  EXPECT_DOUBLE_EQ(rank1(matrix({{0.9, 0.1}, {0.2, 0.8}}, {"a", "b"}, {"a", "b"})), 1.0);
  EXPECT_NEAR(rank1(matrix({{0.9, 0.1, 0.0}, {0.2, 0.8, 0.3}, {0.7, 0.1, 0.6}}, {"a", "b", "c"}, {"a", "b", "c"})),
              2.0 / 3.0, 1e-12);
  EXPECT_DOUBLE_EQ(rank1(matrix({{0.5, 0.5, 0.5}, {0.5, 0.5, 0.5}}, {"a", "a"}, {"a", "b", "c"})), 1.0);
  EXPECT_DOUBLE_EQ(rank1(matrix({{0.5, 0.5}}, {"b"}, {"a", "b"})), 0.0);
}

TEST(Rank1, MissingGallerySubjectIsNamed) {
  try {
    rank1(matrix({{0.9, 0.1}}, {"zed"}, {"a", "b"}));
    FAIL();
  } catch (const ProtocolError& e) {
    EXPECT_NE(std::string(e.what()).find("zed"), std::string::npos);
  }
}

TEST(TarAtFar, Examples) {
  const auto m = from_lists({0.9, 0.7, 0.4}, {0.8, 0.3, 0.2, 0.1});
  const auto r = tar_at_far(m, {0.25, 0.0});
  EXPECT_DOUBLE_EQ(r[0].tar, 1.0);
  EXPECT_DOUBLE_EQ(r[0].achieved_far, 0.25);
  EXPECT_GT(r[0].threshold, 0.3);
  EXPECT_NEAR(r[1].tar, 1.0 / 3.0, 1e-12);
  EXPECT_GT(r[1].threshold, 0.8);
  EXPECT_DOUBLE_EQ(r[1].achieved_far, 0.0);
  for (double f : {0.0, 0.001, 0.3, 1.0})
    EXPECT_DOUBLE_EQ(tar_at_far(from_lists({1.0, 1.0}, {0.0, 0.0, 0.0}), {f})[0].tar, 1.0);
}

TEST(TarAtFar, UnresolvableLevelReportsAchievedFar) {
  const auto r = tar_at_far(from_lists({0.9, 0.5}, {0.6, 0.1}), {0.01});
  EXPECT_FALSE(r[0].resolvable);
  EXPECT_DOUBLE_EQ(r[0].achieved_far, 0.0);
  EXPECT_DOUBLE_EQ(r[0].tar, 0.5);
  EXPECT_THROW(tar_at_far(from_lists({0.9}, {}), {0.01}), ProtocolError);
  EXPECT_THROW(tar_at_far(from_lists({0.9}, {0.1}), {1.5}), RangeError);
}

// Random score matrices up to 6x6: both metrics against exhaustive oracles,
// TAR monotone in FAR.
TEST(MetricOracles, AgreeOnRandomMatrices) {
  Rng rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    const auto m = random_score_matrix(rng);
    EXPECT_DOUBLE_EQ(rank1(m), brute_rank1(m)) << "trial " << trial;
    const std::vector<double> levels{0.0, 0.001, 0.01, 0.05, 0.1, 0.2, 0.25, 0.5, 0.75, 1.0};
    if (count_impostors(m) == 0 || count_genuine(m) == 0) continue;
    const auto r = tar_at_far(m, levels);
    for (std::size_t k = 0; k < levels.size(); ++k) {
      EXPECT_DOUBLE_EQ(r[k].tar, brute_tar(m, levels[k])) << "trial " << trial << " far " << levels[k];
      EXPECT_LE(r[k].achieved_far, levels[k] + 1e-15);
      if (k > 0) {
        EXPECT_GE(r[k].tar, r[k - 1].tar);
      }
    }
  }
}

TEST(MetricProperties, Rank1InvariantUnderMonotoneTransform) {
  Rng rng(32);
  for (int trial = 0; trial < 100; ++trial) {
    auto m = random_score_matrix(rng);
    const double before = rank1(m);
    for (auto& s : m.scores) s = std::atan(3 * s) + s * s * s;
    EXPECT_DOUBLE_EQ(rank1(m), before);
  }
}

TEST(MetricProperties, GalleryShuffleKeepsRank1WithoutTies) {
  Rng rng(33);
  for (int trial = 0; trial < 100; ++trial) {
    auto m = random_score_matrix(rng, /*discrete=*/false);
    const double before = rank1(m);
    std::vector<int> perm(static_cast<std::size_t>(m.gallery));
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm.begin(), perm.end());
    ScoreMatrix s = m;
    for (int p = 0; p < m.probes; ++p)
      for (int g = 0; g < m.gallery; ++g)
        s.scores[static_cast<std::size_t>(p) * m.gallery + g] = m.at(p, perm[static_cast<std::size_t>(g)]);
    for (std::size_t g = 0; g < perm.size(); ++g) s.gallery_ids[g] = m.gallery_ids[static_cast<std::size_t>(perm[g])];
    EXPECT_DOUBLE_EQ(rank1(s), before);
  }
}

TEST(CosineScores, SelfSimilarityAndBounds) {
  Rng rng(34);
  const auto e = random_tensor<float>(Shape{3, 8}, rng);
  const auto s = cosine_scores(e, e);
  ASSERT_EQ(s.size(), 9u);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(s[static_cast<std::size_t>(i * 3 + i)], 1.0, 1e-6);
  for (double v : s) EXPECT_TRUE(v >= -1.0 && v <= 1.0);
  EXPECT_EQ(cosine_scores(random_tensor<float>(Shape{2, 8}, rng), e).size(), 6u);
  EXPECT_THROW(cosine_scores(Tensor<float>(Shape{1, 8}), e), DegenerateEmbeddingError);
}

TEST(Report, KeysAndCounts) {
  const auto m = matrix({{0.9, 0.1, 0.3}, {0.2, 0.8, 0.4}}, {"a", "b"}, {"a", "b", "b"});
  const auto r = report_from_matrix(m, "whu", 42);
  EXPECT_EQ(r.n_genuine + r.n_impostor, 6);
  EXPECT_EQ(r.n_genuine, 3);
  const auto j = report_to_json(r);
  std::set<std::string> keys;
  for (auto it = j.begin(); it != j.end(); ++it) keys.insert(it.key());
  EXPECT_EQ(keys, (std::set<std::string>{"protocol", "rank1", "tar_far_0.01", "tar_far_0.001", "n_genuine",
                                         "n_impostor", "checkpoint_step"}));
  EXPECT_EQ(j["checkpoint_step"], 42);
  EXPECT_EQ(j["protocol"], "whu");
}

class ProtocolEval : public ::testing::Test {
 protected:
  static FFEConfig matcher_config() {
    FFEConfig fc;
    fc.input_resolution = 16;
    fc.stem_channels = 8;
    fc.bottlenecks = {{1, 8, 1, 2}, {1, 128, 1, 1}, {1, 16, 1, 2}};
    fc.head_channels = 16;
    fc.embedding_dim = 16;
    return fc;
  }
};

TEST_F(ProtocolEval, WhuShapedReportCounts) {
  const auto dir = scratch_dir("eval_whu");
  const auto split = make_split(generate_synthetic_dataset(SyntheticSpec{80, 20, 16, 1, 0.02, 3}, dir), 70, 10, 20, 0);
  Rng rng(1);
  const FFEConfig fc = matcher_config();
  auto matcher = init_ffe<float>(fc, rng);
  GeneratorConfig gc;
  gc.encoder = EncoderKind::Basic;
  gc.translator_blocks = 1;
  auto g = init_generator<float>(gc, fc, rng);
  const auto r = evaluate_protocol(split, g, split.train_subjects, fc, matcher, 16, "whu", 7);
  EXPECT_EQ(r.n_genuine + r.n_impostor, 200 * 200);
  EXPECT_EQ(r.n_genuine, 10 * 20 * 20);
  for (double v : {r.rank1, r.tar_far_0_01, r.tar_far_0_001}) EXPECT_TRUE(v >= 0 && v <= 1);
  EXPECT_EQ(r.checkpoint_step, 7);
}

TEST_F(ProtocolEval, OverlapIsProtocolViolation) {
  const auto dir = scratch_dir("eval_overlap");
  const auto split = make_split(generate_synthetic_dataset(SyntheticSpec{4, 2, 16, 1, 0.02, 3}, dir), 2, 2, 2, 0);
  Rng rng(2);
  const FFEConfig fc = matcher_config();
  auto matcher = init_ffe<float>(fc, rng);
  GeneratorConfig gc;
  gc.encoder = EncoderKind::Basic;
  gc.translator_blocks = 1;
  auto g = init_generator<float>(gc, fc, rng);
  auto trained = split.train_subjects;
  trained.push_back(split.test_subjects[0]);
  EXPECT_THROW(evaluate_protocol(split, g, trained, fc, matcher, 16), ProtocolViolation);
}

// An untrained generator carries no identity signal the matcher was built
// for; averaged over seeds Rank-1 stays near chance (1/8 here).
TEST_F(ProtocolEval, UntrainedGeneratorNearChance) {
  const auto dir = scratch_dir("eval_chance");
  const auto split = make_split(generate_synthetic_dataset(SyntheticSpec{16, 6, 16, 1, 0.02, 5}, dir), 8, 8, 6, 0);
  const FFEConfig fc = matcher_config();
  double sum = 0;
  const int seeds = 5;
  for (int seed = 0; seed < seeds; ++seed) {
    Rng rng(100 + seed);
    auto matcher = init_ffe<float>(fc, rng);
    GeneratorConfig gc;
    gc.encoder = EncoderKind::Basic;
    gc.translator_blocks = 1;
    auto g = init_generator<float>(gc, fc, rng);
    sum += evaluate_protocol(split, g, split.train_subjects, fc, matcher, 16).rank1;
  }
  EXPECT_LT(sum / seeds, 3.0 / 8.0);
}
