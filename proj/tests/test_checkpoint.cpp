#include <gtest/gtest.h>

#include <fstream>

#include "ffecg/training.hpp"
#include "support.hpp"
#include "training_cases.hpp"

using namespace ffecg;
using testing_support::random_tensor;
using testing_support::scratch_dir;

namespace {

std::string read_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& p, const std::string& s) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  os << s;
}

}  // namespace

TEST(Checkpoint, TensorsAndMetadataRoundTrip) {
  const auto dir = scratch_dir("ckpt_rt");
  Rng rng(1);
  const auto a = random_tensor<float>(Shape{2, 3, 4, 5}, rng);
  const auto b = random_tensor<double>(Shape{7}, rng);
  const Tensor<float> empty(Shape{0});
  CheckpointWriter w;
  w.meta()["note"] = "x";
  w.meta()["step"] = 12;
  w.add("a", a);
  w.add("b", b);
  w.add("empty", empty);
  w.write(dir / "c.ckpt");
  EXPECT_FALSE(fs::exists(dir / "c.ckpt.tmp"));

  const auto ck = Checkpoint::read(dir / "c.ckpt");
  EXPECT_EQ(ck.meta()["note"], "x");
  EXPECT_EQ(ck.meta()["step"], 12);
  EXPECT_EQ(ck.tensor<float>("a"), a);
  EXPECT_EQ(ck.tensor<double>("b"), b);
  EXPECT_EQ(ck.tensor<float>("empty").size(), 0u);
  EXPECT_EQ(ck.entries().size(), 3u);
}

TEST(Checkpoint, WriteIsByteStable) {
  const auto dir = scratch_dir("ckpt_stable");
  auto write = [&](const fs::path& p) {
    Rng rng(2);
    CheckpointWriter w;
    w.meta()["k"] = 1;
    w.add("t", random_tensor<float>(Shape{3, 3}, rng));
    w.write(p);
  };
  write(dir / "1.ckpt");
  write(dir / "2.ckpt");
  EXPECT_EQ(read_bytes(dir / "1.ckpt"), read_bytes(dir / "2.ckpt"));
}

TEST(Checkpoint, ReadErrorsNameTheProblem) {
  const auto dir = scratch_dir("ckpt_errors");
  EXPECT_THROW(Checkpoint::read(dir / "missing.ckpt"), IoError);
  write_bytes(dir / "junk.ckpt", "not a checkpoint at all");
  EXPECT_THROW(Checkpoint::read(dir / "junk.ckpt"), IoError);

  Rng rng(3);
  CheckpointWriter w;
  w.add("t", random_tensor<float>(Shape{64}, rng));
  w.write(dir / "ok.ckpt");
  const std::string full = read_bytes(dir / "ok.ckpt");
  write_bytes(dir / "short.ckpt", full.substr(0, full.size() - 16));
  try {
    Checkpoint::read(dir / "short.ckpt");
    FAIL();
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("'t'"), std::string::npos) << e.what();
  }

  const auto ck = Checkpoint::read(dir / "ok.ckpt");
  EXPECT_THROW(ck.tensor<double>("t"), IoError);
  EXPECT_THROW(ck.tensor<float>("u"), IoError);
  CheckpointWriter dup;
  dup.add("t", Tensor<float>(Shape{1}));
  EXPECT_THROW(dup.add("t", Tensor<float>(Shape{1})), IoError);
}

TEST(Checkpoint, ParameterShapeMismatchIsReported) {
  const auto dir = scratch_dir("ckpt_shape");
  ParameterSet<float> src;
  src.add("w", Tensor<float>(Shape{2, 2}, 1.0f));
  CheckpointWriter w;
  w.add_parameters("p/", src);
  w.write(dir / "p.ckpt");
  ParameterSet<float> dst;
  dst.add("w", Tensor<float>(Shape{3, 2}));
  EXPECT_THROW(Checkpoint::read(dir / "p.ckpt").load_parameters("p/", dst), IoError);
  ParameterSet<float> other;
  other.add("v", Tensor<float>(Shape{2, 2}));
  EXPECT_THROW(Checkpoint::read(dir / "p.ckpt").load_parameters("p/", other), IoError);
}

TEST(FfeCheckpoint, RoundTripsConfigAndWeights) {
  const auto dir = scratch_dir("ckpt_ffe");
  FFEConfig fc;
  fc.input_resolution = 16;
  Rng rng(4);
  const auto ps = init_ffe<float>(fc, rng);
  save_ffe_checkpoint(dir / "ffe.ckpt", fc, ps, {{"train_accuracy", 0.5}});
  const auto [cfg, back] = load_ffe_checkpoint(dir / "ffe.ckpt");
  EXPECT_EQ(nlohmann::json(cfg), nlohmann::json(fc));
  EXPECT_EQ(back.checksum(), ps.checksum());
  EXPECT_THROW(load_train_state(dir / "ffe.ckpt"), IoError);
}

TEST(TrainCheckpoint, RestoresEveryStateComponent) {
  const auto dir = scratch_dir("ckpt_train");
  const auto split = training_cases::synthetic_split(dir / "data", 4, 4, 16, 2, 2, 2);
  auto setup = training_cases::basic_setup(16, 1, 6);
  setup.train.image_pool_size = 3;
  TrainState s = make_train_state(setup.train, setup.generator, setup.ffe, setup.discriminator);
  train_loop(split, s, {dir / "run", nullptr, 3});
  const TrainState back = load_train_state(dir / "run" / "checkpoint_latest.ckpt");
  EXPECT_EQ(back.step, 3);
  EXPECT_EQ(back.rng.state(), s.rng.state());
  EXPECT_EQ(back.gen_opt.steps(), s.gen_opt.steps());
  EXPECT_EQ(back.disc_opt.steps(), s.disc_opt.steps());
  EXPECT_EQ(training_cases::parameter_distance(s, back), 0.0);
  ASSERT_EQ(back.gen_opt.slots().size(), s.gen_opt.slots().size());
  for (std::size_t i = 0; i < s.gen_opt.slots().size(); ++i) {
    EXPECT_EQ(back.gen_opt.slots()[i].m, s.gen_opt.slots()[i].m);
    EXPECT_EQ(back.gen_opt.slots()[i].v, s.gen_opt.slots()[i].v);
  }
  ASSERT_EQ(back.pool_nir.size(), 3);
  for (int i = 0; i < 3; ++i) EXPECT_EQ(back.pool_nir.images()[static_cast<std::size_t>(i)], s.pool_nir.images()[static_cast<std::size_t>(i)]);
  EXPECT_EQ(nlohmann::json(back.config), nlohmann::json(s.config));
}
