#pragma once

// Finite-difference gradient cases shared by the unit suite and the
// acceptance runner. Every case builds double-precision inputs, reduces the
// output to a scalar and compares against central differences.

#include <string>
#include <vector>

#include "ffecg/discriminator.hpp"
#include "ffecg/generator.hpp"
#include "ffecg/losses.hpp"
#include "support.hpp"

namespace gradient_cases {

using namespace ffecg;
using testing_support::check_gradients;
using testing_support::GradReport;
using testing_support::project;
using testing_support::random_tensor;

struct Case {
  std::string name;
  GradReport report;
};

inline constexpr double kStep = 1e-4;

inline std::vector<Var<double>> params_of(ParameterSet<double>& ps) {
  std::vector<Var<double>> out;
  for (auto& e : ps.entries())
    if (e.trainable) out.push_back(e.var);
  return out;
}

// Network checks redraw every trainable parameter uniformly in [-0.5, 0.5].
// With the training init (small weights, zero biases) many pre-activations sit
// within one finite-difference step of a ReLU kink and instance norms work on
// near-zero variance, where the central difference itself is unreliable.
inline void spread(ParameterSet<double>& ps, Rng& rng) {
  for (auto& e : ps.entries())
    if (e.trainable)
      for (auto& v : e.var.mutable_value().vec()) v = rng.uniform(-0.5, 0.5);
}

// Loss terms on random 4x4 images / score maps.
inline std::vector<Case> loss_cases(std::uint64_t seed) {
  Rng rng(seed);
  const Shape img{2, 3, 4, 4}, map{2, 1, 4, 4};
  std::vector<Case> out;
  {
    Var<double> real(random_tensor(map, rng, -2, 2)), fake(random_tensor(map, rng, -2, 2));
    out.push_back({"lsgan discriminator",
                   check_gradients([&] { return losses::lsgan_discriminator(real, fake); }, {real, fake}, kStep)});
    out.push_back({"lsgan generator", check_gradients([&] { return losses::lsgan_generator(fake); }, {fake}, kStep)});
  }
  {
    Var<double> x(random_tensor(img, rng)), xr(random_tensor(img, rng)), y(random_tensor(img, rng)),
        yr(random_tensor(img, rng));
    out.push_back({"cycle", check_gradients([&] { return losses::cycle(x, xr, y, yr); }, {x, xr, y, yr}, kStep)});
    out.push_back({"pixel consistency",
                   check_gradients([&] { return losses::pixel_consistency(xr, x, yr, y); }, {x, xr, y, yr}, kStep)});
    Var<double> a(random_tensor(Shape{1}, rng)), b(random_tensor(Shape{1}, rng));
    out.push_back({"total objective", check_gradients(
                                          [&] {
                                            return losses::total(a, b, losses::cycle(x, xr, y, yr),
                                                                 losses::pixel_consistency(xr, x, yr, y), LossWeights{});
                                          },
                                          {a, b, x, xr, y, yr}, kStep)});
  }
  return out;
}

// Generator forward on a random side x side image: the input and
// a sample of every parameter tensor.
inline Case generator_case(EncoderKind kind, int side, std::uint64_t seed, int per_param = 4, double step = kStep) {
  Rng rng(seed);
  GeneratorConfig gc;
  gc.encoder = kind;
  gc.translator_blocks = 2;
  // Narrow backbone: fewer PReLU units means fewer kinks within one step.
  FFEConfig fc;
  fc.input_resolution = 16;
  fc.stem_channels = 8;
  fc.bottlenecks = {{1, 8, 1, 2}, {1, 128, 1, 1}};
  fc.head_channels = 16;
  fc.embedding_dim = 16;
  auto g = init_generator<double>(gc, fc, rng);
  spread(g.encoder, rng);
  spread(g.body, rng);
  Var<double> x(random_tensor(Shape{1, 3, side, side}, rng));
  const auto r = random_tensor(Shape{1, 3, side, side}, rng);
  std::vector<Var<double>> inputs{x};
  for (auto& v : params_of(g.encoder)) inputs.push_back(v);
  for (auto& v : params_of(g.body)) inputs.push_back(v);
  GradReport rep = check_gradients([&] { return project(generator_forward(x, g), r); }, {x}, step);
  GradReport prep = check_gradients([&] { return project(generator_forward(x, g), r); },
                                    std::vector<Var<double>>(inputs.begin() + 1, inputs.end()), step, per_param);
  if (prep.relative() > rep.relative()) std::swap(rep, prep);
  rep.checked += prep.checked;
  return {"generator forward (" + to_string(kind) + " encoder, " + std::to_string(side) + "x" + std::to_string(side) + ")",
          rep};
}

// Discriminator forward. At 4x4 a two-layer stack (stride 2, then the
// stride-1 scoring layer) is the deepest that still produces a score.
inline Case discriminator_case(int side, std::uint64_t seed, int per_param = 6) {
  Rng rng(seed);
  DiscriminatorConfig dc;
  if (side < 24) {
    dc.layer_channels = {8};
    dc.strides = {2, 1};
  } else {
    dc.layer_channels = {8, 16, 16, 16};
  }
  auto ps = init_discriminator<double>(dc, rng);
  spread(ps, rng);
  Var<double> x(random_tensor(Shape{2, 3, side, side}, rng));
  const int o = dc.output_size(side);
  const auto r = random_tensor(Shape{2, 1, o, o}, rng);
  auto f = [&] { return project(discriminator_forward(x, dc, ps), r); };
  GradReport rep = check_gradients(f, {x}, kStep);
  GradReport prep = check_gradients(f, params_of(ps), kStep, per_param);
  if (prep.relative() > rep.relative()) std::swap(rep, prep);
  rep.checked += prep.checked;
  return {"discriminator forward (" + std::to_string(side) + "x" + std::to_string(side) + ")", rep};
}

}  // namespace gradient_cases
