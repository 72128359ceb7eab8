#pragma once

#include <string>
#include <vector>

#include "ffecg/ops.hpp"
#include "ffecg/params.hpp"

namespace ffecg {

/// Patch discriminator. With the defaults a 256x256 input gives a 30x30
/// score map, each score seeing a 70x70 input window.
struct DiscriminatorConfig {
  std::vector<int> layer_channels{64, 128, 256, 512};
  int kernel = 4;
  std::vector<int> strides{2, 2, 2, 1, 1};  // one per layer plus the scoring layer
  double leaky_slope = 0.2;

  void validate() const {
    if (layer_channels.empty()) throw ConfigError("discriminator", "layer_channels is empty");
    if (strides.size() != layer_channels.size() + 1)
      throw ConfigError("discriminator", "need one stride per layer plus one for the scoring layer");
    for (int s : strides)
      if (s < 1) throw ConfigError("discriminator", "strides must be >= 1");
    if (kernel < 1) throw ConfigError("discriminator", "kernel must be >= 1");
  }

  // Score-map side length for a square input, 0 if too small.
  int output_size(int input) const {
    int s = input;
    for (int st : strides) {
      s = (s + 2 - kernel) / st + 1;
      if (s <= 0) return 0;
    }
    return s;
  }
};

template <class T>
ParameterSet<T> init_discriminator(const DiscriminatorConfig& cfg, Rng& rng) {
  cfg.validate();
  ParameterSet<T> ps;
  int in = 3;
  for (std::size_t i = 0; i < cfg.layer_channels.size(); ++i) {
    init::conv(ps, "layer" + std::to_string(i), cfg.layer_channels[i], in, cfg.kernel, true, rng);
    in = cfg.layer_channels[i];
  }
  init::conv(ps, "score", 1, in, cfg.kernel, true, rng);
  return ps;
}

/// Raw (unbounded) patch scores, shape (N, 1, h', w').
template <class T>
Var<T> discriminator_forward(const Var<T>& images, const DiscriminatorConfig& cfg, ParameterSet<T>& ps) {
  const auto& s = images.shape();
  if (s.size() != 4) throw ShapeError("discriminator", "expected rank-4 image batch, got " + shape_str(s));
  if (s[1] != 3) throw ShapeError("discriminator", "channel axis must be 3, got " + std::to_string(s[1]));
  if (cfg.output_size(std::min(s[2], s[3])) <= 0)
    throw ShapeError("discriminator", "spatial size " + shape_str(s) + " too small for the layer stack");
  const T slope = static_cast<T>(cfg.leaky_slope);
  Var<T> h = images;
  for (std::size_t i = 0; i < cfg.layer_channels.size(); ++i) {
    const std::string p = "layer" + std::to_string(i);
    h = ops::conv2d(h, ps.at(p + ".w"), &ps.at(p + ".b"), cfg.strides[i], 1);
    if (i > 0) h = ops::instance_norm(h);
    h = ops::leaky_relu(h, slope);
  }
  return ops::conv2d(h, ps.at("score.w"), &ps.at("score.b"), cfg.strides.back(), 1);
}

}  // namespace ffecg
