#pragma once

#include <string>
#include <vector>

#include "ffecg/backbone.hpp"

namespace ffecg {

/// Which encoder sits in front of the residual translator.
enum class EncoderKind {
  Ffe,    // pretrained face feature extractor, tapped at stride 4
  Basic,  // plain strided-convolution encoder, randomly initialized
};

inline std::string to_string(EncoderKind k) { return k == EncoderKind::Ffe ? "ffe" : "basic"; }
inline EncoderKind encoder_kind_from_string(const std::string& s) {
  if (s == "ffe") return EncoderKind::Ffe;
  if (s == "basic" || s == "conv") return EncoderKind::Basic;
  throw ConfigError("generator", "unknown encoder kind '" + s + "'");
}

struct GeneratorConfig {
  EncoderKind encoder = EncoderKind::Ffe;
  int translator_blocks = 6;
  int translator_channels = 128;
  std::vector<int> decoder_channels{64, 32};  // one x2 upsampling stage each
  int output_channels = 3;
  std::vector<int> basic_encoder_channels{32, 64};  // then translator_channels

  void validate() const {
    if (translator_blocks < 0) throw ConfigError("generator", "translator_blocks must be >= 0");
    if (translator_channels != FFEConfig::kTapChannels)
      throw ConfigError("generator", "translator_channels must equal the encoder tap width (128)");
    if (decoder_channels.size() != 2)
      throw ConfigError("generator", "decoder needs exactly two x2 stages to undo the stride-4 encoder");
    if (basic_encoder_channels.size() != 2) throw ConfigError("generator", "basic encoder needs two channel counts");
    if (output_channels < 1) throw ConfigError("generator", "output_channels must be >= 1");
  }
};

/// One mapping network (G or F): encoder, residual translator, decoder.
template <class T>
struct Generator {
  GeneratorConfig config;
  FFEConfig ffe_config;
  ParameterSet<T> encoder;
  ParameterSet<T> body;  // translator + decoder
};

namespace detail {

// Backbone entries that the spatial (encoder) mode reads.
inline bool is_encoder_entry(const std::string& name, int tap_stage) {
  if (name.rfind("stem.", 0) == 0) return true;
  for (int s = 0; s <= tap_stage; ++s)
    if (name.rfind("stage" + std::to_string(s) + ".", 0) == 0) return true;
  return false;
}

}  // namespace detail

/// Builds a generator. With an FFE encoder and `pretrained` given, the
/// encoder starts from a copy of the pretrained backbone up to the tap.
template <class T>
Generator<T> init_generator(const GeneratorConfig& cfg, const FFEConfig& ffe_cfg, Rng& rng,
                            const ParameterSet<T>* pretrained = nullptr) {
  cfg.validate();
  Generator<T> g{cfg, ffe_cfg, {}, {}};
  if (cfg.encoder == EncoderKind::Ffe) {
    ParameterSet<T> full = init_ffe<T>(ffe_cfg, rng);
    if (pretrained) full.copy_from(*pretrained);
    for (const auto& e : full.entries())
      if (detail::is_encoder_entry(e.name, ffe_cfg.spatial_tap_stage)) g.encoder.add(e.name, e.var.value(), e.trainable);
  } else {
    const int c0 = cfg.basic_encoder_channels[0], c1 = cfg.basic_encoder_channels[1];
    init::conv(g.encoder, "conv0", c0, 3, 7, true, rng);
    init::conv(g.encoder, "down1", c1, c0, 3, true, rng);
    init::conv(g.encoder, "down2", cfg.translator_channels, c1, 3, true, rng);
  }
  const int c = cfg.translator_channels;
  for (int b = 0; b < cfg.translator_blocks; ++b) {
    init::conv(g.body, "res" + std::to_string(b) + ".conv1", c, c, 3, true, rng);
    init::conv(g.body, "res" + std::to_string(b) + ".conv2", c, c, 3, true, rng);
  }
  int in = c;
  for (std::size_t i = 0; i < cfg.decoder_channels.size(); ++i) {
    init::conv_transpose(g.body, "up" + std::to_string(i), in, cfg.decoder_channels[i], 3, true, rng);
    in = cfg.decoder_channels[i];
  }
  init::conv(g.body, "out", cfg.output_channels, in, 7, true, rng);
  return g;
}

/// Encoder stage: (N, 3, H, W) -> (N, 128, H/4, W/4).
template <class T>
Var<T> generator_encode(const Var<T>& images, Generator<T>& g) {
  if (g.config.encoder == EncoderKind::Ffe) return ffe_forward_spatial(images, g.ffe_config, g.encoder, false);
  auto& ps = g.encoder;
  Var<T> h = ops::relu(ops::instance_norm(ops::conv2d(images, ps.at("conv0.w"), &ps.at("conv0.b"), 1, 3)));
  h = ops::relu(ops::instance_norm(ops::conv2d(h, ps.at("down1.w"), &ps.at("down1.b"), 2, 1)));
  return ops::relu(ops::instance_norm(ops::conv2d(h, ps.at("down2.w"), &ps.at("down2.b"), 2, 1)));
}

/// One residual block: x + Conv(Norm(Act(Conv(x)))).
template <class T>
Var<T> residual_block(const Var<T>& x, ParameterSet<T>& ps, const std::string& p) {
  Var<T> h = ops::conv2d(x, ps.at(p + ".conv1.w"), &ps.at(p + ".conv1.b"), 1, 1);
  h = ops::instance_norm(ops::relu(h));
  h = ops::conv2d(h, ps.at(p + ".conv2.w"), &ps.at(p + ".conv2.b"), 1, 1);
  return ops::add(x, h);
}

/// Residual translator over the encoder feature map; shape preserving.
template <class T>
Var<T> translate_module(const Var<T>& features, const GeneratorConfig& cfg, ParameterSet<T>& body) {
  const auto& s = features.shape();
  if (s.size() != 4) throw ShapeError("generator", "translator expects rank 4, got " + shape_str(s));
  if (s[1] != cfg.translator_channels)
    throw ShapeError("generator", "channel axis must be " + std::to_string(cfg.translator_channels) + ", got " +
                                      std::to_string(s[1]));
  Var<T> h = features;
  for (int b = 0; b < cfg.translator_blocks; ++b) h = residual_block(h, body, "res" + std::to_string(b));
  return h;
}

template <class T>
Var<T> generator_decode(const Var<T>& features, Generator<T>& g) {
  auto& ps = g.body;
  Var<T> h = features;
  for (std::size_t i = 0; i < g.config.decoder_channels.size(); ++i) {
    const std::string p = "up" + std::to_string(i);
    h = ops::relu(ops::instance_norm(ops::conv_transpose2d(h, ps.at(p + ".w"), &ps.at(p + ".b"), 2, 1, 1)));
  }
  return ops::tanh(ops::conv2d(h, ps.at("out.w"), &ps.at("out.b"), 1, 3));
}

/// Full mapping: same spatial size out as in, values in (-1, 1).
template <class T>
Var<T> generator_forward(const Var<T>& images, Generator<T>& g) {
  const auto& s = images.shape();
  detail::check_image_batch(s, "generator");
  if (s[2] % 4 != 0) throw ShapeError("generator", "height axis " + std::to_string(s[2]) + " not divisible by 4");
  if (s[3] % 4 != 0) throw ShapeError("generator", "width axis " + std::to_string(s[3]) + " not divisible by 4");
  return generator_decode(translate_module(generator_encode(images, g), g.config, g.body), g);
}

/// Sets gradient recording for the whole generator; `encoder` separately so
/// the encoder can be frozen.
template <class T>
void set_trainable(Generator<T>& g, bool body, bool encoder) {
  g.body.set_requires_grad(body);
  g.encoder.set_requires_grad(encoder);
}

}  // namespace ffecg
