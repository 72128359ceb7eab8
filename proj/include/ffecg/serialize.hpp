#pragma once

// JSON mappings of the configuration structs. Used for checkpoint metadata
// and, through config.hpp, for the INI configuration file.

#include <json.hpp>

#include "ffecg/backbone.hpp"
#include "ffecg/data.hpp"
#include "ffecg/discriminator.hpp"
#include "ffecg/generator.hpp"
#include "ffecg/losses.hpp"

namespace ffecg {

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(BottleneckSpec, expansion, out_channels, repeats, stride)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(FFEConfig, input_resolution, stem_channels, bottlenecks, embedding_dim,
                                                spatial_tap_stage, head_channels)

NLOHMANN_JSON_SERIALIZE_ENUM(EncoderKind, {{EncoderKind::Ffe, "ffe"}, {EncoderKind::Basic, "basic"}})

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(GeneratorConfig, encoder, translator_blocks, translator_channels,
                                                decoder_channels, output_channels, basic_encoder_channels)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DiscriminatorConfig, layer_channels, kernel, strides, leaky_slope)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(LossWeights, lambda_cyc, gamma_pc)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SyntheticSpec, n_subjects, images_per_subject, resolution, jitter_px,
                                                noise_sigma, seed)

}  // namespace ffecg
