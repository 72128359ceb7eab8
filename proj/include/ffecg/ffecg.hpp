#pragma once

#include "ffecg/backbone.hpp"
#include "ffecg/checkpoint.hpp"
#include "ffecg/config.hpp"
#include "ffecg/data.hpp"
#include "ffecg/discriminator.hpp"
#include "ffecg/evaluation.hpp"
#include "ffecg/generator.hpp"
#include "ffecg/losses.hpp"
#include "ffecg/training.hpp"
