#pragma once

#include "mist/config.hpp"
#include "mist/encoder.hpp"
#include "mist/error.hpp"
#include "mist/evaluation.hpp"
#include "mist/formats.hpp"
#include "mist/manifest.hpp"
#include "mist/milgen.hpp"
#include "mist/pipeline.hpp"
#include "mist/plot.hpp"
#include "mist/pseudolabel.hpp"
#include "mist/rng.hpp"
#include "mist/sampling.hpp"
#include "mist/synth.hpp"
#include "mist/tensor.hpp"
