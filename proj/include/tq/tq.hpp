#pragma once

// Umbrella header for the b1.58 quantization-aware-training library.

#include "tq/archive.hpp"
#include "tq/checkpoint.hpp"
#include "tq/data.hpp"
#include "tq/error.hpp"
#include "tq/experiment.hpp"
#include "tq/fetch.hpp"
#include "tq/metrics.hpp"
#include "tq/nn.hpp"
#include "tq/quant.hpp"
#include "tq/rng.hpp"
#include "tq/tensor.hpp"
#include "tq/ternary.hpp"
#include "tq/train.hpp"
#include "tq/util.hpp"
