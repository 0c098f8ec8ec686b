#pragma once

/**
 * @file delight.hpp
 * @brief Umbrella header for the delight library: unsupervised low-light
 *        enhancement with decoupled illumination and noise networks.
 */

#include "delight/autodiff.hpp"
#include "delight/checkpoint.hpp"
#include "delight/config.hpp"
#include "delight/data.hpp"
#include "delight/errors.hpp"
#include "delight/image_io.hpp"
#include "delight/imaging.hpp"
#include "delight/losses.hpp"
#include "delight/metrics.hpp"
#include "delight/networks.hpp"
#include "delight/optim.hpp"
#include "delight/pseudo.hpp"
#include "delight/rng.hpp"
#include "delight/serialize.hpp"
#include "delight/sha256.hpp"
#include "delight/tensor.hpp"
#include "delight/train.hpp"
