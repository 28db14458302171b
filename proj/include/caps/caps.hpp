#pragma once

// Umbrella header.

#include "caps/analysis.hpp"
#include "caps/attacks.hpp"
#include "caps/capsnet.hpp"
#include "caps/checkpoint.hpp"
#include "caps/data.hpp"
#include "caps/errors.hpp"
#include "caps/grad_check.hpp"
#include "caps/ops.hpp"
#include "caps/reconstruction.hpp"
#include "caps/rng.hpp"
#include "caps/tape.hpp"
#include "caps/tensor.hpp"
#include "caps/training.hpp"
