#pragma once

// Umbrella header.

#include "sdl/backprop.hpp"
#include "sdl/checkpoint.hpp"
#include "sdl/config.hpp"
#include "sdl/error.hpp"
#include "sdl/flatness.hpp"
#include "sdl/ingest.hpp"
#include "sdl/metrics.hpp"
#include "sdl/network.hpp"
#include "sdl/numerics.hpp"
#include "sdl/optim.hpp"
#include "sdl/rmt.hpp"
#include "sdl/sparsity.hpp"
#include "sdl/trainer.hpp"
