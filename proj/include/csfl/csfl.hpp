// SPDX-License-Identifier: Apache-2.0
#pragma once

// Umbrella header for the CSFL simulation library.

#include "csfl/cli_ops.hpp"
#include "csfl/config.hpp"
#include "csfl/crom.hpp"
#include "csfl/data.hpp"
#include "csfl/errors.hpp"
#include "csfl/experiment.hpp"
#include "csfl/io.hpp"
#include "csfl/linalg.hpp"
#include "csfl/model.hpp"
#include "csfl/rng.hpp"
#include "csfl/sim.hpp"
#include "csfl/system_model.hpp"
