#pragma once

#include "scn/matrix.hpp"
#include "scn/rng.hpp"
#include "scn/autodiff.hpp"
#include "scn/adam.hpp"
#include "scn/networks.hpp"
#include "scn/shift.hpp"
#include "scn/metrics.hpp"
#include "scn/synthdata.hpp"
#include "scn/trainer.hpp"
#include "scn/baselines.hpp"
#include "scn/io.hpp"
#include "scn/experiment.hpp"
