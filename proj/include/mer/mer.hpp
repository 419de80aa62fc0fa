#pragma once

// Umbrella header.

#include "mer/analysis.hpp"
#include "mer/bellman.hpp"
#include "mer/core.hpp"
#include "mer/csv.hpp"
#include "mer/errors.hpp"
#include "mer/harness.hpp"
#include "mer/problems.hpp"
#include "mer/rng.hpp"
#include "mer/solvers.hpp"
#include "mer/sources.hpp"
