#pragma once

#include "errors.hpp"
#include "vec.hpp"
#include "fwdad.hpp"
#include "schedule.hpp"
#include "gmm.hpp"
#include "fields.hpp"
#include "net.hpp"
#include "solvers.hpp"
#include "metrics.hpp"
#include "config.hpp"
#include "experiments.hpp"
