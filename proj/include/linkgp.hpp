#pragma once

#include "linkgp/design.hpp"
#include "linkgp/dynamics.hpp"
#include "linkgp/errors.hpp"
#include "linkgp/experiment.hpp"
#include "linkgp/gp.hpp"
#include "linkgp/gp_io.hpp"
#include "linkgp/kernel.hpp"
#include "linkgp/metrics.hpp"
#include "linkgp/optimize.hpp"
#include "linkgp/propagation.hpp"
#include "linkgp/version.hpp"
