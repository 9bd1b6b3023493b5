#pragma once

// Everything except the CLI driver.

#include "xunc/config.hpp"
#include "xunc/data_io.hpp"
#include "xunc/expl_uncertainty.hpp"
#include "xunc/explain.hpp"
#include "xunc/metrics.hpp"
#include "xunc/train.hpp"
#include "xunc/uncertainty.hpp"
