#pragma once

#include "tweedie_avb/errors.hpp"
#include "tweedie_avb/special_functions.hpp"
#include "tweedie_avb/statistics.hpp"
#include "tweedie_avb/tweedie.hpp"
#include "tweedie_avb/autodiff.hpp"
#include "tweedie_avb/mixed_model.hpp"
#include "tweedie_avb/data_io.hpp"
#include "tweedie_avb/avb.hpp"
#include "tweedie_avb/mcmc.hpp"
#include "tweedie_avb/evaluation.hpp"
#include "tweedie_avb/serialization.hpp"
