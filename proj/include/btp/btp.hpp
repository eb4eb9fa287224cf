#pragma once

#include "btp/attention_scoring.hpp"
#include "btp/calibration.hpp"
#include "btp/cost_model.hpp"
#include "btp/diversity.hpp"
#include "btp/simulation.hpp"
#include "btp/staged_selector.hpp"
#include "btp/synthetic.hpp"
#include "btp/toy_transformer.hpp"
#include "btp/trace_io.hpp"
#include "btp/types.hpp"
