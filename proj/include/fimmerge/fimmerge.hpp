#pragma once

#define FIMMERGE_VERSION "0.1.0"

#include "fimmerge/alpha_policy.hpp"
#include "fimmerge/common.hpp"
#include "fimmerge/fim.hpp"
#include "fimmerge/hessian.hpp"
#include "fimmerge/merge_engine.hpp"
#include "fimmerge/micro_model.hpp"
#include "fimmerge/stats.hpp"
#include "fimmerge/tensor_archive.hpp"
#include "fimmerge/theory_lab.hpp"
#include "fimmerge/topology.hpp"
