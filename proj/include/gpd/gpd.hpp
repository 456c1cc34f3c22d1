#pragma once

#include "gpd/channel_branch_reparam.hpp"
#include "gpd/checkpoint.hpp"
#include "gpd/dataset.hpp"
#include "gpd/errors.hpp"
#include "gpd/forward.hpp"
#include "gpd/inverse_reparam.hpp"
#include "gpd/losses.hpp"
#include "gpd/model_graph.hpp"
#include "gpd/nn_ops.hpp"
#include "gpd/optim.hpp"
#include "gpd/plot.hpp"
#include "gpd/report.hpp"
#include "gpd/rng.hpp"
#include "gpd/run_config.hpp"
#include "gpd/tensor.hpp"
#include "gpd/trainer.hpp"
#include "gpd/verify.hpp"
