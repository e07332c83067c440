#pragma once

#include "flowcount/active.hpp"
#include "flowcount/annotation_io.hpp"
#include "flowcount/dataset.hpp"
#include "flowcount/density.hpp"
#include "flowcount/errors.hpp"
#include "flowcount/experiment.hpp"
#include "flowcount/flc_io.hpp"
#include "flowcount/grid.hpp"
#include "flowcount/losses.hpp"
#include "flowcount/nn/checkpoint.hpp"
#include "flowcount/nn/conv.hpp"
#include "flowcount/nn/models.hpp"
#include "flowcount/nn/optim.hpp"
#include "flowcount/pgm.hpp"
#include "flowcount/plot.hpp"
#include "flowcount/rng.hpp"
#include "flowcount/sim.hpp"
#include "flowcount/train.hpp"
