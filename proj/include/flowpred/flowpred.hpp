#pragma once

// Umbrella header for the whole toolkit.

#include "flowpred/augment.hpp"
#include "flowpred/canny.hpp"
#include "flowpred/checkpoint.hpp"
#include "flowpred/codebook.hpp"
#include "flowpred/dataset.hpp"
#include "flowpred/error.hpp"
#include "flowpred/flow.hpp"
#include "flowpred/flow_viz.hpp"
#include "flowpred/gradcheck.hpp"
#include "flowpred/image.hpp"
#include "flowpred/kmeans.hpp"
#include "flowpred/layers.hpp"
#include "flowpred/metrics.hpp"
#include "flowpred/model.hpp"
#include "flowpred/multiframe.hpp"
#include "flowpred/net.hpp"
#include "flowpred/rng.hpp"
#include "flowpred/sgd.hpp"
#include "flowpred/synth.hpp"
#include "flowpred/tensor.hpp"
