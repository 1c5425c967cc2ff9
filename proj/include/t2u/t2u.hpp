#pragma once

#include "t2u/checkpoint.hpp"
#include "t2u/config.hpp"
#include "t2u/data.hpp"
#include "t2u/gradcheck.hpp"
#include "t2u/losses.hpp"
#include "t2u/metrics.hpp"
#include "t2u/model.hpp"
#include "t2u/nn.hpp"
#include "t2u/ops.hpp"
#include "t2u/optim.hpp"
#include "t2u/pnm.hpp"
#include "t2u/rng.hpp"
#include "t2u/run.hpp"
#include "t2u/tensor.hpp"
#include "t2u/train.hpp"
