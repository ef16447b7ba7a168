#pragma once

#include "tfm/augment.hpp"
#include "tfm/autograd.hpp"
#include "tfm/checkpoint.hpp"
#include "tfm/csv.hpp"
#include "tfm/error.hpp"
#include "tfm/frameset.hpp"
#include "tfm/grid.hpp"
#include "tfm/lognormal.hpp"
#include "tfm/model.hpp"
#include "tfm/optim.hpp"
#include "tfm/parallel.hpp"
#include "tfm/predict.hpp"
#include "tfm/random.hpp"
#include "tfm/synth.hpp"
#include "tfm/tensor.hpp"
#include "tfm/train.hpp"
