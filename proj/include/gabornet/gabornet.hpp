#pragma once

#include "gabornet/data.hpp"
#include "gabornet/errors.hpp"
#include "gabornet/fitting.hpp"
#include "gabornet/gabor.hpp"
#include "gabornet/layers.hpp"
#include "gabornet/model.hpp"
#include "gabornet/pruning.hpp"
#include "gabornet/rng.hpp"
#include "gabornet/tensor.hpp"
#include "gabornet/train.hpp"
#include "gabornet/transforms.hpp"
