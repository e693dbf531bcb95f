#pragma once

#include "klctl/adam.hpp"
#include "klctl/checkpoint.hpp"
#include "klctl/config.hpp"
#include "klctl/control.hpp"
#include "klctl/data.hpp"
#include "klctl/error.hpp"
#include "klctl/generate.hpp"
#include "klctl/gradcheck.hpp"
#include "klctl/graph.hpp"
#include "klctl/metrics.hpp"
#include "klctl/model.hpp"
#include "klctl/objective.hpp"
#include "klctl/parameters.hpp"
#include "klctl/rng.hpp"
#include "klctl/tensor.hpp"
#include "klctl/trainer.hpp"
