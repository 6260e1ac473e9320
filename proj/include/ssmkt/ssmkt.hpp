#pragma once

#include "ssmkt/adam.hpp"
#include "ssmkt/bench.hpp"
#include "ssmkt/block.hpp"
#include "ssmkt/checkpoint.hpp"
#include "ssmkt/data.hpp"
#include "ssmkt/errors.hpp"
#include "ssmkt/gradcheck.hpp"
#include "ssmkt/interp.hpp"
#include "ssmkt/model.hpp"
#include "ssmkt/ops.hpp"
#include "ssmkt/rng.hpp"
#include "ssmkt/s6.hpp"
#include "ssmkt/scan.hpp"
#include "ssmkt/tensor.hpp"
#include "ssmkt/trainer.hpp"
