#pragma once

#include "starvc/numerics/grad_check.hpp"
#include "starvc/numerics/ops.hpp"
#include "starvc/numerics/optim.hpp"
#include "starvc/numerics/serialize.hpp"
#include "starvc/numerics/tape.hpp"
#include "starvc/numerics/tensor.hpp"
