#pragma once

#include "insight/numcore/checkpoint.hpp"
#include "insight/numcore/grad_check.hpp"
#include "insight/numcore/ops.hpp"
#include "insight/numcore/params.hpp"
#include "insight/numcore/tensor.hpp"
