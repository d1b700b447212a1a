#pragma once

// Umbrella header: the whole library.

#include "stf/backbone.hpp"
#include "stf/checkpoint.hpp"
#include "stf/config.hpp"
#include "stf/conv.hpp"
#include "stf/data/dataset.hpp"
#include "stf/data/generator.hpp"
#include "stf/data/png_io.hpp"
#include "stf/eval.hpp"
#include "stf/fusion.hpp"
#include "stf/gemm.hpp"
#include "stf/head.hpp"
#include "stf/mfa.hpp"
#include "stf/model.hpp"
#include "stf/ops.hpp"
#include "stf/params.hpp"
#include "stf/sfa.hpp"
#include "stf/tape.hpp"
#include "stf/tensor.hpp"
#include "stf/train.hpp"
#include "stf/types.hpp"
