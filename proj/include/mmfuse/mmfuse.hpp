#pragma once

#include "mmfuse/common.hpp"
#include "mmfuse/tensor.hpp"
#include "mmfuse/ops.hpp"
#include "mmfuse/grad_check.hpp"
#include "mmfuse/io.hpp"
#include "mmfuse/trace.hpp"
#include "mmfuse/e3d_msca.hpp"
#include "mmfuse/msca.hpp"
#include "mmfuse/kan.hpp"
#include "mmfuse/encoders.hpp"
#include "mmfuse/model.hpp"
#include "mmfuse/metrics.hpp"
#include "mmfuse/data.hpp"
#include "mmfuse/training.hpp"
#include "mmfuse/runner.hpp"
