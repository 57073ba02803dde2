#pragma once

#include "camkit/augment.hpp"
#include "camkit/cam.hpp"
#include "camkit/config.hpp"
#include "camkit/dataset.hpp"
#include "camkit/error.hpp"
#include "camkit/finite_diff.hpp"
#include "camkit/gradcheck.hpp"
#include "camkit/image.hpp"
#include "camkit/metrics.hpp"
#include "camkit/model.hpp"
#include "camkit/netpbm.hpp"
#include "camkit/ops.hpp"
#include "camkit/parallel.hpp"
#include "camkit/preprocess.hpp"
#include "camkit/presets.hpp"
#include "camkit/rng.hpp"
#include "camkit/tensor.hpp"
#include "camkit/train.hpp"
#include "camkit/weights_io.hpp"
