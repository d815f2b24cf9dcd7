// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "versatile/accounting.hpp"
#include "versatile/chart.hpp"
#include "versatile/checkpoint.hpp"
#include "versatile/config.hpp"
#include "versatile/data.hpp"
#include "versatile/depth.hpp"
#include "versatile/fusion.hpp"
#include "versatile/metrics.hpp"
#include "versatile/model.hpp"
#include "versatile/nn.hpp"
#include "versatile/ops.hpp"
#include "versatile/optim.hpp"
#include "versatile/rng.hpp"
#include "versatile/stats.hpp"
#include "versatile/tensor.hpp"
#include "versatile/trainer.hpp"
#include "versatile/width.hpp"
