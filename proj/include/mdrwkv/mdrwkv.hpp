#pragma once

#include "mdrwkv/tensor.hpp"
#include "mdrwkv/ops.hpp"
#include "mdrwkv/random.hpp"
#include "mdrwkv/wkv.hpp"
#include "mdrwkv/blocks.hpp"
#include "mdrwkv/network.hpp"
#include "mdrwkv/training.hpp"
#include "mdrwkv/metrics.hpp"
#include "mdrwkv/data_io.hpp"
#include "mdrwkv/checkpoint.hpp"
#include "mdrwkv/config.hpp"
#include "mdrwkv/commands.hpp"
