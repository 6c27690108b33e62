// SPDX-License-Identifier: Apache-2.0
//
// Umbrella header for the library. The CLI driver lives in nexus/cli.hpp.

#pragma once

#include "nexus/error.hpp"
#include "nexus/tensor.hpp"
#include "nexus/kernels.hpp"
#include "nexus/ops.hpp"
#include "nexus/text_data.hpp"
#include "nexus/transformer.hpp"
#include "nexus/moe.hpp"
#include "nexus/domain_embeddings.hpp"
#include "nexus/upcycling.hpp"
#include "nexus/checkpoint.hpp"
#include "nexus/training.hpp"
#include "nexus/analysis.hpp"
#include "nexus/pipeline.hpp"
