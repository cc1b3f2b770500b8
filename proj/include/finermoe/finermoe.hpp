// Copyright 2026 The finermoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "finermoe/analysis.hpp"
#include "finermoe/checkpoint.hpp"
#include "finermoe/config.hpp"
#include "finermoe/experts.hpp"
#include "finermoe/loss_grad.hpp"
#include "finermoe/moe_layer.hpp"
#include "finermoe/numerics.hpp"
#include "finermoe/oracle.hpp"
#include "finermoe/router.hpp"
#include "finermoe/routing.hpp"
#include "finermoe/upcycle.hpp"
