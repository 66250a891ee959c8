// Copyright 2026 The hdrvam Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "hdrvam/autodiff.hpp"
#include "hdrvam/core.hpp"
#include "hdrvam/formats.hpp"
#include "hdrvam/image.hpp"
#include "hdrvam/metrics.hpp"
#include "hdrvam/model.hpp"
#include "hdrvam/network.hpp"
#include "hdrvam/scene.hpp"
#include "hdrvam/segmentation.hpp"
#include "hdrvam/training.hpp"
