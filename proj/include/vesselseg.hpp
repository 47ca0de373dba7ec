// Copyright 2026 The vesselseg Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include "vesselseg/annot.hpp"
#include "vesselseg/config.hpp"
#include "vesselseg/dataset.hpp"
#include "vesselseg/error.hpp"
#include "vesselseg/imgproc.hpp"
#include "vesselseg/loss.hpp"
#include "vesselseg/metrics.hpp"
#include "vesselseg/nn.hpp"
#include "vesselseg/pipeline.hpp"
#include "vesselseg/raster.hpp"
#include "vesselseg/tensor.hpp"
#include "vesselseg/train.hpp"
#include "vesselseg/weights.hpp"
