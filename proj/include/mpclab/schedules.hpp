// Copyright 2026 The mpclab Authors
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

#include <cstdint>

#include "mpclab/common.hpp"

namespace mpclab::schedules {

// Warmup learning-rate schedule:
//   lrate(n) = k * d_model^exponent * min(n^-0.5, n * warmup_n^-1.5)
// The peak sits exactly at n == warmup_n where the two min() arguments meet.
struct WarmupConfig {
  double k = 0.5;
  int warmup_n = 5000;
  int d_model = 256;
  double dmodel_exponent = 0.5;
};

double lrate(const WarmupConfig& cfg, std::int64_t n);

// Layer-wise discriminative multiplier lambda^|l - theta| for encoder layer
// l in [1, num_layers]. Layers near theta keep the base learning rate;
// layers far from it are updated more slowly.
struct LayerwiseConfig {
  double lambda = 0.95;
  double theta = 5.5;
};

double layer_multiplier(const LayerwiseConfig& cfg, int layer, int num_layers);

// Auxiliary reconstruction-loss weight: gamma0 halved every halve_every
// epochs (piecewise constant).
struct MpcWeightSchedule {
  double gamma0 = 0.2;
  int halve_every = 5;
};

double gamma_mpc(const MpcWeightSchedule& sched, int epoch);

}  // namespace mpclab::schedules
