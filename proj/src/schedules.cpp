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

#include "mpclab/schedules.hpp"

#include <cmath>
#include <string>

namespace mpclab::schedules {

double lrate(const WarmupConfig& cfg, std::int64_t n) {
  if (n < 1) throw ValueError("lrate: step number must be >= 1");
  if (cfg.k <= 0.0) throw ValueError("lrate: k must be positive");
  if (cfg.warmup_n < 1) throw ValueError("lrate: warmup_n must be >= 1");
  const double nn = static_cast<double>(n);
  const double ramp = nn * std::pow(static_cast<double>(cfg.warmup_n), -1.5);
  const double decay = std::pow(nn, -0.5);
  return cfg.k * std::pow(static_cast<double>(cfg.d_model), cfg.dmodel_exponent) *
         std::min(decay, ramp);
}

double layer_multiplier(const LayerwiseConfig& cfg, int layer, int num_layers) {
  if (!(cfg.lambda > 0.0 && cfg.lambda < 1.0)) {
    throw ValueError("layer_multiplier: lambda must be in (0,1)");
  }
  if (layer < 1 || layer > num_layers) {
    throw ValueError("layer_multiplier: layer " + std::to_string(layer) +
                     " out of range [1," + std::to_string(num_layers) + "]");
  }
  return std::pow(cfg.lambda, std::fabs(static_cast<double>(layer) - cfg.theta));
}

double gamma_mpc(const MpcWeightSchedule& sched, int epoch) {
  if (epoch < 0) throw ValueError("gamma_mpc: epoch must be >= 0");
  if (sched.halve_every < 1) throw ValueError("gamma_mpc: halve_every must be >= 1");
  if (sched.gamma0 < 0.0) throw ValueError("gamma_mpc: gamma0 must be >= 0");
  return sched.gamma0 * std::pow(2.0, -static_cast<double>(epoch / sched.halve_every));
}

}  // namespace mpclab::schedules
