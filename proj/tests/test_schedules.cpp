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

#include <cmath>

#include "doctest.h"
#include "mpclab/schedules.hpp"
#include "mpclab/tensor.hpp"

using namespace mpclab;
using namespace mpclab::schedules;

TEST_CASE("lrate closed forms at the warmup point and step one") {
  WarmupConfig cfg{0.5, 5000, 256, 0.5};
  // At n == warmup_n both min() arguments coincide:
  //   0.5 * 256^0.5 * 5000^-0.5 = 8 / sqrt(5000).
  CHECK(lrate(cfg, 5000) ==
        doctest::Approx(8.0 / std::sqrt(5000.0)).epsilon(1e-12));
  CHECK(lrate(cfg, 5000) == doctest::Approx(0.11313708).epsilon(1e-7));
  // n = 1: 0.5 * 16 * 5000^-1.5.
  CHECK(lrate(cfg, 1) ==
        doctest::Approx(8.0 * std::pow(5000.0, -1.5)).epsilon(1e-12));
  CHECK(lrate(cfg, 1) == doctest::Approx(2.2627417e-5).epsilon(1e-6));
  CHECK_THROWS_AS(lrate(cfg, 0), ValueError);
}

TEST_CASE("lrate ramps up to warmup_n then decays") {
  WarmupConfig cfg{1.0, 200, 32, 0.5};
  double prev = lrate(cfg, 1);
  for (int n = 2; n <= 200; ++n) {
    const double cur = lrate(cfg, n);
    CHECK(cur >= prev);
    prev = cur;
  }
  double peak = lrate(cfg, 200);
  for (int n = 201; n <= 400; ++n) {
    const double cur = lrate(cfg, n);
    CHECK(cur <= prev);
    CHECK(cur <= peak);
    prev = cur;
  }
}

TEST_CASE("layer multiplier closed forms") {
  LayerwiseConfig cfg{0.95, 5.5};
  CHECK(layer_multiplier(cfg, 6, 12) ==
        doctest::Approx(std::pow(0.95, 0.5)).epsilon(1e-12));
  CHECK(layer_multiplier(cfg, 6, 12) == doctest::Approx(0.9746794).epsilon(1e-6));
  CHECK(layer_multiplier(cfg, 1, 12) ==
        doctest::Approx(std::pow(0.95, 4.5)).epsilon(1e-12));
  CHECK_THROWS_AS(layer_multiplier(cfg, 0, 12), ValueError);
  CHECK_THROWS_AS(layer_multiplier(cfg, 13, 12), ValueError);

  LayerwiseConfig integral{0.9, 3.0};
  CHECK(layer_multiplier(integral, 3, 6) == 1.0);
}

TEST_CASE("layer multiplier is symmetric about theta") {
  LayerwiseConfig cfg{0.95, 5.5};
  for (int x = 0; x <= 4; ++x) {
    const double left = layer_multiplier(cfg, 5 - x, 12);   // theta - (x+0.5)
    const double right = layer_multiplier(cfg, 6 + x, 12);  // theta + (x+0.5)
    CHECK(left == doctest::Approx(right).epsilon(1e-15));
  }
}

TEST_CASE("gamma_mpc follows the halving schedule") {
  MpcWeightSchedule sched{0.2, 5};
  for (int epoch = 0; epoch <= 4; ++epoch) CHECK(gamma_mpc(sched, epoch) == 0.2);
  CHECK(gamma_mpc(sched, 5) == 0.1);
  CHECK(gamma_mpc(sched, 9) == 0.1);
  CHECK(gamma_mpc(sched, 10) == 0.05);

  MpcWeightSchedule fast{0.2, 1};
  CHECK(gamma_mpc(fast, 3) == doctest::Approx(0.025).epsilon(1e-15));

  double prev = gamma_mpc(sched, 0);
  for (int epoch = 1; epoch < 30; ++epoch) {
    const double cur = gamma_mpc(sched, epoch);
    CHECK(cur <= prev);
    if (epoch % sched.halve_every != 0) {
      CHECK(cur == gamma_mpc(sched, epoch - 1));
    }
    prev = cur;
  }
}

TEST_CASE("a scaled learning rate scales the whole first Adam update") {
  using numerics::AdamState;
  using numerics::ParamMap;
  using numerics::Tape;
  using numerics::Tensor;

  LayerwiseConfig cfg{0.95, 5.5};
  const double mult = layer_multiplier(cfg, 2, 4);

  ParamMap plain, scaled;
  plain["enc.layer1.attn.wq"] =
      Tensor::from_data({2}, {0.25, -0.75}, true);
  scaled["enc.layer1.attn.wq"] = plain["enc.layer1.attn.wq"].clone();
  auto grads = [](ParamMap& p) {
    Tape tape;
    Tensor leaf = p.begin()->second;
    return tape.backward(tape.weighted_sum(leaf, {0.9, 1.1}));
  };

  const std::vector<double> before = plain.begin()->second.data();
  AdamState s1, s2;
  auto g1 = grads(plain);
  auto g2 = grads(scaled);
  numerics::adam_step(plain, g1, s1, 0.01, 0.0);
  numerics::adam_step(scaled, g2, s2, 0.01, 0.0,
                      [&](const std::string&) { return mult; });
  for (std::size_t i = 0; i < before.size(); ++i) {
    const double base_update = plain.begin()->second.data()[i] - before[i];
    const double scaled_update = scaled.begin()->second.data()[i] - before[i];
    CHECK(std::fabs(scaled_update - mult * base_update) < 1e-12);
  }
}
