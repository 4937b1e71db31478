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
#include <limits>

#include "doctest.h"
#include "mpclab/tensor.hpp"
#include "oracles.hpp"

using namespace mpclab;
using numerics::adam_step;
using numerics::AdamState;
using numerics::AdditiveMask;
using numerics::Gradients;
using numerics::ParamMap;
using numerics::Tape;
using numerics::Tensor;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

Tensor random_tensor(std::vector<int> shape, Rng& rng, bool requires_grad = true,
                     double scale = 1.0) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  std::vector<double> v(n);
  for (double& x : v) x = rng.normal() * scale;
  return Tensor::from_data(std::move(shape), std::move(v), requires_grad);
}

std::vector<double> random_weights(std::size_t n, Rng& rng) {
  std::vector<double> w(n);
  for (double& x : w) x = rng.normal();
  return w;
}

// Checks one differentiable op against central finite differences by
// reducing its output to a scalar with fixed random weights.
void check_gradient(const std::vector<Tensor>& leaves,
                    const std::function<Tensor(Tape&)>& forward,
                    double tolerance) {
  Rng rng(99);
  Tape probe;
  Tensor out = forward(probe);
  const std::vector<double> w = random_weights(out.size(), rng);

  auto eval = [&]() {
    Tape tape;
    Tensor o = forward(tape);
    double s = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) s += o.data()[i] * w[i];
    return s;
  };

  Tape tape;
  Tensor loss = tape.weighted_sum(forward(tape), w);
  Gradients grads = tape.backward(loss);
  for (const Tensor& leaf : leaves) {
    const std::vector<double> analytic = grads.wrt(leaf);
    const std::vector<double> numeric = oracles::finite_difference(leaf, eval);
    CAPTURE(oracles::max_rel_error(analytic, numeric));
    CHECK(oracles::max_rel_error(analytic, numeric) < tolerance);
  }
}

}  // namespace

TEST_CASE("tensor construction enforces the shape/data invariant") {
  CHECK_THROWS_AS(Tensor::from_data({2, 2}, {1.0, 2.0, 3.0}), ShapeError);
  CHECK_THROWS_AS(Tensor::from_data({0}, {}), ShapeError);
  Tensor s = Tensor::scalar(4.0);
  CHECK(s.rank() == 0);
  CHECK(s.item() == 4.0);
}

TEST_CASE("matmul identity and hand arithmetic") {
  Tape tape;
  Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  Tensor b = Tensor::from_data({2, 2}, {5, 6, 7, 8});
  Tensor prod = tape.matmul(eye, b);
  CHECK(prod.data() == std::vector<double>{5, 6, 7, 8});

  Tensor row = Tensor::from_data({1, 2}, {1, 2});
  Tensor col = Tensor::from_data({2, 1}, {3, 4});
  CHECK(tape.matmul(row, col).item() == 11.0);
}

TEST_CASE("matmul rejects mismatched inner dimensions and names both shapes") {
  Tape tape;
  Tensor a = Tensor::from_data({2, 3}, std::vector<double>(6, 1.0));
  Tensor b = Tensor::from_data({2, 2}, std::vector<double>(4, 1.0));
  try {
    tape.matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[2,2]") != std::string::npos);
  }
}

TEST_CASE("matmul gradient matches finite differences") {
  Rng rng(7);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({4, 2}, rng);
  check_gradient({a, b}, [&](Tape& t) { return t.matmul(a, b); }, 1e-6);
}

TEST_CASE("masked_softmax handles single-survivor, symmetric and open rows") {
  Tape tape;
  SUBCASE("single survivor") {
    AdditiveMask mask{1, 3, {0.0, -kInf, -kInf}};
    Tensor p = tape.masked_softmax(Tensor::from_data({3}, {0, 0, 0}), mask);
    CHECK(p.data()[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(p.data()[1] == 0.0);
    CHECK(p.data()[2] == 0.0);
  }
  SUBCASE("symmetry") {
    AdditiveMask mask{1, 2, {0.0, 0.0}};
    Tensor p = tape.masked_softmax(Tensor::from_data({2}, {0, 0}), mask);
    CHECK(p.data()[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(p.data()[1] == doctest::Approx(0.5).epsilon(1e-12));
  }
  SUBCASE("plain softmax when the mask is all zero") {
    // exp-normalize of [1,2,3], evaluated directly.
    const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
    AdditiveMask mask{1, 3, {0.0, 0.0, 0.0}};
    Tensor p = tape.masked_softmax(Tensor::from_data({3}, {1, 2, 3}), mask);
    CHECK(p.data()[0] == doctest::Approx(std::exp(1.0) / z).epsilon(1e-10));
    CHECK(p.data()[1] == doctest::Approx(std::exp(2.0) / z).epsilon(1e-10));
    CHECK(p.data()[2] == doctest::Approx(std::exp(3.0) / z).epsilon(1e-10));
    CHECK(p.data()[0] == doctest::Approx(0.09003057).epsilon(1e-6));
    CHECK(p.data()[1] == doctest::Approx(0.24472847).epsilon(1e-6));
    CHECK(p.data()[2] == doctest::Approx(0.66524096).epsilon(1e-6));
  }
  SUBCASE("fully blocked row is a hard error") {
    AdditiveMask mask{1, 2, {-kInf, -kInf}};
    CHECK_THROWS_AS(tape.masked_softmax(Tensor::from_data({2}, {0, 0}), mask),
                    ValueError);
  }
  SUBCASE("mask entries other than 0/-inf are rejected") {
    AdditiveMask mask{1, 2, {0.0, -1.0}};
    CHECK_THROWS_AS(tape.masked_softmax(Tensor::from_data({2}, {0, 0}), mask),
                    ValueError);
  }
}

TEST_CASE("masked rows always sum to one") {
  Rng rng(11);
  for (int iter = 0; iter < 20; ++iter) {
    const int t = 2 + rng.uniform_int(5);
    Tensor logits = random_tensor({t, t}, rng, false, 2.0);
    AdditiveMask mask{t, t, std::vector<double>(static_cast<std::size_t>(t) * t, 0.0)};
    // Causal-style random blocking that keeps the diagonal open.
    for (int i = 0; i < t; ++i)
      for (int j = 0; j < t; ++j)
        if (j != i && rng.uniform() < 0.4)
          mask.bias[static_cast<std::size_t>(i) * t + j] = -kInf;
    Tape tape;
    Tensor p = tape.masked_softmax(logits, mask);
    for (int i = 0; i < t; ++i) {
      double s = 0.0;
      for (int j = 0; j < t; ++j) s += p.at(i, j);
      CHECK(std::fabs(s - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("masked_softmax gradient matches finite differences") {
  Rng rng(13);
  Tensor logits = random_tensor({4, 4}, rng);
  AdditiveMask mask{4, 4, std::vector<double>(16, 0.0)};
  for (int i = 0; i < 4; ++i)
    for (int j = i + 1; j < 4; ++j) mask.bias[static_cast<std::size_t>(i) * 4 + j] = -kInf;
  check_gradient({logits}, [&](Tape& t) { return t.masked_softmax(logits, mask); },
                 1e-6);
}

TEST_CASE("layer_norm constant and symmetric rows") {
  Tape tape;
  Tensor gain = Tensor::from_data({4}, {1, 1, 1, 1});
  Tensor bias = Tensor::from_data({4}, {0, 0, 0, 0});
  Tensor y = tape.layer_norm(Tensor::from_data({4}, {1, 1, 1, 1}), gain, bias);
  for (double v : y.data()) CHECK(v == 0.0);

  Tensor g2 = Tensor::from_data({2}, {1, 1});
  Tensor b2 = Tensor::from_data({2}, {0, 0});
  Tensor y2 = tape.layer_norm(Tensor::from_data({2}, {-1, 1}), g2, b2);
  CHECK(y2.data()[0] == doctest::Approx(-1.0).epsilon(1e-5));
  CHECK(y2.data()[1] == doctest::Approx(1.0).epsilon(1e-5));

  CHECK_THROWS_AS(tape.layer_norm(Tensor::from_data({1}, {3.0}),
                                  Tensor::from_data({1}, {1.0}),
                                  Tensor::from_data({1}, {0.0})),
                  ValueError);
}

TEST_CASE("layer_norm gradient matches finite differences") {
  Rng rng(17);
  Tensor x = random_tensor({2, 8}, rng);
  Tensor gain = random_tensor({8}, rng);
  Tensor bias = random_tensor({8}, rng);
  check_gradient({x, gain, bias},
                 [&](Tape& t) { return t.layer_norm(x, gain, bias); }, 1e-6);
}

TEST_CASE("conv1d identity kernel, strided subsampling, parity guard") {
  Tape tape;
  Tensor x = Tensor::from_data({4, 1}, {1, 2, 3, 4});
  Tensor identity = Tensor::from_data({3, 1, 1}, {0, 1, 0});
  CHECK(tape.conv1d(x, identity, 1).data() == std::vector<double>{1, 2, 3, 4});
  CHECK(tape.conv1d(x, identity, 2).data() == std::vector<double>{1, 3});

  Tensor even = Tensor::from_data({2, 1, 1}, {1, 1});
  CHECK_THROWS_AS(tape.conv1d(x, even, 1), ValueError);
}

TEST_CASE("conv1d output length is ceil(t/stride)") {
  Tape tape;
  Tensor k = Tensor::from_data({3, 1, 1}, {0.5, 1.0, -0.5});
  for (int t = 1; t <= 9; ++t) {
    Tensor x = Tensor::from_data({t, 1}, std::vector<double>(t, 1.0));
    for (int stride = 1; stride <= 3; ++stride) {
      CHECK(tape.conv1d(x, k, stride).dim(0) == (t + stride - 1) / stride);
    }
  }
}

TEST_CASE("conv1d gradient matches finite differences") {
  Rng rng(19);
  Tensor x = random_tensor({8, 2}, rng);
  Tensor k = random_tensor({3, 2, 2}, rng);
  check_gradient({x, k}, [&](Tape& t) { return t.conv1d(x, k, 2); }, 1e-6);
}

TEST_CASE("elementwise ops' gradients match finite differences") {
  Rng rng(23);
  Tensor a = random_tensor({3, 5}, rng);
  Tensor b = random_tensor({3, 5}, rng);
  Tensor bias = random_tensor({5}, rng);
  check_gradient({a, b}, [&](Tape& t) { return t.add(a, b); }, 1e-6);
  check_gradient({a, b}, [&](Tape& t) { return t.sub(a, b); }, 1e-6);
  check_gradient({a, b}, [&](Tape& t) { return t.mul(a, b); }, 1e-6);
  check_gradient({a}, [&](Tape& t) { return t.scale(a, -1.7); }, 1e-6);
  check_gradient({a, bias}, [&](Tape& t) { return t.add_bias(a, bias); }, 1e-6);
  check_gradient({a}, [&](Tape& t) { return t.relu(a); }, 1e-5);
  check_gradient({a}, [&](Tape& t) { return t.abs(a); }, 1e-5);
  check_gradient({a}, [&](Tape& t) { return t.transpose(a); }, 1e-6);
  check_gradient({a}, [&](Tape& t) { return t.reshape(a, {5, 3}); }, 1e-6);
  check_gradient({a}, [&](Tape& t) { return t.slice_cols(a, 1, 4); }, 1e-6);
  check_gradient({a, b}, [&](Tape& t) { return t.concat_cols({a, b}); }, 1e-6);
  check_gradient({a}, [&](Tape& t) { return t.log_softmax(a); }, 1e-6);
}

TEST_CASE("gather_rows accumulates repeated ids and validates range") {
  Rng rng(29);
  Tensor table = random_tensor({4, 3}, rng);
  check_gradient({table},
                 [&](Tape& t) { return t.gather_rows(table, {2, 0, 2, 3}); },
                 1e-6);
  Tape tape;
  CHECK_THROWS_AS(tape.gather_rows(table, {4}), ValueError);
  CHECK_THROWS_AS(tape.gather_rows(table, {-1}), ValueError);
}

TEST_CASE("forward ops reject non-finite results") {
  Tape tape;
  Tensor big = Tensor::from_data({2}, {1e308, 1e308});
  CHECK_THROWS_AS(tape.add(big, big), ValueError);
}

TEST_CASE("backward basics: sum, square, and error paths") {
  SUBCASE("loss = sum(x) gives all-ones") {
    Tape tape;
    Tensor x = Tensor::from_data({2, 2}, {1, 2, 3, 4}, true);
    Gradients g = tape.backward(tape.sum(x));
    CHECK(g.wrt(x) == std::vector<double>{1, 1, 1, 1});
  }
  SUBCASE("loss = x*x at x=3 gives 6") {
    Tape tape;
    Tensor x = Tensor::scalar(3.0, true);
    Gradients g = tape.backward(tape.mul(x, x));
    CHECK(g.wrt(x)[0] == doctest::Approx(6.0).epsilon(1e-12));
  }
  SUBCASE("non-scalar loss is rejected") {
    Tape tape;
    Tensor x = Tensor::from_data({2}, {1, 2}, true);
    Tensor y = tape.scale(x, 2.0);
    CHECK_THROWS_AS(tape.backward(y), ShapeError);
  }
  SUBCASE("unreachable leaf gets exactly zero") {
    Tape tape;
    Tensor x = Tensor::from_data({2}, {1, 2}, true);
    Tensor orphan = Tensor::from_data({3}, {1, 2, 3}, true);
    Tensor loss = tape.sum(tape.scale(x, 2.0));
    (void)tape.scale(orphan, 5.0);  // on the tape, but not feeding the loss
    Gradients g = tape.backward(loss);
    CHECK(g.wrt(orphan) == std::vector<double>{0, 0, 0});
    CHECK(g.find(orphan) == nullptr);
  }
  SUBCASE("reuse accumulates additively") {
    Tape tape;
    Tensor x = Tensor::scalar(2.0, true);
    Tensor y = tape.add(tape.scale(x, 3.0), tape.scale(x, 4.0));
    Gradients g = tape.backward(y);
    CHECK(g.wrt(x)[0] == 7.0);
  }
}

TEST_CASE("backward is linear in the loss") {
  Rng rng(31);
  for (int iter = 0; iter < 5; ++iter) {
    Tensor x = random_tensor({3, 3}, rng);
    Tensor y = random_tensor({3, 3}, rng);
    const double a = rng.normal(), b = rng.normal();

    auto build = [&](Tape& t, int which) {
      Tensor l1 = t.sum(t.mul(t.matmul(x, y), x));
      Tensor l2 = t.weighted_sum(t.relu(t.matmul(y, x)),
                                 std::vector<double>(9, 0.5));
      if (which == 1) return l1;
      if (which == 2) return l2;
      return t.add(t.scale(l1, a), t.scale(l2, b));
    };

    Tape t1, t2, t3;
    Gradients g1 = t1.backward(build(t1, 1));
    Gradients g2 = t2.backward(build(t2, 2));
    Gradients g3 = t3.backward(build(t3, 3));
    for (const Tensor& leaf : {x, y}) {
      const auto v1 = g1.wrt(leaf), v2 = g2.wrt(leaf), v3 = g3.wrt(leaf);
      for (std::size_t i = 0; i < v3.size(); ++i) {
        CHECK(std::fabs(v3[i] - (a * v1[i] + b * v2[i])) < 1e-10);
      }
    }
  }
}

TEST_CASE("forward and backward are bitwise deterministic") {
  Rng rng(37);
  Tensor x = random_tensor({4, 4}, rng);
  Tensor k = random_tensor({3, 4, 2}, rng);
  auto run = [&]() {
    Tape tape;
    Tensor h = tape.relu(tape.conv1d(x, k, 2));
    Tensor loss = tape.sum(tape.matmul(tape.transpose(h), h));
    Gradients g = tape.backward(loss);
    return std::make_pair(loss.item(), g.wrt(x));
  };
  const auto [l1, g1] = run();
  const auto [l2, g2] = run();
  CHECK(l1 == l2);
  CHECK(g1 == g2);
}

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
  ParamMap params;
  params["p"] = Tensor::from_data({3}, {1.0, -2.0, 0.5}, true);
  AdamState state;
  Tape tape;
  Tensor unrelated = Tensor::scalar(1.0, true);
  Gradients g = tape.backward(tape.scale(unrelated, 1.0));
  adam_step(params, g, state, 0.1, 0.0);
  CHECK(params["p"].data() == std::vector<double>{1.0, -2.0, 0.5});
  CHECK(state.step == 1);
}

TEST_CASE("adam: first step matches the hand-evaluated recurrence") {
  // p=1, grad=1, lr=0.1: bias-corrected mhat=vhat=1, so p' = 1 - 0.1/(1+1e-8).
  ParamMap params;
  params["p"] = Tensor::from_data({1}, {1.0}, true);
  AdamState state;
  Tape tape;
  Tensor leaf = params["p"];
  Gradients g = tape.backward(tape.sum(leaf));
  adam_step(params, g, state, 0.1, 0.0);
  CHECK(params["p"].data()[0] ==
        doctest::Approx(1.0 - 0.1 / (1.0 + 1e-8)).epsilon(1e-12));
  CHECK(params["p"].data()[0] == doctest::Approx(0.9).epsilon(1e-7));
}

TEST_CASE("adam: consecutive steps agree with the scalar oracle to 1e-12") {
  ParamMap params;
  params["p"] = Tensor::from_data({1}, {1.0}, true);
  AdamState state;
  oracles::ScalarAdam ref;
  double expect = 1.0;
  for (int step = 0; step < 2; ++step) {
    Tape tape;
    Tensor leaf = params["p"];
    Gradients g = tape.backward(tape.scale(tape.sum(leaf), 1.0));
    adam_step(params, g, state, 0.05, 0.01);
    expect = ref.update(expect, 1.0, 0.05, 0.01);
    CHECK(params["p"].data()[0] == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("adam: stale accumulator shapes are rejected") {
  ParamMap params;
  params["p"] = Tensor::from_data({2}, {1.0, 2.0}, true);
  AdamState state;
  state.m["p"] = {0.0};
  state.v["p"] = {0.0};
  Tape tape;
  Tensor leaf = params["p"];
  Gradients g = tape.backward(tape.sum(leaf));
  CHECK_THROWS_AS(adam_step(params, g, state, 0.1, 0.0), ShapeError);
}

TEST_CASE("adam: per-name lr scaling multiplies the whole update") {
  ParamMap a, b;
  a["enc.w"] = Tensor::from_data({2}, {0.3, -0.4}, true);
  b["enc.w"] = a["enc.w"].clone();
  AdamState sa, sb;
  auto grad_for = [](ParamMap& p) {
    Tape tape;
    Tensor leaf = p["enc.w"];
    return tape.backward(tape.weighted_sum(leaf, {1.5, -2.0}));
  };
  Gradients ga = grad_for(a);
  Gradients gb = grad_for(b);
  adam_step(a, ga, sa, 0.02, 0.0);
  adam_step(b, gb, sb, 0.01, 0.0, [](const std::string&) { return 2.0; });
  // Same effective rate on a zeroed state: identical bias-corrected update.
  CHECK(a["enc.w"].data()[0] == doctest::Approx(b["enc.w"].data()[0]).epsilon(1e-15));
  CHECK(a["enc.w"].data()[1] == doctest::Approx(b["enc.w"].data()[1]).epsilon(1e-15));
}
