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

#include <optional>
#include <vector>

#include "mpclab/common.hpp"
#include "mpclab/tensor.hpp"

namespace mpclab::objectives {

using numerics::Tape;
using numerics::Tensor;

// Blank/bos/eos all share id 0; content tokens are 1..V-1.
constexpr int kBlankId = 0;

// Components of the joint fine-tuning loss
//   total = alpha_attn * l_attn + beta_ctc * l_ctc + gamma_mpc * l_mpc
// evaluated in that fixed order. Absent components contribute 0 with
// weight 0. `total_node` carries the differentiable scalar.
struct LossBreakdown {
  double l_attn = 0.0;
  double l_ctc = 0.0;
  double l_mpc = 0.0;
  double alpha_attn = 0.0;
  double beta_ctc = 0.0;
  double gamma_mpc = 0.0;
  double total = 0.0;
  Tensor total_node;
};

struct ApcConfig {
  int step = 5;  // future prediction offset
};

struct UnifiedConfig {
  double p = 0.5;  // probability of drawing the causal/future branch
};

enum class Branch { kMpc, kApc };

// Mean absolute error over every (masked frame, bin) element; exactly 0
// with an empty mask (that feed simply contributes no reconstruction
// signal).
Tensor mpc_loss(Tape& tape, const Tensor& pred, const Tensor& target,
                const std::vector<bool>& frame_mask);

// Mean absolute error between prediction at frame u and the target frame
// u + step over u in [0, valid - step); 0 when no position is predictable.
Tensor apc_loss(Tape& tape, const Tensor& pred, const Tensor& target, int step,
                int valid);

// One draw per batch: the APC branch (causal mask, future prediction) with
// probability p, otherwise the MPC branch (full mask, chunk masking).
Branch choose_branch(const UnifiedConfig& cfg, Rng& rng);

// Negative log probability of all blank-augmented monotonic alignments,
// computed by the forward dynamic program in log space. logits are
// pre-softmax [t', V]; label ids must be in [1, V) and satisfy
// 2*len+1 <= t'. The empty label is legal (all-blank path).
Tensor ctc_loss(Tape& tape, const Tensor& logits, const std::vector<int>& label);

// Mean label-smoothed cross-entropy: target mass 1-eps on the reference
// id, eps/(V-1) spread over the rest.
Tensor attention_ce_loss(Tape& tape, const Tensor& logits,
                         const std::vector<int>& targets, double smoothing = 0.1);

LossBreakdown joint_loss(Tape& tape, std::optional<Tensor> l_attn,
                         std::optional<Tensor> l_ctc, std::optional<Tensor> l_mpc,
                         double alpha_attn, double beta_ctc, double gamma_mpc);

// Per-frame argmax, collapse repeats, drop blanks.
std::vector<int> ctc_greedy_decode(const Tensor& logits);

int edit_distance(const std::vector<int>& ref, const std::vector<int>& hyp);

// Levenshtein distance divided by the reference length.
double cer(const std::vector<int>& ref, const std::vector<int>& hyp);

}  // namespace mpclab::objectives
