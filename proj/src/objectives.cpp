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

#include "mpclab/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace mpclab::objectives {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
  if (a == -kInf) return b;
  if (b == -kInf) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::fabs(a - b)));
}

}  // namespace

Tensor mpc_loss(Tape& tape, const Tensor& pred, const Tensor& target,
                const std::vector<bool>& frame_mask) {
  if (pred.rank() != 2 || pred.shape() != target.shape()) {
    throw ShapeError("mpc_loss: prediction " + Tensor::shape_str(pred.shape()) +
                     " vs target " + Tensor::shape_str(target.shape()));
  }
  if (static_cast<int>(frame_mask.size()) != pred.dim(0)) {
    throw ShapeError("mpc_loss: mask covers " + std::to_string(frame_mask.size()) +
                     " frames, tensors have " + std::to_string(pred.dim(0)));
  }
  const int t = pred.dim(0), d = pred.dim(1);
  int masked = 0;
  for (bool b : frame_mask) masked += b ? 1 : 0;
  if (masked == 0) return Tensor::scalar(0.0);

  std::vector<double> weights(pred.size(), 0.0);
  const double w = 1.0 / (static_cast<double>(masked) * d);
  for (int i = 0; i < t; ++i) {
    if (!frame_mask[static_cast<std::size_t>(i)]) continue;
    for (int j = 0; j < d; ++j) weights[static_cast<std::size_t>(i) * d + j] = w;
  }
  return tape.weighted_sum(tape.abs(tape.sub(pred, target)), weights);
}

Tensor apc_loss(Tape& tape, const Tensor& pred, const Tensor& target, int step,
                int valid) {
  if (step < 1) throw ValueError("apc_loss: step must be >= 1");
  if (pred.rank() != 2 || pred.shape() != target.shape()) {
    throw ShapeError("apc_loss: prediction " + Tensor::shape_str(pred.shape()) +
                     " vs target " + Tensor::shape_str(target.shape()));
  }
  if (valid < 0 || valid > pred.dim(0)) {
    throw ValueError("apc_loss: valid frame count out of range");
  }
  const int scored = valid - step;
  if (scored <= 0) return Tensor::scalar(0.0);

  const int d = pred.dim(1);
  // Shifted copy of the target: row u holds frame u + step.
  std::vector<double> shifted(pred.size(), 0.0);
  std::vector<double> weights(pred.size(), 0.0);
  const double w = 1.0 / (static_cast<double>(scored) * d);
  for (int u = 0; u < scored; ++u) {
    for (int j = 0; j < d; ++j) {
      shifted[static_cast<std::size_t>(u) * d + j] = target.at(u + step, j);
      weights[static_cast<std::size_t>(u) * d + j] = w;
    }
  }
  Tensor future = Tensor::from_data(pred.shape(), std::move(shifted), false);
  return tape.weighted_sum(tape.abs(tape.sub(pred, future)), weights);
}

Branch choose_branch(const UnifiedConfig& cfg, Rng& rng) {
  if (!(cfg.p >= 0.0 && cfg.p <= 1.0)) {
    throw ValueError("choose_branch: p must be in [0,1]");
  }
  return rng.uniform() < cfg.p ? Branch::kApc : Branch::kMpc;
}

Tensor ctc_loss(Tape& tape, const Tensor& logits, const std::vector<int>& label) {
  if (logits.rank() != 2) throw ShapeError("ctc_loss: logits must be [t',V]");
  const int t = logits.dim(0), v = logits.dim(1);
  for (int id : label) {
    if (id < 1 || id >= v) {
      throw ValueError("ctc_loss: label id " + std::to_string(id) +
                       " outside [1," + std::to_string(v) + ")");
    }
  }
  // Shortest feasible path: one frame per label plus a separating blank
  // between adjacent repeats.
  int min_frames = static_cast<int>(label.size());
  for (std::size_t i = 1; i < label.size(); ++i) {
    if (label[i] == label[i - 1]) ++min_frames;
  }
  if (min_frames > t) {
    throw DataError("ctc_loss: infeasible alignment, label needs " +
                    std::to_string(min_frames) + " frames but only " +
                    std::to_string(t) + " are available");
  }
  const int ext = 2 * static_cast<int>(label.size()) + 1;

  // Blank-extended label: blank, l1, blank, l2, ..., blank.
  std::vector<int> sym(static_cast<std::size_t>(ext), kBlankId);
  for (std::size_t i = 0; i < label.size(); ++i) sym[2 * i + 1] = label[i];

  // Row-wise log-softmax of the logits (plain arrays; the op is fused).
  std::vector<double> logp(logits.size());
  for (int i = 0; i < t; ++i) {
    const std::size_t base = static_cast<std::size_t>(i) * v;
    double mx = -kInf;
    for (int j = 0; j < v; ++j) mx = std::max(mx, logits.data()[base + j]);
    double denom = 0.0;
    for (int j = 0; j < v; ++j) denom += std::exp(logits.data()[base + j] - mx);
    const double lse = mx + std::log(denom);
    for (int j = 0; j < v; ++j) logp[base + j] = logits.data()[base + j] - lse;
  }
  auto lp = [&](int i, int s) {
    return logp[static_cast<std::size_t>(i) * v + sym[static_cast<std::size_t>(s)]];
  };
  auto can_skip = [&](int s) {
    return s >= 2 && sym[static_cast<std::size_t>(s)] != kBlankId &&
           sym[static_cast<std::size_t>(s)] != sym[static_cast<std::size_t>(s - 2)];
  };

  std::vector<double> alpha(static_cast<std::size_t>(t) * ext, -kInf);
  alpha[0] = lp(0, 0);
  if (ext > 1) alpha[1] = lp(0, 1);
  for (int i = 1; i < t; ++i) {
    const std::size_t row = static_cast<std::size_t>(i) * ext;
    const std::size_t prev = row - ext;
    for (int s = 0; s < ext; ++s) {
      double acc = alpha[prev + s];
      if (s >= 1) acc = log_add(acc, alpha[prev + s - 1]);
      if (can_skip(s)) acc = log_add(acc, alpha[prev + s - 2]);
      alpha[row + s] = acc == -kInf ? -kInf : acc + lp(i, s);
    }
  }
  double log_total = alpha[static_cast<std::size_t>(t - 1) * ext + ext - 1];
  if (ext > 1) {
    log_total = log_add(log_total,
                        alpha[static_cast<std::size_t>(t - 1) * ext + ext - 2]);
  }
  if (log_total == -kInf) {
    throw DataError("ctc_loss: no feasible alignment");
  }

  // Backward pass mirroring alpha; beta includes the local emission term.
  std::vector<double> beta(static_cast<std::size_t>(t) * ext, -kInf);
  beta[static_cast<std::size_t>(t - 1) * ext + ext - 1] = lp(t - 1, ext - 1);
  if (ext > 1)
    beta[static_cast<std::size_t>(t - 1) * ext + ext - 2] = lp(t - 1, ext - 2);
  for (int i = t - 2; i >= 0; --i) {
    const std::size_t row = static_cast<std::size_t>(i) * ext;
    const std::size_t next = row + ext;
    for (int s = 0; s < ext; ++s) {
      double acc = beta[next + s];
      if (s + 1 < ext) acc = log_add(acc, beta[next + s + 1]);
      if (s + 2 < ext && can_skip(s + 2)) acc = log_add(acc, beta[next + s + 2]);
      beta[row + s] = acc == -kInf ? -kInf : acc + lp(i, s);
    }
  }

  // d(-log P)/d logits = softmax - posterior occupancy per class.
  auto grad = std::make_shared<std::vector<double>>(logits.size());
  for (int i = 0; i < t; ++i) {
    const std::size_t base = static_cast<std::size_t>(i) * v;
    std::vector<double> occupancy(static_cast<std::size_t>(v), -kInf);
    for (int s = 0; s < ext; ++s) {
      const double gamma = alpha[static_cast<std::size_t>(i) * ext + s] +
                           beta[static_cast<std::size_t>(i) * ext + s] - lp(i, s);
      const int cls = sym[static_cast<std::size_t>(s)];
      occupancy[static_cast<std::size_t>(cls)] =
          log_add(occupancy[static_cast<std::size_t>(cls)], gamma);
    }
    for (int j = 0; j < v; ++j) {
      const double y = std::exp(logp[base + j]);
      const double post = occupancy[static_cast<std::size_t>(j)] == -kInf
                              ? 0.0
                              : std::exp(occupancy[static_cast<std::size_t>(j)] -
                                         log_total);
      (*grad)[base + j] = y - post;
    }
  }

  return tape.adopt({}, {-log_total}, {logits},
                    [grad](const std::vector<double>& up,
                           const std::vector<std::vector<double>*>& g) {
                      if (!g[0]) return;
                      for (std::size_t i = 0; i < grad->size(); ++i)
                        (*g[0])[i] += up[0] * (*grad)[i];
                    },
                    "ctc_loss");
}

Tensor attention_ce_loss(Tape& tape, const Tensor& logits,
                         const std::vector<int>& targets, double smoothing) {
  if (logits.rank() != 2) throw ShapeError("attention_ce_loss: logits must be [L,V]");
  const int length = logits.dim(0), v = logits.dim(1);
  if (static_cast<int>(targets.size()) != length) {
    throw ShapeError("attention_ce_loss: " + std::to_string(targets.size()) +
                     " targets for " + std::to_string(length) + " positions");
  }
  if (!(smoothing >= 0.0 && smoothing < 1.0)) {
    throw ValueError("attention_ce_loss: smoothing must be in [0,1)");
  }
  for (int id : targets) {
    if (id < 0 || id >= v) {
      throw ValueError("attention_ce_loss: target id " + std::to_string(id) +
                       " outside [0," + std::to_string(v) + ")");
    }
  }
  const double off = v > 1 ? smoothing / (v - 1) : 0.0;
  std::vector<double> weights(logits.size());
  for (int i = 0; i < length; ++i) {
    for (int j = 0; j < v; ++j) {
      const double q = (j == targets[static_cast<std::size_t>(i)])
                           ? 1.0 - smoothing
                           : off;
      weights[static_cast<std::size_t>(i) * v + j] = -q / length;
    }
  }
  return tape.weighted_sum(tape.log_softmax(logits), weights);
}

LossBreakdown joint_loss(Tape& tape, std::optional<Tensor> l_attn,
                         std::optional<Tensor> l_ctc, std::optional<Tensor> l_mpc,
                         double alpha_attn, double beta_ctc, double gamma_mpc) {
  if (alpha_attn < 0.0 || beta_ctc < 0.0 || gamma_mpc < 0.0) {
    throw ValueError("joint_loss: weights must be >= 0");
  }
  LossBreakdown out;
  Tensor attn = l_attn.value_or(Tensor::scalar(0.0));
  Tensor ctc = l_ctc.value_or(Tensor::scalar(0.0));
  Tensor mpc = l_mpc.value_or(Tensor::scalar(0.0));
  out.l_attn = attn.item();
  out.l_ctc = ctc.item();
  out.l_mpc = mpc.item();
  out.alpha_attn = l_attn ? alpha_attn : 0.0;
  out.beta_ctc = l_ctc ? beta_ctc : 0.0;
  out.gamma_mpc = l_mpc ? gamma_mpc : 0.0;
  out.total_node = tape.add(
      tape.add(tape.scale(attn, out.alpha_attn), tape.scale(ctc, out.beta_ctc)),
      tape.scale(mpc, out.gamma_mpc));
  out.total = out.total_node.item();
  return out;
}

std::vector<int> ctc_greedy_decode(const Tensor& logits) {
  if (logits.rank() != 2) throw ShapeError("ctc_greedy_decode: logits must be [t',V]");
  const int t = logits.dim(0), v = logits.dim(1);
  std::vector<int> out;
  int prev = -1;
  for (int i = 0; i < t; ++i) {
    int best = 0;
    for (int j = 1; j < v; ++j) {
      if (logits.at(i, j) > logits.at(i, best)) best = j;
    }
    if (best != prev && best != kBlankId) out.push_back(best);
    prev = best;
  }
  return out;
}

int edit_distance(const std::vector<int>& ref, const std::vector<int>& hyp) {
  const std::size_t n = ref.size(), m = hyp.size();
  std::vector<int> prev(m + 1), cur(m + 1);
  for (std::size_t j = 0; j <= m; ++j) prev[j] = static_cast<int>(j);
  for (std::size_t i = 1; i <= n; ++i) {
    cur[0] = static_cast<int>(i);
    for (std::size_t j = 1; j <= m; ++j) {
      const int sub = prev[j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

double cer(const std::vector<int>& ref, const std::vector<int>& hyp) {
  if (ref.empty()) throw ValueError("cer: reference must be non-empty");
  return static_cast<double>(edit_distance(ref, hyp)) /
         static_cast<double>(ref.size());
}

}  // namespace mpclab::objectives
