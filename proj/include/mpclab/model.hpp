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

#include <string>
#include <vector>

#include "mpclab/common.hpp"
#include "mpclab/tensor.hpp"

namespace mpclab::model {

using numerics::AdditiveMask;
using numerics::ParamMap;
using numerics::Tape;
using numerics::Tensor;

// Architecture hyperparameters. The downsample rate is fixed at 4 (two
// stride-2 prenet layers); everything else scales freely as long as
// d_model divides evenly into heads.
struct ModelConfig {
  int encoder_layers = 4;   // e
  int decoder_layers = 2;   // d
  int d_model = 32;
  int d_ff = 64;
  int heads = 4;
  int downsample = 4;       // r
  int feat_dim = 40;        // D
  int vocab_size = 8;       // V, includes blank id 0
  int prenet_channels = 32;

  void validate() const;
  bool same_architecture(const ModelConfig& other) const;
};

// Self-attention bias. Full attends everywhere; Causal blocks position i
// from seeing any j > i (strict upper triangle set to -inf).
struct AttentionMask {
  enum class Kind { kFull, kCausal };
  Kind kind = Kind::kFull;
  AdditiveMask mat;
};

AttentionMask full_mask(int rows, int cols);
AttentionMask full_mask(int t);
AttentionMask causal_mask(int t);

// Parameter sections, by hierarchical name prefix:
//   prenet.*   two conv layers plus the projection into d_model
//   enc.layerI.*  per-layer attention / norms / feed-forward
//   mpc.*      reconstruction head (d_model -> D*r)
//   dec.*      token embedding, decoder layers, output projection
//   ctc.*      output projection (d_model -> V)
// Deterministic in (config, seed); weights are uniform with gain
// 1/sqrt(fan_in), biases zero, norm gains one.
ParamMap init_params(const ModelConfig& cfg, std::uint64_t seed);

// Subset of params whose names start with any of the given prefixes.
ParamMap sections(const ParamMap& params, const std::vector<std::string>& prefixes);

// 1-based encoder layer index recovered from a parameter name, or 0 when
// the parameter does not belong to an encoder layer.
int encoder_layer_of(const std::string& name);

// Sinusoidal absolute positions, [t, d_model], no trainable parts.
Tensor positional_encoding(int t, int d_model);

// conv(stride 2, k 3) -> relu -> conv(stride 2, k 3) -> relu -> linear.
// Input [T, D] with T divisible by 4; output [T/4, d_model]. Output
// position j sees input frames [4j-3, 4j+3] only.
Tensor prenet_forward(Tape& tape, const Tensor& x, const ParamMap& params,
                      const ModelConfig& cfg);

// Pre-norm transformer stack; returns every layer's output (h_1 .. h_e),
// which the probing stage consumes. No normalization is applied after the
// last layer, so truncating to l layers reproduces the full run's l-th
// output exactly.
std::vector<Tensor> encoder_forward(Tape& tape, const Tensor& h0,
                                    const AttentionMask& mask,
                                    const ParamMap& params,
                                    const ModelConfig& cfg);

// prenet -> *sqrt(d_model) -> +positions -> encoder. The standard entry
// point for feature sequences; returns all encoder layer outputs.
std::vector<Tensor> encode_features(Tape& tape, const Tensor& x,
                                    const AttentionMask& mask,
                                    const ParamMap& params,
                                    const ModelConfig& cfg);

// Linear map of each encoder position to D*r values, reshaped so position
// u block b lands on predicted frame u*r + b. Output shape matches the
// original [t, D] input features.
Tensor mpc_projection_reshape(Tape& tape, const Tensor& h_last,
                              const ParamMap& params, int r, int feat_dim);

// Teacher-forced decoder: causal self-attention over embedded tokens plus
// cross-attention into the encoder output; returns [L, V] logits.
Tensor decoder_forward(Tape& tape, const std::vector<int>& tokens,
                       const Tensor& enc_out, const ParamMap& params,
                       const ModelConfig& cfg);

// Per-position vocabulary logits for the CTC branch, [t', V].
Tensor ctc_head(Tape& tape, const Tensor& enc_out, const ParamMap& params);

}  // namespace mpclab::model
