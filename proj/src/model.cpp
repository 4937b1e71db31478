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

#include "mpclab/model.hpp"

#include <cmath>
#include <limits>

namespace mpclab::model {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

Tensor param(const ParamMap& params, const std::string& name) {
  auto it = params.find(name);
  if (it == params.end()) throw ValueError("missing parameter '" + name + "'");
  return it->second;
}

// q_in [tq, d_model] attends over kv_in [tk, d_model] through the weights
// under `prefix` (wq/bq/wk/bk/wv/bv/wo/bo).
Tensor multi_head_attention(Tape& tape, const Tensor& q_in, const Tensor& kv_in,
                            const AttentionMask& mask, const ParamMap& params,
                            const std::string& prefix, int heads) {
  const int d_model = q_in.dim(1);
  const int d_head = d_model / heads;
  Tensor q = tape.add_bias(tape.matmul(q_in, param(params, prefix + "wq")),
                           param(params, prefix + "bq"));
  Tensor k = tape.add_bias(tape.matmul(kv_in, param(params, prefix + "wk")),
                           param(params, prefix + "bk"));
  Tensor v = tape.add_bias(tape.matmul(kv_in, param(params, prefix + "wv")),
                           param(params, prefix + "bv"));
  std::vector<Tensor> contexts;
  contexts.reserve(static_cast<std::size_t>(heads));
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(d_head));
  for (int h = 0; h < heads; ++h) {
    Tensor qh = tape.slice_cols(q, h * d_head, (h + 1) * d_head);
    Tensor kh = tape.slice_cols(k, h * d_head, (h + 1) * d_head);
    Tensor vh = tape.slice_cols(v, h * d_head, (h + 1) * d_head);
    Tensor scores = tape.scale(tape.matmul(qh, tape.transpose(kh)), inv_sqrt);
    Tensor probs = tape.masked_softmax(scores, mask.mat);
    contexts.push_back(tape.matmul(probs, vh));
  }
  Tensor ctx = tape.concat_cols(contexts);
  return tape.add_bias(tape.matmul(ctx, param(params, prefix + "wo")),
                       param(params, prefix + "bo"));
}

Tensor feed_forward(Tape& tape, const Tensor& h, const ParamMap& params,
                    const std::string& prefix) {
  Tensor a = tape.relu(tape.add_bias(tape.matmul(h, param(params, prefix + "w1")),
                                     param(params, prefix + "b1")));
  return tape.add_bias(tape.matmul(a, param(params, prefix + "w2")),
                       param(params, prefix + "b2"));
}

Tensor pre_norm(Tape& tape, const Tensor& h, const ParamMap& params,
                const std::string& prefix) {
  return tape.layer_norm(h, param(params, prefix + "gain"),
                         param(params, prefix + "bias"));
}

}  // namespace

void ModelConfig::validate() const {
  if (encoder_layers < 1) throw ValueError("ModelConfig: encoder_layers must be >= 1");
  if (decoder_layers < 1) throw ValueError("ModelConfig: decoder_layers must be >= 1");
  if (d_model < 2) throw ValueError("ModelConfig: d_model must be >= 2");
  if (heads < 1 || d_model % heads != 0) {
    throw ValueError("ModelConfig: d_model must divide evenly into heads");
  }
  if (downsample != 4) throw ValueError("ModelConfig: downsample rate is fixed at 4");
  if (d_ff < 1) throw ValueError("ModelConfig: d_ff must be >= 1");
  if (feat_dim < 1) throw ValueError("ModelConfig: feat_dim must be >= 1");
  if (vocab_size < 2) throw ValueError("ModelConfig: vocab_size must be >= 2");
  if (prenet_channels < 1) throw ValueError("ModelConfig: prenet_channels must be >= 1");
}

bool ModelConfig::same_architecture(const ModelConfig& other) const {
  return encoder_layers == other.encoder_layers &&
         decoder_layers == other.decoder_layers && d_model == other.d_model &&
         d_ff == other.d_ff && heads == other.heads &&
         downsample == other.downsample && feat_dim == other.feat_dim &&
         vocab_size == other.vocab_size &&
         prenet_channels == other.prenet_channels;
}

AttentionMask full_mask(int rows, int cols) {
  if (rows < 1 || cols < 1) throw ValueError("full_mask: size must be >= 1");
  AttentionMask m;
  m.kind = AttentionMask::Kind::kFull;
  m.mat.rows = rows;
  m.mat.cols = cols;
  m.mat.bias.assign(static_cast<std::size_t>(rows) * cols, 0.0);
  return m;
}

AttentionMask full_mask(int t) { return full_mask(t, t); }

AttentionMask causal_mask(int t) {
  if (t < 1) throw ValueError("causal_mask: t must be >= 1");
  AttentionMask m;
  m.kind = AttentionMask::Kind::kCausal;
  m.mat.rows = t;
  m.mat.cols = t;
  m.mat.bias.assign(static_cast<std::size_t>(t) * t, 0.0);
  for (int i = 0; i < t; ++i)
    for (int j = i + 1; j < t; ++j)
      m.mat.bias[static_cast<std::size_t>(i) * t + j] = -kInf;
  return m;
}

ParamMap init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(mix_seed(seed, 0x70617261));  // independent init stream

  ParamMap p;
  auto weight = [&](const std::string& name, int in, int out) {
    const double g = 1.0 / std::sqrt(static_cast<double>(in));
    std::vector<double> v(static_cast<std::size_t>(in) * out);
    for (double& x : v) x = (2.0 * rng.uniform() - 1.0) * g;
    p[name] = Tensor::from_data({in, out}, std::move(v), true);
  };
  auto kernel = [&](const std::string& name, int kw, int cin, int cout) {
    const double g = 1.0 / std::sqrt(static_cast<double>(kw * cin));
    std::vector<double> v(static_cast<std::size_t>(kw) * cin * cout);
    for (double& x : v) x = (2.0 * rng.uniform() - 1.0) * g;
    p[name] = Tensor::from_data({kw, cin, cout}, std::move(v), true);
  };
  auto bias = [&](const std::string& name, int n) {
    p[name] = Tensor::zeros({n}, true);
  };
  auto norm = [&](const std::string& prefix) {
    p[prefix + "gain"] = Tensor::from_data(
        {cfg.d_model}, std::vector<double>(static_cast<std::size_t>(cfg.d_model), 1.0), true);
    bias(prefix + "bias", cfg.d_model);
  };
  auto attention = [&](const std::string& prefix) {
    weight(prefix + "wq", cfg.d_model, cfg.d_model);
    bias(prefix + "bq", cfg.d_model);
    weight(prefix + "wk", cfg.d_model, cfg.d_model);
    bias(prefix + "bk", cfg.d_model);
    weight(prefix + "wv", cfg.d_model, cfg.d_model);
    bias(prefix + "bv", cfg.d_model);
    weight(prefix + "wo", cfg.d_model, cfg.d_model);
    bias(prefix + "bo", cfg.d_model);
  };

  // Draw order is part of the contract: prenet, encoder, reconstruction
  // head, decoder, ctc. Stages that rebuild a section fresh rely on the
  // section's draws being independent of which other sections get kept.
  kernel("prenet.conv1.kernel", 3, cfg.feat_dim, cfg.prenet_channels);
  bias("prenet.conv1.bias", cfg.prenet_channels);
  kernel("prenet.conv2.kernel", 3, cfg.prenet_channels, cfg.prenet_channels);
  bias("prenet.conv2.bias", cfg.prenet_channels);
  weight("prenet.proj.weight", cfg.prenet_channels, cfg.d_model);
  bias("prenet.proj.bias", cfg.d_model);

  for (int i = 0; i < cfg.encoder_layers; ++i) {
    const std::string base = "enc.layer" + std::to_string(i) + ".";
    attention(base + "attn.");
    norm(base + "norm1.");
    weight(base + "ffn.w1", cfg.d_model, cfg.d_ff);
    bias(base + "ffn.b1", cfg.d_ff);
    weight(base + "ffn.w2", cfg.d_ff, cfg.d_model);
    bias(base + "ffn.b2", cfg.d_model);
    norm(base + "norm2.");
  }

  weight("mpc.proj.weight", cfg.d_model, cfg.feat_dim * cfg.downsample);
  bias("mpc.proj.bias", cfg.feat_dim * cfg.downsample);

  weight("dec.embed", cfg.vocab_size, cfg.d_model);
  for (int i = 0; i < cfg.decoder_layers; ++i) {
    const std::string base = "dec.layer" + std::to_string(i) + ".";
    attention(base + "self.");
    norm(base + "norm1.");
    attention(base + "cross.");
    norm(base + "norm2.");
    weight(base + "ffn.w1", cfg.d_model, cfg.d_ff);
    bias(base + "ffn.b1", cfg.d_ff);
    weight(base + "ffn.w2", cfg.d_ff, cfg.d_model);
    bias(base + "ffn.b2", cfg.d_model);
    norm(base + "norm3.");
  }
  weight("dec.out.weight", cfg.d_model, cfg.vocab_size);
  bias("dec.out.bias", cfg.vocab_size);

  weight("ctc.weight", cfg.d_model, cfg.vocab_size);
  bias("ctc.bias", cfg.vocab_size);
  return p;
}

ParamMap sections(const ParamMap& params, const std::vector<std::string>& prefixes) {
  ParamMap out;
  for (const auto& [name, tensor] : params) {
    for (const auto& prefix : prefixes) {
      if (name.rfind(prefix, 0) == 0) {
        out[name] = tensor;
        break;
      }
    }
  }
  return out;
}

int encoder_layer_of(const std::string& name) {
  constexpr const char* kPrefix = "enc.layer";
  if (name.rfind(kPrefix, 0) != 0) return 0;
  std::size_t i = std::string(kPrefix).size();
  int layer = 0;
  bool any = false;
  while (i < name.size() && name[i] >= '0' && name[i] <= '9') {
    layer = layer * 10 + (name[i] - '0');
    ++i;
    any = true;
  }
  return any ? layer + 1 : 0;
}

Tensor positional_encoding(int t, int d_model) {
  std::vector<double> v(static_cast<std::size_t>(t) * d_model);
  for (int pos = 0; pos < t; ++pos) {
    for (int i = 0; i < d_model; ++i) {
      const double rate = std::pow(10000.0, -2.0 * (i / 2) / d_model);
      const double angle = pos * rate;
      v[static_cast<std::size_t>(pos) * d_model + i] =
          (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return Tensor::from_data({t, d_model}, std::move(v), false);
}

Tensor prenet_forward(Tape& tape, const Tensor& x, const ParamMap& params,
                      const ModelConfig& cfg) {
  if (x.rank() != 2 || x.dim(1) != cfg.feat_dim) {
    throw ShapeError("prenet_forward: expected [T," +
                     std::to_string(cfg.feat_dim) + "], got " +
                     Tensor::shape_str(x.shape()));
  }
  if (x.dim(0) % cfg.downsample != 0) {
    throw ShapeError("prenet_forward: frame count " + std::to_string(x.dim(0)) +
                     " is not a multiple of " + std::to_string(cfg.downsample) +
                     "; pad upstream");
  }
  Tensor h = tape.relu(tape.add_bias(
      tape.conv1d(x, param(params, "prenet.conv1.kernel"), 2),
      param(params, "prenet.conv1.bias")));
  h = tape.relu(tape.add_bias(
      tape.conv1d(h, param(params, "prenet.conv2.kernel"), 2),
      param(params, "prenet.conv2.bias")));
  return tape.add_bias(tape.matmul(h, param(params, "prenet.proj.weight")),
                       param(params, "prenet.proj.bias"));
}

std::vector<Tensor> encoder_forward(Tape& tape, const Tensor& h0,
                                    const AttentionMask& mask,
                                    const ParamMap& params,
                                    const ModelConfig& cfg) {
  if (h0.rank() != 2 || h0.dim(1) != cfg.d_model) {
    throw ShapeError("encoder_forward: expected [t'," +
                     std::to_string(cfg.d_model) + "], got " +
                     Tensor::shape_str(h0.shape()));
  }
  if (mask.mat.rows != h0.dim(0) || mask.mat.cols != h0.dim(0)) {
    throw ShapeError("encoder_forward: mask is " +
                     std::to_string(mask.mat.rows) + "x" +
                     std::to_string(mask.mat.cols) + ", sequence length is " +
                     std::to_string(h0.dim(0)));
  }
  std::vector<Tensor> outputs;
  outputs.reserve(static_cast<std::size_t>(cfg.encoder_layers));
  Tensor h = h0;
  for (int i = 0; i < cfg.encoder_layers; ++i) {
    const std::string base = "enc.layer" + std::to_string(i) + ".";
    Tensor a = pre_norm(tape, h, params, base + "norm1.");
    h = tape.add(h, multi_head_attention(tape, a, a, mask, params,
                                         base + "attn.", cfg.heads));
    Tensor f = pre_norm(tape, h, params, base + "norm2.");
    h = tape.add(h, feed_forward(tape, f, params, base + "ffn."));
    outputs.push_back(h);
  }
  return outputs;
}

std::vector<Tensor> encode_features(Tape& tape, const Tensor& x,
                                    const AttentionMask& mask,
                                    const ParamMap& params,
                                    const ModelConfig& cfg) {
  Tensor h = prenet_forward(tape, x, params, cfg);
  h = tape.scale(h, std::sqrt(static_cast<double>(cfg.d_model)));
  h = tape.add(h, positional_encoding(h.dim(0), cfg.d_model));
  return encoder_forward(tape, h, mask, params, cfg);
}

Tensor mpc_projection_reshape(Tape& tape, const Tensor& h_last,
                              const ParamMap& params, int r, int feat_dim) {
  Tensor w = param(params, "mpc.proj.weight");
  if (w.dim(1) != feat_dim * r) {
    throw ShapeError("mpc_projection_reshape: projection emits " +
                     std::to_string(w.dim(1)) + " values, need " +
                     std::to_string(feat_dim * r));
  }
  Tensor proj = tape.add_bias(tape.matmul(h_last, w), param(params, "mpc.proj.bias"));
  // Row-major reshape maps position u, block b, bin c onto frame u*r + b.
  return tape.reshape(proj, {h_last.dim(0) * r, feat_dim});
}

Tensor decoder_forward(Tape& tape, const std::vector<int>& tokens,
                       const Tensor& enc_out, const ParamMap& params,
                       const ModelConfig& cfg) {
  if (tokens.empty()) throw ValueError("decoder_forward: empty token sequence");
  if (enc_out.rank() != 2 || enc_out.dim(1) != cfg.d_model) {
    throw ShapeError("decoder_forward: encoder output must be [t',d_model]");
  }
  const int length = static_cast<int>(tokens.size());
  Tensor h = tape.gather_rows(param(params, "dec.embed"), tokens);
  h = tape.scale(h, std::sqrt(static_cast<double>(cfg.d_model)));
  h = tape.add(h, positional_encoding(length, cfg.d_model));

  const AttentionMask self_mask = causal_mask(length);
  const AttentionMask cross = full_mask(length, enc_out.dim(0));
  for (int i = 0; i < cfg.decoder_layers; ++i) {
    const std::string base = "dec.layer" + std::to_string(i) + ".";
    Tensor a = pre_norm(tape, h, params, base + "norm1.");
    h = tape.add(h, multi_head_attention(tape, a, a, self_mask, params,
                                         base + "self.", cfg.heads));
    Tensor c = pre_norm(tape, h, params, base + "norm2.");
    h = tape.add(h, multi_head_attention(tape, c, enc_out, cross, params,
                                         base + "cross.", cfg.heads));
    Tensor f = pre_norm(tape, h, params, base + "norm3.");
    h = tape.add(h, feed_forward(tape, f, params, base + "ffn."));
  }
  return tape.add_bias(tape.matmul(h, param(params, "dec.out.weight")),
                       param(params, "dec.out.bias"));
}

Tensor ctc_head(Tape& tape, const Tensor& enc_out, const ParamMap& params) {
  return tape.add_bias(tape.matmul(enc_out, param(params, "ctc.weight")),
                       param(params, "ctc.bias"));
}

}  // namespace mpclab::model
