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

#include "mpclab/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "json.hpp"
#include "mpclab/masking.hpp"
#include "mpclab/schedules.hpp"

namespace mpclab::pipeline {

namespace fs = std::filesystem;
using features::FeatureSequence;
using features::Normalizer;
using model::AttentionMask;
using model::ModelConfig;
using numerics::AdamState;
using numerics::Gradients;
using numerics::ParamMap;
using numerics::Tape;
using numerics::Tensor;

namespace {

double now_ms() {
  return std::chrono::duration<double, std::milli>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

std::string epoch_ckpt_name(std::int64_t epoch) {
  std::ostringstream os;
  os << "ckpt_epoch" << std::setw(4) << std::setfill('0') << epoch << ".mpcc";
  return os.str();
}

// One training utterance after normalization and padding to the
// downsample rate. The tensor is cached; recorded ops never mutate it.
struct PreparedUtterance {
  std::string id;
  FeatureSequence padded;
  int valid = 0;
  std::vector<int> transcript;
  bool labeled = false;
  Tensor tensor;
};

struct LoadedUtterance {
  FeatureSequence feats;
  std::optional<std::vector<int>> transcript;
};

std::vector<LoadedUtterance> load_corpus(const fs::path& manifest_path,
                                         int vocab_size, bool need_transcripts) {
  const features::Manifest man = features::load_manifest(manifest_path);
  if (man.entries.empty()) {
    throw DataError("empty manifest: " + manifest_path.string());
  }
  std::vector<LoadedUtterance> out;
  out.reserve(man.entries.size());
  int bins = -1;
  for (const auto& entry : man.entries) {
    LoadedUtterance u;
    u.feats = features::load_features(man.resolve(entry));
    if (bins < 0) {
      bins = u.feats.bins;
    } else if (u.feats.bins != bins) {
      throw DataError("feature dimensionality varies across the corpus: " +
                      entry.feature_path + " has " + std::to_string(u.feats.bins) +
                      " bins, expected " + std::to_string(bins));
    }
    if (entry.transcript.has_value()) {
      for (int id : *entry.transcript) {
        if (id < 1 || (vocab_size > 0 && id >= vocab_size)) {
          throw DataError(entry.feature_path + ": token id " + std::to_string(id) +
                          " outside [1," + std::to_string(vocab_size) +
                          ") (0 is the blank)");
        }
      }
      u.transcript = entry.transcript;
    } else if (need_transcripts) {
      throw DataError(entry.feature_path + ": transcript required for this stage");
    }
    out.push_back(std::move(u));
  }
  return out;
}

PreparedUtterance prepare_utterance(const LoadedUtterance& u, const Normalizer& norm,
                                    int r) {
  PreparedUtterance p;
  p.id = u.feats.utterance_id;
  auto [padded, valid] = features::pad_to_multiple(features::apply_normalizer(u.feats, norm), r);
  p.padded = std::move(padded);
  p.valid = valid;
  if (u.transcript.has_value()) {
    p.transcript = *u.transcript;
    p.labeled = true;
  }
  p.tensor = Tensor::from_data({p.padded.frames, p.padded.bins}, p.padded.data);
  return p;
}

std::vector<PreparedUtterance> prepare_corpus(const std::vector<LoadedUtterance>& corpus,
                                              const Normalizer& norm, int r) {
  std::vector<PreparedUtterance> out;
  out.reserve(corpus.size());
  for (const auto& u : corpus) out.push_back(prepare_utterance(u, norm, r));
  return out;
}

Normalizer fit_over(const std::vector<LoadedUtterance>& corpus,
                    const std::vector<std::size_t>& indices) {
  std::vector<FeatureSequence> feats;
  feats.reserve(indices.size());
  for (std::size_t i : indices) feats.push_back(corpus[i].feats);
  return features::fit_normalizer(feats);
}

void attach_normalizer(ParamMap& params, const Normalizer& norm) {
  const int d = static_cast<int>(norm.mean.size());
  params["norm.mean"] = Tensor::from_data({d}, norm.mean, false);
  params["norm.std"] = Tensor::from_data({d}, norm.stddev, false);
}

Normalizer extract_normalizer(const ParamMap& params) {
  auto mean = params.find("norm.mean");
  auto std_ = params.find("norm.std");
  if (mean == params.end() || std_ == params.end()) {
    throw DataError("checkpoint carries no feature normalizer");
  }
  Normalizer n;
  n.mean = mean->second.data();
  n.stddev = std_->second.data();
  return n;
}

ParamMap strip_normalizer(const ParamMap& params) {
  ParamMap out;
  for (const auto& [name, tensor] : params) {
    if (name.rfind("norm.", 0) != 0) out[name] = tensor;
  }
  return out;
}

void require_sections(const ParamMap& params, const std::vector<std::string>& prefixes,
                      const std::string& what) {
  for (const auto& prefix : prefixes) {
    bool found = false;
    for (const auto& [name, tensor] : params) {
      (void)tensor;
      if (name.rfind(prefix, 0) == 0) {
        found = true;
        break;
      }
    }
    if (!found) {
      throw DataError(what + ": missing parameter section '" + prefix + "'");
    }
  }
}

Checkpoint make_checkpoint(const std::string& stage, const ModelConfig& mc,
                           std::int64_t epoch, std::int64_t step,
                           const std::string& parent, const ParamMap& params,
                           const Normalizer& norm, const AdamState& opt,
                           const RunRng& rng) {
  Checkpoint ck;
  ck.stage = stage;
  ck.config = mc;
  ck.epoch = epoch;
  ck.step = step;
  ck.parent = parent;
  ck.params = params;
  attach_normalizer(ck.params, norm);
  ck.opt = opt;
  ck.rng_state = rng.serialize();
  return ck;
}

// Deep copy so optimizer updates on a stage's working set never alias the
// tensors held by a loaded checkpoint.
ParamMap clone_params(const ParamMap& params) {
  ParamMap out;
  for (const auto& [name, tensor] : params) out[name] = tensor.clone();
  return out;
}

int argmax_row(const Tensor& logits, int row) {
  int best = 0;
  for (int j = 1; j < logits.dim(1); ++j) {
    if (logits.at(row, j) > logits.at(row, best)) best = j;
  }
  return best;
}

std::vector<int> decoder_greedy(const Tensor& enc_out, const ParamMap& params,
                                const ModelConfig& mc, int max_len) {
  std::vector<int> tokens = {objectives::kBlankId};
  for (int i = 0; i < max_len; ++i) {
    Tape tape;
    Tensor logits = model::decoder_forward(tape, tokens, enc_out, params, mc);
    const int next = argmax_row(logits, logits.dim(0) - 1);
    if (next == objectives::kBlankId) break;
    tokens.push_back(next);
  }
  return {tokens.begin() + 1, tokens.end()};
}

struct DevMetrics {
  double attn = 0.0;
  double ctc = 0.0;
  double joint = 0.0;
  double cer = 0.0;
  std::int64_t edits = 0;
  std::int64_t ref_len = 0;
};

// Clean input, full attention, teacher-forced attention loss; CTC loss and
// greedy-decode CER when the checkpoint has a CTC head, otherwise CER from
// autoregressive decoder decoding.
DevMetrics evaluate_supervised(const ParamMap& params, const ModelConfig& mc,
                               const std::vector<PreparedUtterance>& dev,
                               double alpha, double beta, double smoothing,
                               bool with_ctc) {
  if (dev.empty()) throw DataError("dev evaluation: no utterances");
  DevMetrics out;
  for (const auto& utt : dev) {
    Tape tape;
    auto layers = model::encode_features(
        tape, utt.tensor, model::full_mask(utt.padded.frames / mc.downsample),
        params, mc);
    const Tensor& enc = layers.back();

    std::vector<int> dec_in = {objectives::kBlankId};
    dec_in.insert(dec_in.end(), utt.transcript.begin(), utt.transcript.end());
    std::vector<int> dec_tgt = utt.transcript;
    dec_tgt.push_back(objectives::kBlankId);
    Tensor dec_logits = model::decoder_forward(tape, dec_in, enc, params, mc);
    out.attn += objectives::attention_ce_loss(tape, dec_logits, dec_tgt, smoothing).item();

    std::vector<int> hyp;
    if (with_ctc) {
      Tensor logits = model::ctc_head(tape, enc, params);
      out.ctc += objectives::ctc_loss(tape, logits, utt.transcript).item();
      hyp = objectives::ctc_greedy_decode(logits);
    } else {
      hyp = decoder_greedy(enc, params, mc, 2 * enc.dim(0) + 4);
    }
    out.edits += objectives::edit_distance(utt.transcript, hyp);
    out.ref_len += static_cast<std::int64_t>(utt.transcript.size());
  }
  out.attn /= static_cast<double>(dev.size());
  out.ctc /= static_cast<double>(dev.size());
  out.joint = alpha * out.attn + beta * out.ctc;
  out.cer = out.ref_len > 0
                ? static_cast<double>(out.edits) / static_cast<double>(out.ref_len)
                : 0.0;
  return out;
}

// Reconstruction loss on dev data with a pinned mask stream, for scoring
// checkpoints that lack supervised heads.
double evaluate_mpc_dev(const ParamMap& params, const ModelConfig& mc,
                        const std::vector<PreparedUtterance>& dev,
                        int chunk, double p) {
  Rng mask_rng(1234);
  double total = 0.0;
  for (const auto& utt : dev) {
    const auto plan = masking::plan_masks(utt.padded.frames, utt.valid, chunk, p, mask_rng);
    const FeatureSequence corrupted = masking::apply_mask(utt.padded, plan);
    Tape tape;
    Tensor x = Tensor::from_data({corrupted.frames, corrupted.bins}, corrupted.data);
    auto layers = model::encode_features(
        tape, x, model::full_mask(corrupted.frames / mc.downsample), params, mc);
    Tensor pred = model::mpc_projection_reshape(tape, layers.back(), params,
                                                mc.downsample, mc.feat_dim);
    total += objectives::mpc_loss(tape, pred, utt.tensor, plan.frame_mask).item();
  }
  return total / static_cast<double>(dev.size());
}

void write_dev_record(std::ofstream& os, const std::string& stage, std::int64_t epoch,
                      std::int64_t step, const DevMetrics& dev) {
  nlohmann::json j;
  j["stage"] = stage;
  j["epoch"] = epoch;
  j["step"] = step;
  j["dev_attn"] = dev.attn;
  j["dev_ctc"] = dev.ctc;
  j["dev_joint"] = dev.joint;
  j["dev_cer"] = dev.cer;
  j["dev_edits"] = dev.edits;
  j["dev_ref_len"] = dev.ref_len;
  os << j.dump() << "\n";
  os.flush();
}

void check_ctc_feasible(const PreparedUtterance& utt, int downsample) {
  int min_frames = static_cast<int>(utt.transcript.size());
  for (std::size_t i = 1; i < utt.transcript.size(); ++i) {
    if (utt.transcript[i] == utt.transcript[i - 1]) ++min_frames;
  }
  if (min_frames > utt.padded.frames / downsample) {
    throw DataError("utterance '" + utt.id + "': transcript needs " +
                    std::to_string(min_frames) + " encoder frames but only " +
                    std::to_string(utt.padded.frames / downsample) +
                    " are available");
  }
}

}  // namespace

std::string MetricsRecord::to_json() const {
  nlohmann::json j;
  j["step"] = step;
  j["epoch"] = epoch;
  j["stage"] = stage;
  j["branch"] = branch;
  j["l_attn"] = l_attn;
  j["l_ctc"] = l_ctc;
  j["l_mpc"] = l_mpc;
  j["l_apc"] = l_apc;
  j["alpha_attn"] = alpha_attn;
  j["beta_ctc"] = beta_ctc;
  j["gamma_mpc"] = gamma_mpc;
  j["total"] = total;
  j["lr"] = lr;
  if (!layer_lr.empty()) j["layer_lr"] = layer_lr;
  j["wall_ms"] = wall_ms;
  return j.dump();
}

RunRng RunRng::from_seed(std::uint64_t seed) {
  return RunRng{Rng(mix_seed(seed, 0x5348)),   // shuffle
                Rng(mix_seed(seed, 0x4252)),   // branch
                Rng(mix_seed(seed, 0x4d41))};  // mask
}

std::string RunRng::serialize() const {
  return shuffle.serialize() + "\n" + branch.serialize() + "\n" + mask.serialize();
}

RunRng RunRng::deserialize(const std::string& text) {
  std::istringstream is(text);
  std::string a, b, c;
  if (!std::getline(is, a) || !std::getline(is, b) || !std::getline(is, c)) {
    throw ParseError("run rng state: expected three stream lines");
  }
  return RunRng{Rng::deserialize(a), Rng::deserialize(b), Rng::deserialize(c)};
}

bool is_dev_utterance(const std::string& utterance_id) {
  return fnv1a64(utterance_id) % 10 == 0;
}

double score_checkpoint(const std::filesystem::path& ckpt_path,
                        const std::filesystem::path& manifest_path,
                        double alpha, double beta, double smoothing) {
  const Checkpoint ck = load_checkpoint(ckpt_path);
  const auto corpus = load_corpus(manifest_path, ck.config.vocab_size, true);
  const Normalizer norm = extract_normalizer(ck.params);
  const auto prepared = prepare_corpus(corpus, norm, ck.config.downsample);
  const ParamMap params = strip_normalizer(ck.params);
  require_sections(params, {"prenet.", "enc.", "dec.", "ctc."}, "scored checkpoint");
  return evaluate_supervised(params, ck.config, prepared, alpha, beta, smoothing, true)
      .joint;
}

// ---------------------------------------------------------------------------
// synth

void cmd_synth(const StageConfig& cfg) {
  cfg.validate();
  const SynthSpec& spec = cfg.synth;
  fs::create_directories(cfg.out_dir / "feats");

  std::vector<features::ManifestEntry> entries;
  for (int i = 0; i < spec.count; ++i) {
    Rng structure(mix_seed(cfg.seed, 0xC0DE0000ull + static_cast<std::uint64_t>(i)));
    features::SynthStyle style{spec.smoothness, spec.pause_rate, spec.pitch_drift,
                               mix_seed(cfg.seed, static_cast<std::uint64_t>(i))};
    std::ostringstream name;
    name << "utt_" << std::setw(5) << std::setfill('0') << i;

    features::ManifestEntry entry;
    entry.feature_path = "feats/" + name.str() + ".mpcf";

    FeatureSequence seq;
    if (!spec.labeled && !spec.latent_tokens) {
      const int t = spec.frames_min +
                    structure.uniform_int(spec.frames_max - spec.frames_min + 1);
      seq = features::synth_generate(style, t, spec.feat_dim);
    } else {
      const int num_tokens =
          spec.tokens_min + structure.uniform_int(spec.tokens_max - spec.tokens_min + 1);
      std::vector<int> tokens;
      std::vector<int> spans;
      const int lead = 4 + structure.uniform_int(5);
      const int trail = 4 + structure.uniform_int(5);
      int total = lead + trail;
      for (int k = 0; k < num_tokens; ++k) {
        tokens.push_back(1 + structure.uniform_int(spec.vocab_size - 1));
        spans.push_back(spec.span_min +
                        structure.uniform_int(spec.span_max - spec.span_min + 1));
        total += spans.back();
      }
      seq = features::synth_generate(style, total, spec.feat_dim);
      // Each token raises its own frequency band over its span, so token
      // identity is carried by which band holds extra energy.
      const int bands = spec.vocab_size - 1;
      int at = lead;
      for (int k = 0; k < num_tokens; ++k) {
        const int band = tokens[static_cast<std::size_t>(k)] - 1;
        const int lo = band * spec.feat_dim / bands;
        const int hi = (band + 1) * spec.feat_dim / bands;
        for (int t = at; t < at + spans[static_cast<std::size_t>(k)]; ++t) {
          for (int b = lo; b < hi; ++b) seq.at(t, b) += spec.token_boost;
        }
        at += spans[static_cast<std::size_t>(k)];
      }
      if (spec.labeled) entry.transcript = tokens;
    }
    seq.utterance_id = name.str();
    features::save_features(seq, cfg.out_dir / entry.feature_path);
    entries.push_back(std::move(entry));
  }
  features::write_manifest(entries, cfg.out_dir / "manifest.tsv");
  std::cout << "synth: wrote " << entries.size() << " utterances under "
            << cfg.out_dir.string() << "\n";
}

// ---------------------------------------------------------------------------
// pretrain / adapt

namespace {

Checkpoint run_predictive_training(const StageConfig& cfg) {
  cfg.validate();
  const ModelConfig& mc = cfg.model;
  const auto corpus = load_corpus(cfg.train_manifest, -1, false);

  ParamMap params;
  AdamState opt;
  RunRng rng = RunRng::from_seed(cfg.seed);
  Normalizer norm;
  std::int64_t epoch0 = 0, step = 0;
  std::string parent = "-";

  if (!cfg.init_checkpoint.empty()) {
    const Checkpoint init = load_checkpoint(cfg.init_checkpoint);
    if (!init.config.same_architecture(mc)) {
      throw ConfigError("init checkpoint architecture (" +
                        encode_model_config(init.config) +
                        ") does not match the configured model (" +
                        encode_model_config(mc) + ")");
    }
    if (init.stage != "pretrain" && init.stage != "adapt") {
      throw ConfigError("predictive training can only continue from a "
                        "pretrain/adapt checkpoint, got stage '" +
                        init.stage + "'");
    }
    params = clone_params(strip_normalizer(init.params));
    require_sections(params, {"prenet.", "enc.", "mpc."}, "init checkpoint");
    norm = extract_normalizer(init.params);
    opt = init.opt;
    rng = RunRng::deserialize(init.rng_state);
    epoch0 = init.epoch;
    step = init.step;
    parent = init.stage == stage_name(cfg.stage)
                 ? init.parent
                 : checkpoint_file_digest(cfg.init_checkpoint);
  } else {
    params = model::sections(model::init_params(mc, cfg.seed),
                             {"prenet.", "enc.", "mpc."});
    std::vector<std::size_t> all(corpus.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    norm = fit_over(corpus, all);
  }

  const auto prepared = prepare_corpus(corpus, norm, mc.downsample);
  const std::int64_t epochs_target =
      cfg.stage == Stage::kAdapt ? epoch0 + cfg.target_adapt_epochs
                                 : std::max<std::int64_t>(cfg.epochs, epoch0);

  fs::create_directories(cfg.out_dir);
  std::ofstream metrics(cfg.out_dir / "metrics.jsonl");
  if (!metrics) throw IoError("cannot open metrics log in " + cfg.out_dir.string());

  const std::string stage_label = stage_name(cfg.stage);
  Checkpoint last = make_checkpoint(stage_label, mc, epoch0, step, parent, params,
                                    norm, opt, rng);

  for (std::int64_t epoch = epoch0; epoch < epochs_target; ++epoch) {
    std::vector<std::size_t> order(prepared.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle.shuffle(order);

    for (std::size_t begin = 0; begin < order.size();
         begin += static_cast<std::size_t>(cfg.batch_size)) {
      const double t0 = now_ms();
      const std::size_t end =
          std::min(order.size(), begin + static_cast<std::size_t>(cfg.batch_size));

      objectives::Branch branch = objectives::Branch::kMpc;
      if (cfg.objective == Objective::kUnified) {
        branch = objectives::choose_branch({cfg.switch_p}, rng.branch);
      } else if (cfg.objective == Objective::kApc) {
        branch = objectives::Branch::kApc;
      }

      Tape tape;
      Tensor batch_loss;
      for (std::size_t i = begin; i < end; ++i) {
        const PreparedUtterance& utt = prepared[order[i]];
        const int tprime = utt.padded.frames / mc.downsample;
        Tensor loss;
        if (branch == objectives::Branch::kMpc) {
          const auto plan = masking::plan_masks(utt.padded.frames, utt.valid,
                                                cfg.mask_chunk, cfg.mask_p, rng.mask);
          const FeatureSequence corrupted = masking::apply_mask(utt.padded, plan);
          Tensor x = Tensor::from_data({corrupted.frames, corrupted.bins},
                                       corrupted.data);
          auto layers = model::encode_features(tape, x, model::full_mask(tprime),
                                               params, mc);
          Tensor pred = model::mpc_projection_reshape(tape, layers.back(), params,
                                                      mc.downsample, mc.feat_dim);
          loss = objectives::mpc_loss(tape, pred, utt.tensor, plan.frame_mask);
        } else {
          auto layers = model::encode_features(tape, utt.tensor,
                                               model::causal_mask(tprime), params, mc);
          Tensor pred = model::mpc_projection_reshape(tape, layers.back(), params,
                                                      mc.downsample, mc.feat_dim);
          loss = objectives::apc_loss(tape, pred, utt.tensor, cfg.apc_step, utt.valid);
        }
        batch_loss = batch_loss.defined() ? tape.add(batch_loss, loss) : loss;
      }
      batch_loss = tape.scale(batch_loss, 1.0 / static_cast<double>(end - begin));

      const Gradients grads = tape.backward(batch_loss);
      ++step;
      const double lr = schedules::lrate(cfg.warmup, step);
      adam_step(params, grads, opt, lr, cfg.weight_decay);

      MetricsRecord rec;
      rec.step = step;
      rec.epoch = epoch;
      rec.stage = stage_label;
      rec.branch = branch == objectives::Branch::kMpc ? "mpc" : "apc";
      rec.total = batch_loss.item();
      if (branch == objectives::Branch::kMpc) {
        rec.l_mpc = rec.total;
        rec.gamma_mpc = 1.0;
      } else {
        rec.l_apc = rec.total;
      }
      rec.lr = lr;
      rec.wall_ms = now_ms() - t0;
      metrics << rec.to_json() << "\n";
    }
    metrics.flush();

    last = make_checkpoint(stage_label, mc, epoch + 1, step, parent, params, norm,
                           opt, rng);
    save_checkpoint(last, cfg.out_dir / epoch_ckpt_name(epoch + 1));
  }

  save_checkpoint(last, cfg.out_dir / "ckpt_final.mpcc");
  return last;
}

}  // namespace

Checkpoint cmd_pretrain(const StageConfig& cfg) {
  if (cfg.stage != Stage::kPretrain) throw ConfigError("cmd_pretrain: wrong stage");
  return run_predictive_training(cfg);
}

Checkpoint cmd_adapt(const StageConfig& cfg) {
  if (cfg.stage != Stage::kAdapt) throw ConfigError("cmd_adapt: wrong stage");
  return run_predictive_training(cfg);
}

// ---------------------------------------------------------------------------
// finetune

Checkpoint cmd_finetune(const StageConfig& cfg) {
  cfg.validate();
  if (cfg.stage != Stage::kFinetune) throw ConfigError("cmd_finetune: wrong stage");
  const ModelConfig& mc = cfg.model;
  const auto corpus = load_corpus(cfg.train_manifest, mc.vocab_size, true);

  // Deterministic 10% dev split by utterance-id hash; with the split
  // disabled the dev metrics are computed on the training data itself.
  std::vector<std::size_t> train_idx, dev_idx;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    if (cfg.use_dev_split && is_dev_utterance(corpus[i].feats.utterance_id)) {
      dev_idx.push_back(i);
    } else {
      train_idx.push_back(i);
    }
  }
  if (train_idx.empty()) throw DataError("dev split left no training utterances");
  if (dev_idx.empty()) dev_idx = train_idx;

  ParamMap params;
  AdamState opt;
  RunRng rng = RunRng::from_seed(cfg.seed);
  Normalizer norm;
  std::int64_t epoch0 = 0, step = 0;
  std::string parent = "-";
  bool resumed = false;

  if (!cfg.init_checkpoint.empty()) {
    const Checkpoint init = load_checkpoint(cfg.init_checkpoint);
    if (!init.config.same_architecture(mc)) {
      throw ConfigError("init checkpoint architecture (" +
                        encode_model_config(init.config) +
                        ") does not match the configured model (" +
                        encode_model_config(mc) + ")");
    }
    if (init.stage == "finetune") {
      params = clone_params(strip_normalizer(init.params));
      norm = extract_normalizer(init.params);
      opt = init.opt;
      rng = RunRng::deserialize(init.rng_state);
      epoch0 = init.epoch;
      step = init.step;
      parent = init.parent;
      resumed = true;
    } else {
      // Transfer: keep the pre-trained prenet and encoder, drop the
      // reconstruction head unless the multi-task objective retains it,
      // and attach a fresh decoder and CTC head.
      params = model::sections(model::init_params(mc, cfg.seed),
                               {"prenet.", "enc.", "dec.", "ctc."});
      const ParamMap donor = strip_normalizer(init.params);
      require_sections(donor, {"prenet.", "enc."}, "init checkpoint");
      for (const auto& [name, tensor] : donor) {
        if (name.rfind("prenet.", 0) == 0 || name.rfind("enc.", 0) == 0) {
          params[name] = tensor.clone();
        }
      }
      if (cfg.multitask_mpc) {
        const ParamMap head = model::sections(donor, {"mpc."});
        if (head.empty()) {
          throw ConfigError("multitask_mpc: init checkpoint has no "
                            "reconstruction head");
        }
        for (const auto& [name, tensor] : head) params[name] = tensor.clone();
      }
      norm = extract_normalizer(init.params);
      parent = checkpoint_file_digest(cfg.init_checkpoint);
    }
  } else {
    params = model::sections(model::init_params(mc, cfg.seed),
                             {"prenet.", "enc.", "dec.", "ctc."});
    norm = fit_over(corpus, train_idx);
  }

  std::vector<PreparedUtterance> train, dev;
  for (std::size_t i : train_idx) train.push_back(prepare_utterance(corpus[i], norm, mc.downsample));
  for (std::size_t i : dev_idx) dev.push_back(prepare_utterance(corpus[i], norm, mc.downsample));
  for (const auto& utt : train) check_ctc_feasible(utt, mc.downsample);
  for (const auto& utt : dev) check_ctc_feasible(utt, mc.downsample);

  fs::create_directories(cfg.out_dir);
  std::ofstream metrics(cfg.out_dir / "metrics.jsonl");
  std::ofstream dev_log(cfg.out_dir / "dev.jsonl");
  if (!metrics || !dev_log) {
    throw IoError("cannot open logs in " + cfg.out_dir.string());
  }

  std::function<double(const std::string&)> lr_scale;
  if (cfg.layerwise_enabled) {
    lr_scale = [layerwise = cfg.layerwise, e = mc.encoder_layers](const std::string& name) {
      const int layer = model::encoder_layer_of(name);
      return layer == 0 ? 1.0 : schedules::layer_multiplier(layerwise, layer, e);
    };
  }

  if (!resumed) {
    write_dev_record(dev_log, "finetune", epoch0, step,
                     evaluate_supervised(params, mc, dev, cfg.attn_weight,
                                         cfg.ctc_weight, cfg.label_smoothing, true));
  }

  Checkpoint last = make_checkpoint("finetune", mc, epoch0, step, parent, params,
                                    norm, opt, rng);

  for (std::int64_t epoch = epoch0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle.shuffle(order);

    const double gamma_now =
        cfg.multitask_mpc ? schedules::gamma_mpc(cfg.gamma, static_cast<int>(epoch)) : 0.0;

    for (std::size_t begin = 0; begin < order.size();
         begin += static_cast<std::size_t>(cfg.batch_size)) {
      const double t0 = now_ms();
      const std::size_t end =
          std::min(order.size(), begin + static_cast<std::size_t>(cfg.batch_size));

      Tape tape;
      Tensor batch_total;
      double sum_attn = 0.0, sum_ctc = 0.0, sum_mpc = 0.0;
      for (std::size_t i = begin; i < end; ++i) {
        const PreparedUtterance& utt = train[order[i]];
        const int tprime = utt.padded.frames / mc.downsample;

        std::optional<Tensor> l_mpc;
        Tensor enc_for_task;
        if (cfg.multitask_mpc) {
          const auto plan = masking::plan_masks(utt.padded.frames, utt.valid,
                                                cfg.mask_chunk, cfg.mask_p, rng.mask);
          const FeatureSequence corrupted = masking::apply_mask(utt.padded, plan);
          Tensor masked_input =
              Tensor::from_data({corrupted.frames, corrupted.bins}, corrupted.data);
          auto mpc_layers = model::encode_features(
              tape, masked_input, model::full_mask(tprime), params, mc);
          Tensor pred = model::mpc_projection_reshape(tape, mpc_layers.back(), params,
                                                      mc.downsample, mc.feat_dim);
          l_mpc = objectives::mpc_loss(tape, pred, utt.tensor, plan.frame_mask);
          // Single pass by default: supervised losses reuse the masked
          // encode. The two-pass variant re-encodes the clean input.
          enc_for_task =
              cfg.multitask_clean_input
                  ? model::encode_features(tape, utt.tensor, model::full_mask(tprime),
                                           params, mc)
                        .back()
                  : mpc_layers.back();
        } else {
          enc_for_task = model::encode_features(tape, utt.tensor,
                                                model::full_mask(tprime), params, mc)
                             .back();
        }

        Tensor l_ctc = objectives::ctc_loss(
            tape, model::ctc_head(tape, enc_for_task, params), utt.transcript);
        std::vector<int> dec_in = {objectives::kBlankId};
        dec_in.insert(dec_in.end(), utt.transcript.begin(), utt.transcript.end());
        std::vector<int> dec_tgt = utt.transcript;
        dec_tgt.push_back(objectives::kBlankId);
        Tensor l_attn = objectives::attention_ce_loss(
            tape, model::decoder_forward(tape, dec_in, enc_for_task, params, mc),
            dec_tgt, cfg.label_smoothing);

        auto breakdown = objectives::joint_loss(tape, l_attn, l_ctc, l_mpc,
                                                cfg.attn_weight, cfg.ctc_weight,
                                                gamma_now);
        sum_attn += breakdown.l_attn;
        sum_ctc += breakdown.l_ctc;
        sum_mpc += breakdown.l_mpc;
        batch_total = batch_total.defined()
                          ? tape.add(batch_total, breakdown.total_node)
                          : breakdown.total_node;
      }
      const double inv = 1.0 / static_cast<double>(end - begin);
      batch_total = tape.scale(batch_total, inv);

      const Gradients grads = tape.backward(batch_total);
      ++step;
      const double lr = schedules::lrate(cfg.warmup, step);
      adam_step(params, grads, opt, lr, cfg.weight_decay, lr_scale);

      MetricsRecord rec;
      rec.step = step;
      rec.epoch = epoch;
      rec.stage = "finetune";
      rec.branch = "mpc";
      rec.l_attn = sum_attn * inv;
      rec.l_ctc = sum_ctc * inv;
      rec.l_mpc = sum_mpc * inv;
      rec.alpha_attn = cfg.attn_weight;
      rec.beta_ctc = cfg.ctc_weight;
      rec.gamma_mpc = gamma_now;
      rec.total = batch_total.item();
      rec.lr = lr;
      if (cfg.layerwise_enabled) {
        for (int l = 1; l <= mc.encoder_layers; ++l) {
          rec.layer_lr["enc" + std::to_string(l)] =
              lr * schedules::layer_multiplier(cfg.layerwise, l, mc.encoder_layers);
        }
        rec.layer_lr["prenet"] = lr;
        rec.layer_lr["decoder"] = lr;
        rec.layer_lr["ctc"] = lr;
      }
      rec.wall_ms = now_ms() - t0;
      metrics << rec.to_json() << "\n";
    }
    metrics.flush();

    write_dev_record(dev_log, "finetune", epoch + 1, step,
                     evaluate_supervised(params, mc, dev, cfg.attn_weight,
                                         cfg.ctc_weight, cfg.label_smoothing, true));
    last = make_checkpoint("finetune", mc, epoch + 1, step, parent, params, norm,
                           opt, rng);
    save_checkpoint(last, cfg.out_dir / epoch_ckpt_name(epoch + 1));
  }

  save_checkpoint(last, cfg.out_dir / "ckpt_final.mpcc");
  return last;
}

// ---------------------------------------------------------------------------
// probe

std::vector<ProbeRow> cmd_probe(const StageConfig& cfg) {
  cfg.validate();
  if (cfg.stage != Stage::kProbe) throw ConfigError("cmd_probe: wrong stage");
  const ModelConfig& mc = cfg.model;

  const Checkpoint init = load_checkpoint(cfg.init_checkpoint);
  if (!init.config.same_architecture(mc)) {
    throw ConfigError("init checkpoint architecture does not match the probe model");
  }
  const ParamMap donor = strip_normalizer(init.params);
  require_sections(donor, {"prenet.", "enc."}, "probe init checkpoint");
  const Normalizer norm = extract_normalizer(init.params);

  const auto corpus = load_corpus(cfg.train_manifest, mc.vocab_size, true);
  std::vector<std::size_t> train_idx, dev_idx;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    if (cfg.use_dev_split && is_dev_utterance(corpus[i].feats.utterance_id)) {
      dev_idx.push_back(i);
    } else {
      train_idx.push_back(i);
    }
  }
  if (train_idx.empty()) throw DataError("dev split left no training utterances");
  if (dev_idx.empty()) dev_idx = train_idx;

  std::vector<PreparedUtterance> train, dev;
  for (std::size_t i : train_idx) train.push_back(prepare_utterance(corpus[i], norm, mc.downsample));
  for (std::size_t i : dev_idx) dev.push_back(prepare_utterance(corpus[i], norm, mc.downsample));

  fs::create_directories(cfg.out_dir);
  std::ofstream csv(cfg.out_dir / "probe.csv");
  if (!csv) throw IoError("cannot open probe.csv in " + cfg.out_dir.string());
  csv << "layer,dev_loss,dev_cer\n";

  // The fresh decoder draws exactly the section a from-scratch fine-tune
  // with this seed would draw.
  const ParamMap fresh_full = model::init_params(mc, cfg.seed);

  std::vector<ProbeRow> rows;
  for (int layer = 1; layer <= mc.encoder_layers; ++layer) {
    ModelConfig probe_mc = mc;
    probe_mc.encoder_layers = layer;

    ParamMap frozen;  // forwarded but never optimized
    for (const auto& [name, tensor] : donor) {
      const int l = model::encoder_layer_of(name);
      const bool keep = name.rfind("prenet.", 0) == 0 || (l >= 1 && l <= layer);
      if (keep) {
        Tensor t = tensor.clone();
        t.set_requires_grad(false);
        frozen[name] = t;
      }
    }
    ParamMap trainable = clone_params(model::sections(fresh_full, {"dec."}));
    ParamMap full = frozen;
    for (const auto& [name, tensor] : trainable) full[name] = tensor;

    AdamState opt;
    RunRng rng = RunRng::from_seed(mix_seed(cfg.seed, 0x50524200ull +
                                                static_cast<std::uint64_t>(layer)));
    std::int64_t step = 0;
    for (int epoch = 0; epoch < cfg.probe_epochs; ++epoch) {
      std::vector<std::size_t> order(train.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      rng.shuffle.shuffle(order);
      for (std::size_t begin = 0; begin < order.size();
           begin += static_cast<std::size_t>(cfg.batch_size)) {
        const std::size_t end =
            std::min(order.size(), begin + static_cast<std::size_t>(cfg.batch_size));
        Tape tape;
        Tensor batch_loss;
        for (std::size_t i = begin; i < end; ++i) {
          const PreparedUtterance& utt = train[order[i]];
          const int tprime = utt.padded.frames / mc.downsample;
          auto layers = model::encode_features(tape, utt.tensor,
                                               model::full_mask(tprime), full, probe_mc);
          std::vector<int> dec_in = {objectives::kBlankId};
          dec_in.insert(dec_in.end(), utt.transcript.begin(), utt.transcript.end());
          std::vector<int> dec_tgt = utt.transcript;
          dec_tgt.push_back(objectives::kBlankId);
          Tensor loss = objectives::attention_ce_loss(
              tape, model::decoder_forward(tape, dec_in, layers.back(), full, probe_mc),
              dec_tgt, cfg.label_smoothing);
          batch_loss = batch_loss.defined() ? tape.add(batch_loss, loss) : loss;
        }
        batch_loss = tape.scale(batch_loss, 1.0 / static_cast<double>(end - begin));
        const Gradients grads = tape.backward(batch_loss);
        ++step;
        adam_step(trainable, grads, opt, schedules::lrate(cfg.warmup, step),
                  cfg.weight_decay);
        for (const auto& [name, tensor] : trainable) full[name] = tensor;
      }
    }

    // Dev metrics: teacher-forced attention loss plus CER from greedy
    // decoder decoding (the probe model has no CTC head).
    const DevMetrics dm = evaluate_supervised(full, probe_mc, dev, 1.0, 0.0,
                                              cfg.label_smoothing, false);
    csv << layer << "," << std::setprecision(17) << dm.attn << "," << dm.cer << "\n";
    rows.push_back(ProbeRow{layer, dm.attn, dm.cer});
  }
  return rows;
}

// ---------------------------------------------------------------------------
// average

Checkpoint cmd_average(const StageConfig& cfg) {
  cfg.validate();
  if (cfg.stage != Stage::kAverage) throw ConfigError("cmd_average: wrong stage");

  std::vector<Checkpoint> inputs;
  for (const auto& path : cfg.checkpoints) inputs.push_back(load_checkpoint(path));
  for (std::size_t i = 1; i < inputs.size(); ++i) {
    if (!inputs[i].config.same_architecture(inputs[0].config)) {
      throw DataError("checkpoint configs differ: " +
                      encode_model_config(inputs[i].config) + " vs " +
                      encode_model_config(inputs[0].config));
    }
    if (inputs[i].params.size() != inputs[0].params.size()) {
      throw DataError("checkpoint parameter sets differ in size");
    }
    for (const auto& [name, tensor] : inputs[i].params) {
      auto it = inputs[0].params.find(name);
      if (it == inputs[0].params.end() || it->second.shape() != tensor.shape()) {
        throw DataError("checkpoint parameter sets differ at '" + name + "'");
      }
    }
  }
  const ModelConfig mc = inputs[0].config;

  const bool supervised = inputs[0].params.count("ctc.weight") > 0 &&
                          inputs[0].params.count("dec.embed") > 0;
  const auto corpus = load_corpus(cfg.dev_manifest, supervised ? mc.vocab_size : -1,
                                  supervised);

  // Score every input on the dev data, lowest is best.
  std::vector<std::pair<double, std::size_t>> scored;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Normalizer norm = extract_normalizer(inputs[i].params);
    const auto dev = prepare_corpus(corpus, norm, mc.downsample);
    const ParamMap params = strip_normalizer(inputs[i].params);
    double score;
    if (supervised) {
      score = evaluate_supervised(params, mc, dev, cfg.attn_weight, cfg.ctc_weight,
                                  cfg.label_smoothing, true)
                  .joint;
    } else {
      score = evaluate_mpc_dev(params, mc, dev, cfg.mask_chunk, cfg.mask_p);
    }
    scored.emplace_back(score, i);
    std::cout << "average: " << cfg.checkpoints[i].string() << " dev score "
              << std::setprecision(10) << score << "\n";
  }
  std::stable_sort(scored.begin(), scored.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });

  // Elementwise mean of the k best, written as best + mean of offsets so
  // averaging k identical checkpoints reproduces them bit for bit.
  const std::size_t k = static_cast<std::size_t>(cfg.average_k);
  const Checkpoint& best = inputs[scored[0].second];
  ParamMap averaged = clone_params(best.params);
  for (auto& [name, tensor] : averaged) {
    std::vector<double>& out = tensor.mutable_data();
    const std::vector<double>& base = best.params.at(name).data();
    for (std::size_t e = 0; e < out.size(); ++e) {
      double offset = 0.0;
      for (std::size_t j = 1; j < k; ++j) {
        offset += inputs[scored[j].second].params.at(name).data()[e] - base[e];
      }
      out[e] = base[e] + offset / static_cast<double>(k);
    }
  }

  Checkpoint out;
  out.stage = "average";
  out.config = mc;
  out.epoch = 0;
  out.step = 0;
  out.parent = "-";
  out.params = std::move(averaged);
  out.rng_state = RunRng::from_seed(cfg.seed).serialize();

  fs::create_directories(cfg.out_dir);
  save_checkpoint(out, cfg.out_dir / "ckpt_average.mpcc");
  return out;
}

// ---------------------------------------------------------------------------
// eval

EvalReport cmd_eval(const StageConfig& cfg) {
  cfg.validate();
  if (cfg.stage != Stage::kEval) throw ConfigError("cmd_eval: wrong stage");

  const Checkpoint ck = load_checkpoint(cfg.init_checkpoint);
  if (!ck.config.same_architecture(cfg.model)) {
    throw ConfigError("checkpoint architecture does not match the configured model");
  }
  const ModelConfig mc = ck.config;
  const ParamMap params = strip_normalizer(ck.params);
  require_sections(params, {"prenet.", "enc.", "ctc."}, "eval checkpoint");
  const Normalizer norm = extract_normalizer(ck.params);

  const auto corpus = load_corpus(cfg.eval_manifest, mc.vocab_size, true);
  const auto prepared = prepare_corpus(corpus, norm, mc.downsample);

  fs::create_directories(cfg.out_dir);
  std::ofstream jsonl(cfg.out_dir / "eval.jsonl");
  if (!jsonl) throw IoError("cannot open eval.jsonl in " + cfg.out_dir.string());

  EvalReport report;
  for (const auto& utt : prepared) {
    const int tprime = utt.padded.frames / mc.downsample;
    const AttentionMask mask = cfg.encoder_mask == EncoderMaskKind::kCausal
                                   ? model::causal_mask(tprime)
                                   : model::full_mask(tprime);
    Tape tape;
    auto layers = model::encode_features(tape, utt.tensor, mask, params, mc);
    Tensor logits = model::ctc_head(tape, layers.back(), params);
    const std::vector<int> hyp = objectives::ctc_greedy_decode(logits);
    const int edits = objectives::edit_distance(utt.transcript, hyp);

    nlohmann::json j;
    j["id"] = utt.id;
    j["ref"] = utt.transcript;
    j["hyp"] = hyp;
    j["edits"] = edits;
    j["ref_len"] = utt.transcript.size();
    j["cer"] = objectives::cer(utt.transcript, hyp);
    jsonl << j.dump() << "\n";

    report.total_edits += edits;
    report.total_ref_len += static_cast<std::int64_t>(utt.transcript.size());
    ++report.utterances;
  }
  report.corpus_cer = static_cast<double>(report.total_edits) /
                      static_cast<double>(report.total_ref_len);

  nlohmann::json summary;
  summary["corpus_cer"] = report.corpus_cer;
  summary["total_edits"] = report.total_edits;
  summary["total_ref_len"] = report.total_ref_len;
  summary["utterances"] = report.utterances;
  std::ofstream sf(cfg.out_dir / "eval_summary.json");
  sf << summary.dump(2) << "\n";

  std::cout << "eval: corpus CER " << std::setprecision(6) << report.corpus_cer
            << " over " << report.utterances << " utterances\n";
  return report;
}

void run_stage(const StageConfig& cfg) {
  switch (cfg.stage) {
    case Stage::kSynth: cmd_synth(cfg); return;
    case Stage::kPretrain: cmd_pretrain(cfg); return;
    case Stage::kAdapt: cmd_adapt(cfg); return;
    case Stage::kFinetune: cmd_finetune(cfg); return;
    case Stage::kProbe: cmd_probe(cfg); return;
    case Stage::kAverage: cmd_average(cfg); return;
    case Stage::kEval: cmd_eval(cfg); return;
  }
  throw ValueError("run_stage: bad stage");
}

}  // namespace mpclab::pipeline
