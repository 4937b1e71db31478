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

#include "mpclab/config.hpp"

#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace mpclab::pipeline {

namespace {

struct RawConfig {
  // section -> key -> value (last occurrence wins within a file)
  std::map<std::string, std::map<std::string, std::string>> values;

  bool has(const std::string& section, const std::string& key) const {
    auto s = values.find(section);
    return s != values.end() && s->second.count(key) > 0;
  }
  const std::string& get(const std::string& section, const std::string& key) const {
    return values.at(section).at(key);
  }
};

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t");
  std::size_t e = s.find_last_not_of(" \t");
  return b == std::string::npos ? "" : s.substr(b, e - b + 1);
}

RawConfig parse_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file: " + path.string());
  RawConfig raw;
  std::string line, section;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    if (t.front() == '[') {
      if (t.back() != ']') {
        throw ConfigError(path.string() + ":" + std::to_string(lineno) +
                          ": malformed section header '" + t + "'");
      }
      section = trim(t.substr(1, t.size() - 2));
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) +
                        ": expected key = value, got '" + t + "'");
    }
    if (section.empty()) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) +
                        ": key outside any [section]");
    }
    raw.values[section][trim(t.substr(0, eq))] = trim(t.substr(eq + 1));
  }
  return raw;
}

int to_int(const std::string& v, const std::string& where) {
  try {
    std::size_t used = 0;
    const long out = std::stol(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return static_cast<int>(out);
  } catch (const std::exception&) {
    throw ConfigError(where + ": expected an integer, got '" + v + "'");
  }
}

std::uint64_t to_u64(const std::string& v, const std::string& where) {
  try {
    std::size_t used = 0;
    const unsigned long long out = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return static_cast<std::uint64_t>(out);
  } catch (const std::exception&) {
    throw ConfigError(where + ": expected an unsigned integer, got '" + v + "'");
  }
}

double to_double(const std::string& v, const std::string& where) {
  try {
    std::size_t used = 0;
    const double out = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError(where + ": expected a number, got '" + v + "'");
  }
}

bool to_bool(const std::string& v, const std::string& where) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError(where + ": expected a boolean, got '" + v + "'");
}

const std::map<std::string, std::set<std::string>> kKnownKeys = {
    {"stage", {"name", "seed", "out_dir", "epochs", "batch_size"}},
    {"data",
     {"train_manifest", "dev_manifest", "eval_manifest", "checkpoints",
      "average_k", "use_dev_split"}},
    {"model",
     {"encoder_layers", "decoder_layers", "d_model", "d_ff", "heads", "feat_dim",
      "vocab_size", "prenet_channels", "downsample", "encoder_mask"}},
    {"objective",
     {"kind", "switch_p", "apc_step", "mask_chunk", "mask_p", "attn_weight",
      "ctc_weight", "label_smoothing"}},
    {"schedule",
     {"lr_k", "warmup_n", "dmodel_exponent", "weight_decay", "layerwise_lambda",
      "layerwise_theta", "gamma0", "gamma_halve_every"}},
    {"transfer",
     {"target_adapt_epochs", "layerwise", "multitask_mpc", "multitask_clean_input",
      "probe_epochs"}},
    {"synth",
     {"count", "frames_min", "frames_max", "feat_dim", "smoothness", "pause_rate",
      "pitch_drift", "latent_tokens", "labeled", "vocab_size", "tokens_min",
      "tokens_max", "span_min", "span_max", "token_boost"}},
};

void reject_unknown(const RawConfig& raw, const std::filesystem::path& path) {
  for (const auto& [section, kvs] : raw.values) {
    auto known = kKnownKeys.find(section);
    if (known == kKnownKeys.end()) {
      throw ConfigError(path.string() + ": unknown section [" + section + "]");
    }
    for (const auto& [key, value] : kvs) {
      (void)value;
      if (!known->second.count(key)) {
        throw ConfigError(path.string() + ": unknown key '" + key +
                          "' in section [" + section + "]");
      }
    }
  }
}

}  // namespace

std::string stage_name(Stage s) {
  switch (s) {
    case Stage::kSynth: return "synth";
    case Stage::kPretrain: return "pretrain";
    case Stage::kAdapt: return "adapt";
    case Stage::kFinetune: return "finetune";
    case Stage::kProbe: return "probe";
    case Stage::kAverage: return "average";
    case Stage::kEval: return "eval";
  }
  throw ValueError("stage_name: bad stage");
}

Stage stage_from_name(const std::string& name) {
  if (name == "synth") return Stage::kSynth;
  if (name == "pretrain") return Stage::kPretrain;
  if (name == "adapt") return Stage::kAdapt;
  if (name == "finetune") return Stage::kFinetune;
  if (name == "probe") return Stage::kProbe;
  if (name == "average") return Stage::kAverage;
  if (name == "eval") return Stage::kEval;
  throw ConfigError("unknown stage '" + name + "'");
}

void StageConfig::validate() const {
  if (out_dir.empty()) throw ConfigError("out_dir is required");
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  try {
    model.validate();
  } catch (const ValueError& e) {
    throw ConfigError(e.what());
  }
  if (!(mask_p >= 0.0 && mask_p <= 1.0)) throw ConfigError("mask_p must be in [0,1]");
  if (mask_chunk < 1) throw ConfigError("mask_chunk must be >= 1");
  if (!(switch_p >= 0.0 && switch_p <= 1.0)) {
    throw ConfigError("switch_p must be in [0,1]");
  }
  if (apc_step < 1) throw ConfigError("apc_step must be >= 1");
  if (attn_weight < 0.0 || ctc_weight < 0.0) {
    throw ConfigError("loss weights must be >= 0");
  }
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) {
    throw ConfigError("label_smoothing must be in [0,1)");
  }
  if (warmup.k <= 0.0 || warmup.warmup_n < 1) {
    throw ConfigError("schedule: lr_k must be > 0 and warmup_n >= 1");
  }
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
  if (!(layerwise.lambda > 0.0 && layerwise.lambda < 1.0)) {
    throw ConfigError("layerwise_lambda must be in (0,1)");
  }
  if (gamma.gamma0 < 0.0 || gamma.halve_every < 1) {
    throw ConfigError("gamma0 must be >= 0 and gamma_halve_every >= 1");
  }

  switch (stage) {
    case Stage::kSynth:
      if (synth.count < 1) throw ConfigError("synth: count must be >= 1");
      if (synth.frames_min < 1 || synth.frames_max < synth.frames_min) {
        throw ConfigError("synth: bad frame range");
      }
      if (synth.labeled || synth.latent_tokens) {
        if (synth.vocab_size < 2) throw ConfigError("synth: token events need vocab_size >= 2");
        if (synth.vocab_size - 1 > synth.feat_dim) {
          throw ConfigError("synth: vocab_size-1 token bands need at least that many bins");
        }
        if (synth.tokens_min < 1 || synth.tokens_max < synth.tokens_min) {
          throw ConfigError("synth: bad token range");
        }
        if (synth.span_min < 1 || synth.span_max < synth.span_min) {
          throw ConfigError("synth: bad span range");
        }
      }
      break;
    case Stage::kPretrain:
    case Stage::kAdapt:
      if (train_manifest.empty()) throw ConfigError("train_manifest is required");
      if (layerwise_enabled || multitask_mpc) {
        throw ConfigError("layerwise/multitask options apply to labeled "
                          "fine-tuning only");
      }
      if (stage == Stage::kAdapt && init_checkpoint.empty()) {
        throw ConfigError("adapt requires --init checkpoint");
      }
      if (stage == Stage::kAdapt && target_adapt_epochs < 0) {
        throw ConfigError("target_adapt_epochs must be >= 0");
      }
      break;
    case Stage::kFinetune:
      if (train_manifest.empty()) throw ConfigError("train_manifest is required");
      if (multitask_mpc && init_checkpoint.empty()) {
        throw ConfigError("multitask_mpc needs a pre-trained reconstruction "
                          "head; pass --init");
      }
      break;
    case Stage::kProbe:
      if (train_manifest.empty()) throw ConfigError("train_manifest is required");
      if (init_checkpoint.empty()) throw ConfigError("probe requires --init checkpoint");
      if (probe_epochs < 0) throw ConfigError("probe_epochs must be >= 0");
      break;
    case Stage::kAverage:
      if (checkpoints.size() < 1) throw ConfigError("average: checkpoints list is required");
      if (average_k < 1 || average_k > static_cast<int>(checkpoints.size())) {
        throw ConfigError("average: need >= k checkpoints");
      }
      if (dev_manifest.empty()) throw ConfigError("average: dev_manifest is required");
      break;
    case Stage::kEval:
      if (eval_manifest.empty()) throw ConfigError("eval: eval_manifest is required");
      if (init_checkpoint.empty()) throw ConfigError("eval requires --init checkpoint");
      break;
  }
}

StageConfig load_stage_config(const std::filesystem::path& path, Stage stage) {
  const RawConfig raw = parse_file(path);
  reject_unknown(raw, path);

  StageConfig cfg;
  cfg.stage = stage;

  if (raw.has("stage", "name")) {
    const Stage declared = stage_from_name(raw.get("stage", "name"));
    if (declared != stage) {
      throw ConfigError(path.string() + ": config declares stage '" +
                        stage_name(declared) + "' but the command is '" +
                        stage_name(stage) + "'");
    }
  }
  if (raw.has("stage", "seed")) cfg.seed = to_u64(raw.get("stage", "seed"), "seed");
  if (raw.has("stage", "out_dir")) cfg.out_dir = raw.get("stage", "out_dir");
  if (raw.has("stage", "epochs")) cfg.epochs = to_int(raw.get("stage", "epochs"), "epochs");
  if (raw.has("stage", "batch_size")) {
    cfg.batch_size = to_int(raw.get("stage", "batch_size"), "batch_size");
  }

  if (raw.has("data", "train_manifest")) cfg.train_manifest = raw.get("data", "train_manifest");
  if (raw.has("data", "dev_manifest")) cfg.dev_manifest = raw.get("data", "dev_manifest");
  if (raw.has("data", "eval_manifest")) cfg.eval_manifest = raw.get("data", "eval_manifest");
  if (raw.has("data", "checkpoints")) {
    std::istringstream ss(raw.get("data", "checkpoints"));
    std::string item;
    while (std::getline(ss, item, ',')) {
      const std::string t = trim(item);
      if (!t.empty()) cfg.checkpoints.emplace_back(t);
    }
  }
  if (raw.has("data", "average_k")) cfg.average_k = to_int(raw.get("data", "average_k"), "average_k");
  if (raw.has("data", "use_dev_split")) {
    cfg.use_dev_split = to_bool(raw.get("data", "use_dev_split"), "use_dev_split");
  }

  auto model_int = [&](const char* key, int& field) {
    if (raw.has("model", key)) field = to_int(raw.get("model", key), key);
  };
  model_int("encoder_layers", cfg.model.encoder_layers);
  model_int("decoder_layers", cfg.model.decoder_layers);
  model_int("d_model", cfg.model.d_model);
  model_int("d_ff", cfg.model.d_ff);
  model_int("heads", cfg.model.heads);
  model_int("feat_dim", cfg.model.feat_dim);
  model_int("vocab_size", cfg.model.vocab_size);
  model_int("prenet_channels", cfg.model.prenet_channels);
  model_int("downsample", cfg.model.downsample);
  if (raw.has("model", "encoder_mask")) {
    const std::string v = raw.get("model", "encoder_mask");
    if (v == "full") cfg.encoder_mask = EncoderMaskKind::kFull;
    else if (v == "causal") cfg.encoder_mask = EncoderMaskKind::kCausal;
    else throw ConfigError("encoder_mask must be 'full' or 'causal'");
  }

  if (raw.has("objective", "kind")) {
    const std::string v = raw.get("objective", "kind");
    if (v == "mpc") cfg.objective = Objective::kMpc;
    else if (v == "apc") cfg.objective = Objective::kApc;
    else if (v == "unified") cfg.objective = Objective::kUnified;
    else throw ConfigError("objective kind must be mpc, apc or unified");
  }
  if (raw.has("objective", "switch_p")) cfg.switch_p = to_double(raw.get("objective", "switch_p"), "switch_p");
  if (raw.has("objective", "apc_step")) cfg.apc_step = to_int(raw.get("objective", "apc_step"), "apc_step");
  if (raw.has("objective", "mask_chunk")) cfg.mask_chunk = to_int(raw.get("objective", "mask_chunk"), "mask_chunk");
  if (raw.has("objective", "mask_p")) cfg.mask_p = to_double(raw.get("objective", "mask_p"), "mask_p");
  if (raw.has("objective", "attn_weight")) cfg.attn_weight = to_double(raw.get("objective", "attn_weight"), "attn_weight");
  if (raw.has("objective", "ctc_weight")) cfg.ctc_weight = to_double(raw.get("objective", "ctc_weight"), "ctc_weight");
  if (raw.has("objective", "label_smoothing")) {
    cfg.label_smoothing = to_double(raw.get("objective", "label_smoothing"), "label_smoothing");
  }

  // Stage-dependent schedule defaults; explicit keys win.
  const bool finetune_like = stage == Stage::kFinetune || stage == Stage::kProbe;
  cfg.warmup.k = finetune_like ? 1.0 : 0.5;
  cfg.warmup.warmup_n = finetune_like ? 25000 : 5000;
  cfg.weight_decay = finetune_like ? 1e-5 : 0.0;
  if (raw.has("schedule", "lr_k")) cfg.warmup.k = to_double(raw.get("schedule", "lr_k"), "lr_k");
  if (raw.has("schedule", "warmup_n")) cfg.warmup.warmup_n = to_int(raw.get("schedule", "warmup_n"), "warmup_n");
  if (raw.has("schedule", "dmodel_exponent")) {
    cfg.warmup.dmodel_exponent = to_double(raw.get("schedule", "dmodel_exponent"), "dmodel_exponent");
  }
  if (raw.has("schedule", "weight_decay")) cfg.weight_decay = to_double(raw.get("schedule", "weight_decay"), "weight_decay");
  if (raw.has("schedule", "layerwise_lambda")) {
    cfg.layerwise.lambda = to_double(raw.get("schedule", "layerwise_lambda"), "layerwise_lambda");
  }
  if (raw.has("schedule", "layerwise_theta")) {
    cfg.layerwise.theta = to_double(raw.get("schedule", "layerwise_theta"), "layerwise_theta");
  }
  if (raw.has("schedule", "gamma0")) cfg.gamma.gamma0 = to_double(raw.get("schedule", "gamma0"), "gamma0");
  if (raw.has("schedule", "gamma_halve_every")) {
    cfg.gamma.halve_every = to_int(raw.get("schedule", "gamma_halve_every"), "gamma_halve_every");
  }
  cfg.warmup.d_model = cfg.model.d_model;

  if (raw.has("transfer", "target_adapt_epochs")) {
    cfg.target_adapt_epochs = to_int(raw.get("transfer", "target_adapt_epochs"), "target_adapt_epochs");
  }
  if (raw.has("transfer", "layerwise")) cfg.layerwise_enabled = to_bool(raw.get("transfer", "layerwise"), "layerwise");
  if (raw.has("transfer", "multitask_mpc")) cfg.multitask_mpc = to_bool(raw.get("transfer", "multitask_mpc"), "multitask_mpc");
  if (raw.has("transfer", "multitask_clean_input")) {
    cfg.multitask_clean_input = to_bool(raw.get("transfer", "multitask_clean_input"), "multitask_clean_input");
  }
  if (raw.has("transfer", "probe_epochs")) cfg.probe_epochs = to_int(raw.get("transfer", "probe_epochs"), "probe_epochs");

  auto synth_int = [&](const char* key, int& field) {
    if (raw.has("synth", key)) field = to_int(raw.get("synth", key), key);
  };
  synth_int("count", cfg.synth.count);
  synth_int("frames_min", cfg.synth.frames_min);
  synth_int("frames_max", cfg.synth.frames_max);
  synth_int("feat_dim", cfg.synth.feat_dim);
  if (raw.has("synth", "smoothness")) cfg.synth.smoothness = to_double(raw.get("synth", "smoothness"), "smoothness");
  if (raw.has("synth", "pause_rate")) cfg.synth.pause_rate = to_double(raw.get("synth", "pause_rate"), "pause_rate");
  if (raw.has("synth", "pitch_drift")) cfg.synth.pitch_drift = to_double(raw.get("synth", "pitch_drift"), "pitch_drift");
  if (raw.has("synth", "latent_tokens")) cfg.synth.latent_tokens = to_bool(raw.get("synth", "latent_tokens"), "latent_tokens");
  if (raw.has("synth", "labeled")) cfg.synth.labeled = to_bool(raw.get("synth", "labeled"), "labeled");
  synth_int("vocab_size", cfg.synth.vocab_size);
  synth_int("tokens_min", cfg.synth.tokens_min);
  synth_int("tokens_max", cfg.synth.tokens_max);
  synth_int("span_min", cfg.synth.span_min);
  synth_int("span_max", cfg.synth.span_max);
  if (raw.has("synth", "token_boost")) cfg.synth.token_boost = to_double(raw.get("synth", "token_boost"), "token_boost");

  return cfg;
}

}  // namespace mpclab::pipeline
