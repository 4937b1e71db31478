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

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mpclab/common.hpp"
#include "mpclab/model.hpp"
#include "mpclab/objectives.hpp"
#include "mpclab/schedules.hpp"

namespace mpclab::pipeline {

enum class Stage { kSynth, kPretrain, kAdapt, kFinetune, kProbe, kAverage, kEval };

std::string stage_name(Stage s);
Stage stage_from_name(const std::string& name);

enum class Objective { kMpc, kApc, kUnified };

enum class EncoderMaskKind { kFull, kCausal };

// Parameters of the synthetic corpus generator. With latent tokens on,
// each utterance is a sequence of token events, and every event raises the
// energy of one frequency band over a span of frames; `labeled` controls
// whether those tokens are also written out as transcripts. An unlabeled
// corpus with latent tokens is the stand-in for untranscribed speech:
// the content is there, the labels are not.
struct SynthSpec {
  int count = 200;
  int frames_min = 64;
  int frames_max = 192;
  int feat_dim = 40;
  double smoothness = 0.9;
  double pause_rate = 0.5;
  double pitch_drift = 0.5;
  bool latent_tokens = false;
  bool labeled = false;  // implies latent tokens
  int vocab_size = 8;
  int tokens_min = 2;
  int tokens_max = 6;
  int span_min = 8;
  int span_max = 16;
  double token_boost = 2.0;
};

// Fully resolved configuration for one stage run. Parsed from a flat
// sectioned key-value file; unknown sections or keys are hard errors.
struct StageConfig {
  Stage stage = Stage::kPretrain;
  std::uint64_t seed = 1;
  std::filesystem::path out_dir;
  int epochs = 1;
  int batch_size = 8;

  std::filesystem::path train_manifest;
  std::filesystem::path dev_manifest;   // average: scoring data
  std::filesystem::path eval_manifest;  // eval: scoring data
  std::vector<std::filesystem::path> checkpoints;  // average: inputs
  int average_k = 1;
  bool use_dev_split = true;

  model::ModelConfig model;
  EncoderMaskKind encoder_mask = EncoderMaskKind::kFull;  // eval-time choice

  Objective objective = Objective::kMpc;
  double switch_p = 0.5;
  int apc_step = 5;
  int mask_chunk = 4;
  double mask_p = 0.15;
  double attn_weight = 0.7;
  double ctc_weight = 0.3;
  double label_smoothing = 0.1;

  schedules::WarmupConfig warmup;  // d_model filled from model config
  double weight_decay = 0.0;
  schedules::LayerwiseConfig layerwise;
  schedules::MpcWeightSchedule gamma;

  int target_adapt_epochs = 5;
  bool layerwise_enabled = false;
  bool multitask_mpc = false;
  // Optional two-pass variant: attention/CTC see the clean input while the
  // reconstruction branch sees the masked one.
  bool multitask_clean_input = false;
  int probe_epochs = 5;

  SynthSpec synth;

  std::filesystem::path init_checkpoint;  // --init

  void validate() const;
};

// Parses the config file and applies stage-specific defaults for keys the
// file leaves unset (pre-training warms up with k=0.5 over 5000 steps and
// no weight decay; fine-tuning with k=1.0 over 25000 steps and weight
// decay 1e-5).
StageConfig load_stage_config(const std::filesystem::path& path, Stage stage);

}  // namespace mpclab::pipeline
