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

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mpclab/checkpoint.hpp"
#include "mpclab/config.hpp"
#include "mpclab/features.hpp"
#include "mpclab/model.hpp"
#include "mpclab/objectives.hpp"

namespace mpclab::pipeline {

// One JSONL line per optimizer step. wall_ms is the only field that is not
// reproducible across runs; everything else is deterministic in
// (config, inputs, seed). layer_lr carries the effective per-group rate
// when layer-wise discriminative training is active.
struct MetricsRecord {
  std::int64_t step = 0;
  std::int64_t epoch = 0;
  std::string stage;
  std::string branch;  // "mpc" or "apc"
  double l_attn = 0.0;
  double l_ctc = 0.0;
  double l_mpc = 0.0;
  double l_apc = 0.0;
  double alpha_attn = 0.0;
  double beta_ctc = 0.0;
  double gamma_mpc = 0.0;
  double total = 0.0;
  double lr = 0.0;
  std::map<std::string, double> layer_lr;
  double wall_ms = 0.0;

  std::string to_json() const;
};

// The named random streams of one training run. Shuffling, branch
// selection and mask drawing never share a stream, so objective variants
// that skip a draw cannot shift the others.
struct RunRng {
  Rng shuffle;
  Rng branch;
  Rng mask;

  static RunRng from_seed(std::uint64_t seed);
  std::string serialize() const;
  static RunRng deserialize(const std::string& text);
};

struct EvalReport {
  double corpus_cer = 0.0;
  std::int64_t total_edits = 0;
  std::int64_t total_ref_len = 0;
  int utterances = 0;
};

struct ProbeRow {
  int layer = 0;
  double dev_loss = 0.0;
  double dev_cer = 0.0;
};

// Deterministic dev split: an utterance is held out iff the hash of its id
// lands in the 10% bucket.
bool is_dev_utterance(const std::string& utterance_id);

// Joint dev loss (alpha * attention CE + beta * CTC) of a supervised
// checkpoint on a labeled manifest, using the checkpoint's stored feature
// normalizer; the same scoring cmd_average ranks candidates with.
double score_checkpoint(const std::filesystem::path& ckpt_path,
                        const std::filesystem::path& manifest_path,
                        double alpha, double beta, double smoothing);

void cmd_synth(const StageConfig& cfg);
Checkpoint cmd_pretrain(const StageConfig& cfg);
Checkpoint cmd_adapt(const StageConfig& cfg);
Checkpoint cmd_finetune(const StageConfig& cfg);
std::vector<ProbeRow> cmd_probe(const StageConfig& cfg);
Checkpoint cmd_average(const StageConfig& cfg);
EvalReport cmd_eval(const StageConfig& cfg);

// Dispatches on cfg.stage; used by the CLI.
void run_stage(const StageConfig& cfg);

}  // namespace mpclab::pipeline
