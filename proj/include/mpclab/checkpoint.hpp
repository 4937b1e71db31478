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
#include <string>

#include "mpclab/common.hpp"
#include "mpclab/model.hpp"
#include "mpclab/tensor.hpp"

namespace mpclab::pipeline {

// Serialized training state. The on-disk layout is
//   magic "MPCC", version u32,
//   u32-length-prefixed UTF-8 provenance record
//     (stage/epoch/step/parent plus the model config echo),
//   u32 tensor count, then per tensor:
//     u16 name length, name bytes, u8 rank, u32 dims x rank,
//     IEEE-754 double little-endian payload,
//   optimizer state in the same tensor encoding,
//   u32-length-prefixed raw rng state bytes.
// Parameters are stored at full 64-bit precision so a round-trip is
// bitwise lossless and training resumes deterministically.
struct Checkpoint {
  std::uint32_t version = 1;
  std::string stage = "pretrain";
  model::ModelConfig config;
  std::int64_t epoch = 0;
  std::int64_t step = 0;
  std::string parent = "-";
  numerics::ParamMap params;  // includes non-trainable norm.mean / norm.std
  numerics::AdamState opt;
  std::string rng_state;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Identity of a checkpoint file, used as the parent link in provenance.
std::string checkpoint_file_digest(const std::filesystem::path& path);

std::string encode_model_config(const model::ModelConfig& cfg);
model::ModelConfig decode_model_config(const std::string& text);

}  // namespace mpclab::pipeline
