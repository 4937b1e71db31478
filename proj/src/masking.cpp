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

#include "mpclab/masking.hpp"

namespace mpclab::masking {

MaskPlan plan_masks(int total_frames, int valid_frames, int chunk_size,
                    double p, Rng& rng) {
  if (!(p >= 0.0 && p <= 1.0)) {
    throw ValueError("plan_masks: p must be in [0,1]");
  }
  if (chunk_size < 1) throw ValueError("plan_masks: chunk_size must be >= 1");
  if (valid_frames < 0 || valid_frames > total_frames) {
    throw ValueError("plan_masks: valid_frames out of range");
  }

  MaskPlan plan;
  plan.chunk_size = chunk_size;
  plan.frame_mask.assign(static_cast<std::size_t>(total_frames), false);
  const int chunks = (valid_frames + chunk_size - 1) / chunk_size;
  for (int c = 0; c < chunks; ++c) {
    if (rng.uniform() < p) plan.masked_chunks.push_back(c);
  }
  for (int c : plan.masked_chunks) {
    const int begin = c * chunk_size;
    const int end = std::min((c + 1) * chunk_size, valid_frames);
    for (int i = begin; i < end; ++i) plan.frame_mask[static_cast<std::size_t>(i)] = true;
  }
  return plan;
}

features::FeatureSequence apply_mask(const features::FeatureSequence& seq,
                                     const MaskPlan& plan) {
  if (static_cast<int>(plan.frame_mask.size()) != seq.frames) {
    throw ShapeError("apply_mask: plan covers " +
                     std::to_string(plan.frame_mask.size()) +
                     " frames, sequence has " + std::to_string(seq.frames));
  }
  features::FeatureSequence out = seq;
  for (int t = 0; t < seq.frames; ++t) {
    if (!plan.frame_mask[static_cast<std::size_t>(t)]) continue;
    for (int b = 0; b < seq.bins; ++b) out.at(t, b) = 0.0;
  }
  return out;
}

}  // namespace mpclab::masking
