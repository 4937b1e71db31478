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

#include <vector>

#include "mpclab/common.hpp"
#include "mpclab/features.hpp"

namespace mpclab::masking {

// Chunk-level masking decisions for one feed of one sequence. Frame i is
// masked iff its chunk was drawn and i lies in the valid (unpadded) region.
struct MaskPlan {
  int chunk_size = 4;
  std::vector<int> masked_chunks;
  std::vector<bool> frame_mask;  // length = total frames (incl. padding)

  int masked_frame_count() const {
    int n = 0;
    for (bool b : frame_mask) n += b ? 1 : 0;
    return n;
  }
};

// Draws a fresh plan: every chunk overlapping the valid region is masked
// independently with probability p, the final partial chunk included.
// Call once per feed; the pattern is never reused across feeds.
MaskPlan plan_masks(int total_frames, int valid_frames, int chunk_size,
                    double p, Rng& rng);

// Replaces masked frames with all-zero vectors; unmasked frames are
// passed through bit-for-bit. The caller keeps the original sequence as
// the reconstruction target.
features::FeatureSequence apply_mask(const features::FeatureSequence& seq,
                                     const MaskPlan& plan);

}  // namespace mpclab::masking
