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
#include <utility>
#include <vector>

#include "mpclab/common.hpp"

namespace mpclab::features {

// A T x D matrix of filterbank-like frames plus metadata. Values are
// unitless log-energy-like floats; the sample-rate tag is metadata only.
struct FeatureSequence {
  std::string utterance_id;
  int sample_rate_tag = 16000;
  int frames = 0;  // T
  int bins = 0;    // D
  std::vector<double> data;  // row-major T x D

  double at(int t, int b) const {
    return data[static_cast<std::size_t>(t) * bins + b];
  }
  double& at(int t, int b) {
    return data[static_cast<std::size_t>(t) * bins + b];
  }
};

// Knobs for the synthetic generator. smoothness is the frame-to-frame
// AR(1) coefficient; pause_rate is the expected number of low-energy
// segments per 100 frames; pitch_drift scales a slow sinusoidal sweep.
struct SynthStyle {
  double smoothness = 0.6;
  double pause_rate = 0.0;
  double pitch_drift = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

// Deterministic in (style, seed, t, d): per-bin AR(1) noise mixed with
// band-level AR(1) noise, multiplicative low-energy pauses, and a slow
// sinusoidal drift across bins.
FeatureSequence synth_generate(const SynthStyle& style, int t, int d);

// Binary feature file: magic "MPCF", version u32=1, T u32, D u32, then
// T*D little-endian IEEE-754 singles, row-major.
void save_features(const FeatureSequence& seq, const std::filesystem::path& path);
FeatureSequence load_features(const std::filesystem::path& path);

struct ManifestEntry {
  std::string feature_path;
  std::optional<std::vector<int>> transcript;
};

// One entry per line: feature_path<TAB>space-separated-token-ids, with the
// token field optional and '#' lines ignored. Paths resolve against the
// manifest's directory.
struct Manifest {
  std::vector<ManifestEntry> entries;
  std::filesystem::path base_dir;

  std::filesystem::path resolve(const ManifestEntry& e) const;
};

Manifest load_manifest(const std::filesystem::path& path);
void write_manifest(const std::vector<ManifestEntry>& entries,
                    const std::filesystem::path& path);

// Per-bin corpus statistics with a 1e-5 floor on the standard deviation.
struct Normalizer {
  std::vector<double> mean;
  std::vector<double> stddev;
};

Normalizer fit_normalizer(const std::vector<FeatureSequence>& corpus);
Normalizer fit_normalizer(const Manifest& manifest);
FeatureSequence apply_normalizer(const FeatureSequence& seq, const Normalizer& n);

// Appends zero frames until T is the least multiple of r >= T; second
// element is the original frame count.
std::pair<FeatureSequence, int> pad_to_multiple(const FeatureSequence& seq, int r);

}  // namespace mpclab::features
