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

#include "mpclab/features.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace mpclab::features {

namespace {

constexpr char kMagic[4] = {'M', 'P', 'C', 'F'};
constexpr std::uint32_t kVersion = 1;
constexpr double kTwoPi = 2.0 * 3.14159265358979323846;

void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& is, const char* what) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (is.gcount() != 4) {
    throw ParseError(std::string("feature file truncated while reading ") + what);
  }
  return static_cast<std::uint32_t>(b[0]) |
         (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) |
         (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void SynthStyle::validate() const {
  if (!(smoothness >= 0.0 && smoothness <= 1.0)) {
    throw ValueError("SynthStyle: smoothness must be in [0,1]");
  }
  if (pause_rate < 0.0) throw ValueError("SynthStyle: pause_rate must be >= 0");
  if (pitch_drift < 0.0) throw ValueError("SynthStyle: pitch_drift must be >= 0");
}

FeatureSequence synth_generate(const SynthStyle& style, int t, int d) {
  style.validate();
  if (t < 1 || d < 1) throw ValueError("synth_generate: T and D must be >= 1");

  Rng rng(style.seed);
  const double phi = style.smoothness;
  const double innovation = std::sqrt(std::max(0.0, 1.0 - phi * phi));
  const int bands = std::max(1, d / 8);

  // Stationary start so statistics hold from frame 0.
  std::vector<double> bin_state(d), band_state(bands);
  for (int b = 0; b < d; ++b) bin_state[b] = rng.normal();
  for (int b = 0; b < bands; ++b) band_state[b] = rng.normal();

  const double drift_phase = rng.uniform() * kTwoPi;

  FeatureSequence seq;
  seq.frames = t;
  seq.bins = d;
  seq.data.resize(static_cast<std::size_t>(t) * d);

  int pause_left = 0;
  for (int i = 0; i < t; ++i) {
    if (i > 0) {
      for (int b = 0; b < bands; ++b)
        band_state[b] = phi * band_state[b] + innovation * rng.normal();
      for (int b = 0; b < d; ++b)
        bin_state[b] = phi * bin_state[b] + innovation * rng.normal();
    }
    double gain = 1.0;
    if (pause_left > 0) {
      gain = 0.15;
      --pause_left;
    } else if (style.pause_rate > 0.0 &&
               rng.uniform() < style.pause_rate / 100.0) {
      pause_left = 5 + rng.uniform_int(6);
      gain = 0.15;
      --pause_left;
    }
    for (int b = 0; b < d; ++b) {
      const double drift =
          style.pitch_drift *
          std::sin(kTwoPi * i / 256.0 + drift_phase + kTwoPi * b / d);
      const double mixed = bin_state[b] + 0.5 * band_state[b * bands / d] + drift;
      seq.data[static_cast<std::size_t>(i) * d + b] = gain * mixed;
    }
  }
  return seq;
}

void save_features(const FeatureSequence& seq, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for write: " + path.string());
  os.write(kMagic, 4);
  write_u32(os, kVersion);
  write_u32(os, static_cast<std::uint32_t>(seq.frames));
  write_u32(os, static_cast<std::uint32_t>(seq.bins));
  for (double v : seq.data) {
    const float f = static_cast<float>(v);
    static_assert(sizeof(float) == 4);
    os.write(reinterpret_cast<const char*>(&f), 4);
  }
  if (!os) throw IoError("write failed: " + path.string());
}

FeatureSequence load_features(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for read: " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (is.gcount() != 4 || std::memcmp(magic, kMagic, 4) != 0) {
    throw ParseError("bad magic in feature file: " + path.string());
  }
  const std::uint32_t version = read_u32(is, "version");
  if (version != kVersion) {
    throw ParseError("unsupported feature file version " +
                     std::to_string(version) + ": " + path.string());
  }
  const std::uint32_t t = read_u32(is, "frame count");
  const std::uint32_t d = read_u32(is, "bin count");
  if (t < 1 || d < 1) {
    throw ParseError("feature file declares empty shape: " + path.string());
  }
  FeatureSequence seq;
  seq.utterance_id = path.stem().string();
  seq.frames = static_cast<int>(t);
  seq.bins = static_cast<int>(d);
  seq.data.resize(static_cast<std::size_t>(t) * d);
  for (std::size_t i = 0; i < seq.data.size(); ++i) {
    float f;
    is.read(reinterpret_cast<char*>(&f), 4);
    if (is.gcount() != 4) {
      throw ParseError("feature payload truncated (" + std::to_string(i) +
                       " of " + std::to_string(seq.data.size()) +
                       " values): " + path.string());
    }
    if (!std::isfinite(f)) {
      throw ParseError("non-finite feature value: " + path.string());
    }
    seq.data[i] = static_cast<double>(f);
  }
  is.peek();
  if (!is.eof()) {
    throw ParseError("trailing bytes after feature payload: " + path.string());
  }
  return seq;
}

std::filesystem::path Manifest::resolve(const ManifestEntry& e) const {
  std::filesystem::path p(e.feature_path);
  return p.is_absolute() ? p : base_dir / p;
}

Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open manifest: " + path.string());
  Manifest m;
  m.base_dir = path.parent_path();
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    ManifestEntry entry;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      entry.feature_path = line;
    } else {
      entry.feature_path = line.substr(0, tab);
      std::istringstream tokens(line.substr(tab + 1));
      std::vector<int> ids;
      std::string tok;
      while (tokens >> tok) {
        try {
          std::size_t used = 0;
          const int id = std::stoi(tok, &used);
          if (used != tok.size() || id < 0) throw std::invalid_argument(tok);
          ids.push_back(id);
        } catch (const std::exception&) {
          throw ParseError(path.string() + ":" + std::to_string(lineno) +
                           ": bad token id '" + tok + "'");
        }
      }
      entry.transcript = std::move(ids);
    }
    if (entry.feature_path.empty()) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) +
                       ": empty feature path");
    }
    m.entries.push_back(std::move(entry));
  }
  return m;
}

void write_manifest(const std::vector<ManifestEntry>& entries,
                    const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open manifest for write: " + path.string());
  for (const auto& e : entries) {
    os << e.feature_path;
    if (e.transcript.has_value()) {
      os << '\t';
      for (std::size_t i = 0; i < e.transcript->size(); ++i) {
        if (i) os << ' ';
        os << (*e.transcript)[i];
      }
    }
    os << '\n';
  }
  if (!os) throw IoError("manifest write failed: " + path.string());
}

Normalizer fit_normalizer(const std::vector<FeatureSequence>& corpus) {
  if (corpus.empty()) throw DataError("fit_normalizer: empty corpus");
  const int d = corpus[0].bins;
  std::int64_t total = 0;
  std::vector<double> mean(d, 0.0);
  for (const auto& seq : corpus) {
    if (seq.bins != d) {
      throw DataError("fit_normalizer: bin count mismatch (" +
                      std::to_string(seq.bins) + " vs " + std::to_string(d) +
                      ") in utterance '" + seq.utterance_id + "'");
    }
    for (int t = 0; t < seq.frames; ++t)
      for (int b = 0; b < d; ++b) mean[b] += seq.at(t, b);
    total += seq.frames;
  }
  for (int b = 0; b < d; ++b) mean[b] /= static_cast<double>(total);

  std::vector<double> var(d, 0.0);
  for (const auto& seq : corpus) {
    for (int t = 0; t < seq.frames; ++t)
      for (int b = 0; b < d; ++b) {
        const double c = seq.at(t, b) - mean[b];
        var[b] += c * c;
      }
  }
  Normalizer n;
  n.mean = std::move(mean);
  n.stddev.resize(d);
  for (int b = 0; b < d; ++b) {
    n.stddev[b] = std::max(std::sqrt(var[b] / static_cast<double>(total)), 1e-5);
  }
  return n;
}

Normalizer fit_normalizer(const Manifest& manifest) {
  if (manifest.entries.empty()) throw DataError("fit_normalizer: empty manifest");
  std::vector<FeatureSequence> corpus;
  corpus.reserve(manifest.entries.size());
  for (const auto& e : manifest.entries) corpus.push_back(load_features(manifest.resolve(e)));
  return fit_normalizer(corpus);
}

FeatureSequence apply_normalizer(const FeatureSequence& seq, const Normalizer& n) {
  if (static_cast<int>(n.mean.size()) != seq.bins ||
      static_cast<int>(n.stddev.size()) != seq.bins) {
    throw ShapeError("apply_normalizer: normalizer has " +
                     std::to_string(n.mean.size()) + " bins, sequence has " +
                     std::to_string(seq.bins));
  }
  FeatureSequence out = seq;
  for (int t = 0; t < seq.frames; ++t)
    for (int b = 0; b < seq.bins; ++b)
      out.at(t, b) = (seq.at(t, b) - n.mean[b]) / n.stddev[b];
  return out;
}

std::pair<FeatureSequence, int> pad_to_multiple(const FeatureSequence& seq, int r) {
  if (r < 1) throw ValueError("pad_to_multiple: r must be >= 1");
  const int valid = seq.frames;
  const int padded = ((valid + r - 1) / r) * r;
  FeatureSequence out = seq;
  out.frames = padded;
  out.data.resize(static_cast<std::size_t>(padded) * seq.bins, 0.0);
  return {std::move(out), valid};
}

}  // namespace mpclab::features
