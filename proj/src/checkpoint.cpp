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

#include "mpclab/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

namespace mpclab::pipeline {

namespace {

constexpr char kMagic[4] = {'M', 'P', 'C', 'C'};

void write_u16(std::ostream& os, std::uint16_t v) {
  unsigned char b[2] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 2);
}

void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 4);
}

void write_f64(std::ostream& os, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint16_t read_u16(std::istream& is, const char* what) {
  unsigned char b[2];
  is.read(reinterpret_cast<char*>(b), 2);
  if (is.gcount() != 2) throw ParseError(std::string("checkpoint truncated at ") + what);
  return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

std::uint32_t read_u32(std::istream& is, const char* what) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (is.gcount() != 4) throw ParseError(std::string("checkpoint truncated at ") + what);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

double read_f64(std::istream& is, const char* what) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (is.gcount() != 8) throw ParseError(std::string("checkpoint truncated at ") + what);
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

void write_tensor(std::ostream& os, const std::string& name,
                  const std::vector<int>& shape, const std::vector<double>& data) {
  if (name.size() > 0xffff) throw ValueError("tensor name too long: " + name);
  write_u16(os, static_cast<std::uint16_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  os.put(static_cast<char>(shape.size()));
  for (int d : shape) write_u32(os, static_cast<std::uint32_t>(d));
  for (double v : data) write_f64(os, v);
}

struct NamedTensor {
  std::string name;
  std::vector<int> shape;
  std::vector<double> data;
};

NamedTensor read_tensor(std::istream& is) {
  NamedTensor t;
  const std::uint16_t name_len = read_u16(is, "tensor name length");
  t.name.resize(name_len);
  is.read(t.name.data(), name_len);
  if (is.gcount() != name_len) throw ParseError("checkpoint truncated at tensor name");
  const int rank = is.get();
  if (rank == EOF) throw ParseError("checkpoint truncated at tensor rank");
  std::size_t count = 1;
  for (int i = 0; i < rank; ++i) {
    const std::uint32_t d = read_u32(is, "tensor dim");
    t.shape.push_back(static_cast<int>(d));
    count *= d;
  }
  t.data.resize(count);
  for (std::size_t i = 0; i < count; ++i) t.data[i] = read_f64(is, "tensor payload");
  return t;
}

std::string parse_field(const std::string& text, const std::string& key) {
  const std::string needle = key + "=";
  std::istringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ';')) {
    if (part.rfind(needle, 0) == 0) return part.substr(needle.size());
  }
  throw ParseError("checkpoint provenance lacks field '" + key + "'");
}

}  // namespace

std::string encode_model_config(const model::ModelConfig& cfg) {
  std::ostringstream os;
  os << "e:" << cfg.encoder_layers << ",d:" << cfg.decoder_layers
     << ",dm:" << cfg.d_model << ",dff:" << cfg.d_ff << ",h:" << cfg.heads
     << ",r:" << cfg.downsample << ",D:" << cfg.feat_dim
     << ",V:" << cfg.vocab_size << ",C:" << cfg.prenet_channels;
  return os.str();
}

model::ModelConfig decode_model_config(const std::string& text) {
  model::ModelConfig cfg;
  std::istringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    const auto colon = part.find(':');
    if (colon == std::string::npos) throw ParseError("bad model config echo: " + text);
    const std::string key = part.substr(0, colon);
    const int value = std::stoi(part.substr(colon + 1));
    if (key == "e") cfg.encoder_layers = value;
    else if (key == "d") cfg.decoder_layers = value;
    else if (key == "dm") cfg.d_model = value;
    else if (key == "dff") cfg.d_ff = value;
    else if (key == "h") cfg.heads = value;
    else if (key == "r") cfg.downsample = value;
    else if (key == "D") cfg.feat_dim = value;
    else if (key == "V") cfg.vocab_size = value;
    else if (key == "C") cfg.prenet_channels = value;
    else throw ParseError("bad model config key '" + key + "'");
  }
  return cfg;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open checkpoint for write: " + path.string());
  os.write(kMagic, 4);
  write_u32(os, ckpt.version);

  std::ostringstream prov;
  prov << "stage=" << ckpt.stage << ";epoch=" << ckpt.epoch
       << ";step=" << ckpt.step << ";parent=" << ckpt.parent
       << ";model=" << encode_model_config(ckpt.config);
  const std::string provenance = prov.str();
  write_u32(os, static_cast<std::uint32_t>(provenance.size()));
  os.write(provenance.data(), static_cast<std::streamsize>(provenance.size()));

  write_u32(os, static_cast<std::uint32_t>(ckpt.params.size()));
  for (const auto& [name, tensor] : ckpt.params) {
    write_tensor(os, name, tensor.shape(), tensor.data());
  }

  // Optimizer state reuses the tensor encoding: hyperparameters and the
  // step counter as rank-0 scalars, then first/second moments.
  const std::size_t opt_count = 4 + ckpt.opt.m.size() + ckpt.opt.v.size();
  write_u32(os, static_cast<std::uint32_t>(opt_count));
  write_tensor(os, "adam.beta1", {}, {ckpt.opt.beta1});
  write_tensor(os, "adam.beta2", {}, {ckpt.opt.beta2});
  write_tensor(os, "adam.eps", {}, {ckpt.opt.eps});
  write_tensor(os, "adam.step", {}, {static_cast<double>(ckpt.opt.step)});
  for (const auto& [name, data] : ckpt.opt.m) {
    write_tensor(os, "m." + name, {static_cast<int>(data.size())}, data);
  }
  for (const auto& [name, data] : ckpt.opt.v) {
    write_tensor(os, "v." + name, {static_cast<int>(data.size())}, data);
  }

  write_u32(os, static_cast<std::uint32_t>(ckpt.rng_state.size()));
  os.write(ckpt.rng_state.data(), static_cast<std::streamsize>(ckpt.rng_state.size()));
  if (!os) throw IoError("checkpoint write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (is.gcount() != 4 || std::memcmp(magic, kMagic, 4) != 0) {
    throw ParseError("bad magic in checkpoint: " + path.string());
  }
  Checkpoint ckpt;
  ckpt.version = read_u32(is, "version");
  if (ckpt.version != 1) {
    throw ParseError("unsupported checkpoint version " + std::to_string(ckpt.version));
  }
  const std::uint32_t prov_len = read_u32(is, "provenance length");
  std::string provenance(prov_len, '\0');
  is.read(provenance.data(), prov_len);
  if (is.gcount() != static_cast<std::streamsize>(prov_len)) {
    throw ParseError("checkpoint truncated at provenance");
  }
  ckpt.stage = parse_field(provenance, "stage");
  ckpt.epoch = std::stoll(parse_field(provenance, "epoch"));
  ckpt.step = std::stoll(parse_field(provenance, "step"));
  ckpt.parent = parse_field(provenance, "parent");
  ckpt.config = decode_model_config(parse_field(provenance, "model"));

  const std::uint32_t tensor_count = read_u32(is, "tensor count");
  for (std::uint32_t i = 0; i < tensor_count; ++i) {
    NamedTensor t = read_tensor(is);
    ckpt.params[t.name] = numerics::Tensor::from_data(
        t.shape, std::move(t.data), t.name.rfind("norm.", 0) != 0);
  }

  const std::uint32_t opt_count = read_u32(is, "optimizer tensor count");
  for (std::uint32_t i = 0; i < opt_count; ++i) {
    NamedTensor t = read_tensor(is);
    if (t.name == "adam.beta1") ckpt.opt.beta1 = t.data.at(0);
    else if (t.name == "adam.beta2") ckpt.opt.beta2 = t.data.at(0);
    else if (t.name == "adam.eps") ckpt.opt.eps = t.data.at(0);
    else if (t.name == "adam.step") ckpt.opt.step = static_cast<std::int64_t>(t.data.at(0));
    else if (t.name.rfind("m.", 0) == 0) ckpt.opt.m[t.name.substr(2)] = std::move(t.data);
    else if (t.name.rfind("v.", 0) == 0) ckpt.opt.v[t.name.substr(2)] = std::move(t.data);
    else throw ParseError("unknown optimizer entry '" + t.name + "'");
  }

  const std::uint32_t rng_len = read_u32(is, "rng state length");
  ckpt.rng_state.resize(rng_len);
  is.read(ckpt.rng_state.data(), rng_len);
  if (is.gcount() != static_cast<std::streamsize>(rng_len)) {
    throw ParseError("checkpoint truncated at rng state");
  }
  is.peek();
  if (!is.eof()) throw ParseError("trailing bytes in checkpoint: " + path.string());
  return ckpt;
}

std::string checkpoint_file_digest(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(is)), {});
  return to_hex(fnv1a64(bytes));
}

}  // namespace mpclab::pipeline
