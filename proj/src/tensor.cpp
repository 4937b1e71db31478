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

#include "mpclab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace mpclab::numerics {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

std::size_t shape_product(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 1) throw ShapeError("tensor dimensions must be positive, got " +
                                Tensor::shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

void ensure_finite(const char* op, const std::vector<double>& v) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw ValueError(std::string(op) + ": non-finite value in result");
    }
  }
}

}  // namespace

std::string Tensor::shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  const std::size_t n = shape_product(shape);
  return from_data(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<double> data,
                         bool requires_grad) {
  if (shape_product(shape) != data.size()) {
    throw ShapeError("tensor data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  }
  Tensor t;
  t.node_ = std::make_shared<Node>();
  t.node_->shape = std::move(shape);
  t.node_->value = std::move(data);
  t.node_->requires_grad = requires_grad;
  t.node_->needs_grad = requires_grad;
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({}, {value}, requires_grad);
}

double Tensor::item() const {
  if (size() != 1) {
    throw ShapeError("item(): tensor has " + std::to_string(size()) +
                     " elements, expected 1");
  }
  return node_->value[0];
}

double Tensor::at(int r, int c) const {
  if (rank() != 2) throw ShapeError("at(r,c): tensor is not rank 2");
  return node_->value[static_cast<std::size_t>(r) *
                          static_cast<std::size_t>(dim(1)) +
                      static_cast<std::size_t>(c)];
}

void Tensor::set_requires_grad(bool b) {
  node_->requires_grad = b;
  node_->needs_grad = b;
}

Tensor Tensor::clone() const {
  return from_data(node_->shape, node_->value, node_->requires_grad);
}

std::vector<double> Gradients::wrt(const Tensor& t) const {
  auto it = by_node_.find(t.id());
  if (it == by_node_.end()) return std::vector<double>(t.size(), 0.0);
  return it->second;
}

const std::vector<double>* Gradients::find(const Tensor& t) const {
  auto it = by_node_.find(t.id());
  return it == by_node_.end() ? nullptr : &it->second;
}

Tensor Tape::record(std::vector<int> shape, std::vector<double> value,
                    const std::vector<Tensor>& inputs, BackwardFn back,
                    const char* op_name) {
  ensure_finite(op_name, value);
  bool needs = false;
  for (const Tensor& in : inputs) {
    if (!in.defined()) throw ValueError(std::string(op_name) + ": undefined input");
    needs = needs || in.node_->needs_grad;
    if (in.node_->requires_grad && !leaf_seen_.count(in.id())) {
      leaf_seen_.insert(in.id());
      leaves_.push_back(in.node_);
    }
  }
  Tensor out = Tensor::from_data(std::move(shape), std::move(value), false);
  out.node_->needs_grad = needs;
  Entry e;
  e.out = out.node_;
  e.inputs.reserve(inputs.size());
  for (const Tensor& in : inputs) e.inputs.push_back(in.node_);
  e.back = std::move(back);
  e.name = op_name;
  entries_.push_back(std::move(e));
  return out;
}

Tensor Tape::adopt(std::vector<int> shape, std::vector<double> value,
                   const std::vector<Tensor>& inputs, BackwardFn back,
                   const char* op_name) {
  return record(std::move(shape), std::move(value), inputs, std::move(back),
                op_name);
}

Gradients Tape::backward(const Tensor& loss) const {
  if (!loss.defined() || loss.size() != 1) {
    throw ShapeError("backward: loss must be a defined scalar");
  }
  if (!std::isfinite(loss.item())) {
    throw ValueError("backward: loss is not finite");
  }

  std::unordered_map<const void*, std::vector<double>> buf;
  buf[loss.id()] = {1.0};

  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    const Entry& e = *it;
    auto found = buf.find(e.out.get());
    if (found == buf.end()) continue;
    const std::vector<double> upstream = found->second;
    std::vector<std::vector<double>*> gin(e.inputs.size(), nullptr);
    for (std::size_t i = 0; i < e.inputs.size(); ++i) {
      if (!e.inputs[i]->needs_grad) continue;
      std::vector<double>& g = buf[e.inputs[i].get()];
      if (g.empty()) g.assign(e.inputs[i]->value.size(), 0.0);
      gin[i] = &g;
    }
    e.back(upstream, gin);
  }

  for (const auto& [node, g] : buf) {
    (void)node;
    for (double x : g) {
      if (std::isnan(x)) throw ValueError("backward: NaN in gradient accumulation");
    }
  }

  Gradients out;
  for (const auto& leaf : leaves_) {
    auto it = buf.find(leaf.get());
    if (it != buf.end()) out.by_node_[leaf.get()] = std::move(it->second);
  }
  if (loss.node_->requires_grad && !out.by_node_.count(loss.id())) {
    out.by_node_[loss.id()] = {1.0};
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise ops

Tensor Tape::add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add: shape mismatch " + Tensor::shape_str(a.shape()) +
                     " vs " + Tensor::shape_str(b.shape()));
  }
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] + b.data()[i];
  return record(a.shape(), std::move(v), {a, b},
                [](const std::vector<double>& up,
                   const std::vector<std::vector<double>*>& g) {
                  for (std::size_t i = 0; i < up.size(); ++i) {
                    if (g[0]) (*g[0])[i] += up[i];
                    if (g[1]) (*g[1])[i] += up[i];
                  }
                },
                "add");
}

Tensor Tape::sub(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("sub: shape mismatch " + Tensor::shape_str(a.shape()) +
                     " vs " + Tensor::shape_str(b.shape()));
  }
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] - b.data()[i];
  return record(a.shape(), std::move(v), {a, b},
                [](const std::vector<double>& up,
                   const std::vector<std::vector<double>*>& g) {
                  for (std::size_t i = 0; i < up.size(); ++i) {
                    if (g[0]) (*g[0])[i] += up[i];
                    if (g[1]) (*g[1])[i] -= up[i];
                  }
                },
                "sub");
}

Tensor Tape::mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mul: shape mismatch " + Tensor::shape_str(a.shape()) +
                     " vs " + Tensor::shape_str(b.shape()));
  }
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] * b.data()[i];
  return record(a.shape(), std::move(v), {a, b},
                [a, b](const std::vector<double>& up,
                       const std::vector<std::vector<double>*>& g) {
                  for (std::size_t i = 0; i < up.size(); ++i) {
                    if (g[0]) (*g[0])[i] += up[i] * b.data()[i];
                    if (g[1]) (*g[1])[i] += up[i] * a.data()[i];
                  }
                },
                "mul");
}

Tensor Tape::scale(const Tensor& a, double c) {
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] * c;
  return record(a.shape(), std::move(v), {a},
                [c](const std::vector<double>& up,
                    const std::vector<std::vector<double>*>& g) {
                  if (!g[0]) return;
                  for (std::size_t i = 0; i < up.size(); ++i)
                    (*g[0])[i] += up[i] * c;
                },
                "scale");
}

Tensor Tape::add_bias(const Tensor& x, const Tensor& bias) {
  if (bias.rank() != 1 || x.rank() < 1 ||
      x.dim(x.rank() - 1) != bias.dim(0)) {
    throw ShapeError("add_bias: bias " + Tensor::shape_str(bias.shape()) +
                     " does not match last axis of " +
                     Tensor::shape_str(x.shape()));
  }
  const std::size_t n = static_cast<std::size_t>(bias.dim(0));
  std::vector<double> v(x.size());
  for (std::size_t i = 0; i < v.size(); ++i)
    v[i] = x.data()[i] + bias.data()[i % n];
  return record(x.shape(), std::move(v), {x, bias},
                [n](const std::vector<double>& up,
                    const std::vector<std::vector<double>*>& g) {
                  for (std::size_t i = 0; i < up.size(); ++i) {
                    if (g[0]) (*g[0])[i] += up[i];
                    if (g[1]) (*g[1])[i % n] += up[i];
                  }
                },
                "add_bias");
}

Tensor Tape::relu(const Tensor& a) {
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i)
    v[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;
  return record(a.shape(), std::move(v), {a},
                [a](const std::vector<double>& up,
                    const std::vector<std::vector<double>*>& g) {
                  if (!g[0]) return;
                  for (std::size_t i = 0; i < up.size(); ++i)
                    if (a.data()[i] > 0.0) (*g[0])[i] += up[i];
                },
                "relu");
}

Tensor Tape::abs(const Tensor& a) {
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::fabs(a.data()[i]);
  return record(a.shape(), std::move(v), {a},
                [a](const std::vector<double>& up,
                    const std::vector<std::vector<double>*>& g) {
                  if (!g[0]) return;
                  for (std::size_t i = 0; i < up.size(); ++i) {
                    const double x = a.data()[i];
                    if (x > 0.0)
                      (*g[0])[i] += up[i];
                    else if (x < 0.0)
                      (*g[0])[i] -= up[i];
                  }
                },
                "abs");
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor Tape::matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " +
                     Tensor::shape_str(a.shape()) + " x " +
                     Tensor::shape_str(b.shape()));
  }
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> v(static_cast<std::size_t>(m) * n, 0.0);
  const auto& av = a.data();
  const auto& bv = b.data();
  for (int i = 0; i < m; ++i) {
    for (int p = 0; p < k; ++p) {
      const double aip = av[static_cast<std::size_t>(i) * k + p];
      const std::size_t brow = static_cast<std::size_t>(p) * n;
      const std::size_t orow = static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) v[orow + j] += aip * bv[brow + j];
    }
  }
  return record(
      {m, n}, std::move(v), {a, b},
      [a, b, m, k, n](const std::vector<double>& up,
                      const std::vector<std::vector<double>*>& g) {
        const auto& av = a.data();
        const auto& bv = b.data();
        if (g[0]) {  // da = up . b^T
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) {
              const double u = up[static_cast<std::size_t>(i) * n + j];
              for (int p = 0; p < k; ++p)
                (*g[0])[static_cast<std::size_t>(i) * k + p] +=
                    u * bv[static_cast<std::size_t>(p) * n + j];
            }
        }
        if (g[1]) {  // db = a^T . up
          for (int i = 0; i < m; ++i)
            for (int p = 0; p < k; ++p) {
              const double apv = av[static_cast<std::size_t>(i) * k + p];
              for (int j = 0; j < n; ++j)
                (*g[1])[static_cast<std::size_t>(p) * n + j] +=
                    apv * up[static_cast<std::size_t>(i) * n + j];
            }
        }
      },
      "matmul");
}

Tensor Tape::transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose: tensor is not rank 2");
  const int m = a.dim(0), n = a.dim(1);
  std::vector<double> v(a.size());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      v[static_cast<std::size_t>(j) * m + i] =
          a.data()[static_cast<std::size_t>(i) * n + j];
  return record({n, m}, std::move(v), {a},
                [m, n](const std::vector<double>& up,
                       const std::vector<std::vector<double>*>& g) {
                  if (!g[0]) return;
                  for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j)
                      (*g[0])[static_cast<std::size_t>(i) * n + j] +=
                          up[static_cast<std::size_t>(j) * m + i];
                },
                "transpose");
}

Tensor Tape::reshape(const Tensor& a, std::vector<int> shape) {
  if (shape_product(shape) != a.size()) {
    throw ShapeError("reshape: cannot view " + Tensor::shape_str(a.shape()) +
                     " as " + Tensor::shape_str(shape));
  }
  std::vector<double> v = a.data();
  return record(std::move(shape), std::move(v), {a},
                [](const std::vector<double>& up,
                   const std::vector<std::vector<double>*>& g) {
                  if (!g[0]) return;
                  for (std::size_t i = 0; i < up.size(); ++i)
                    (*g[0])[i] += up[i];
                },
                "reshape");
}

Tensor Tape::slice_cols(const Tensor& a, int begin, int end) {
  if (a.rank() != 2) throw ShapeError("slice_cols: tensor is not rank 2");
  const int m = a.dim(0), n = a.dim(1);
  if (begin < 0 || end > n || begin >= end) {
    throw ShapeError("slice_cols: invalid column range [" +
                     std::to_string(begin) + "," + std::to_string(end) +
                     ") for " + Tensor::shape_str(a.shape()));
  }
  const int w = end - begin;
  std::vector<double> v(static_cast<std::size_t>(m) * w);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < w; ++j)
      v[static_cast<std::size_t>(i) * w + j] =
          a.data()[static_cast<std::size_t>(i) * n + begin + j];
  return record({m, w}, std::move(v), {a},
                [m, n, w, begin](const std::vector<double>& up,
                                 const std::vector<std::vector<double>*>& g) {
                  if (!g[0]) return;
                  for (int i = 0; i < m; ++i)
                    for (int j = 0; j < w; ++j)
                      (*g[0])[static_cast<std::size_t>(i) * n + begin + j] +=
                          up[static_cast<std::size_t>(i) * w + j];
                },
                "slice_cols");
}

Tensor Tape::concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const int m = parts[0].dim(0);
  int total = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != 2 || p.dim(0) != m) {
      throw ShapeError("concat_cols: row mismatch");
    }
    total += p.dim(1);
  }
  std::vector<double> v(static_cast<std::size_t>(m) * total);
  std::vector<int> offsets;
  int at = 0;
  for (const Tensor& p : parts) {
    offsets.push_back(at);
    const int w = p.dim(1);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < w; ++j)
        v[static_cast<std::size_t>(i) * total + at + j] =
            p.data()[static_cast<std::size_t>(i) * w + j];
    at += w;
  }
  std::vector<int> widths;
  for (const Tensor& p : parts) widths.push_back(p.dim(1));
  return record({m, total}, std::move(v), parts,
                [m, total, offsets, widths](
                    const std::vector<double>& up,
                    const std::vector<std::vector<double>*>& g) {
                  for (std::size_t p = 0; p < g.size(); ++p) {
                    if (!g[p]) continue;
                    const int w = widths[p], off = offsets[p];
                    for (int i = 0; i < m; ++i)
                      for (int j = 0; j < w; ++j)
                        (*g[p])[static_cast<std::size_t>(i) * w + j] +=
                            up[static_cast<std::size_t>(i) * total + off + j];
                  }
                },
                "concat_cols");
}

Tensor Tape::gather_rows(const Tensor& table, const std::vector<int>& ids) {
  if (table.rank() != 2) throw ShapeError("gather_rows: table is not rank 2");
  const int v_rows = table.dim(0), d = table.dim(1);
  for (int id : ids) {
    if (id < 0 || id >= v_rows) {
      throw ValueError("gather_rows: id " + std::to_string(id) +
                       " out of range [0," + std::to_string(v_rows) + ")");
    }
  }
  if (ids.empty()) throw ShapeError("gather_rows: empty id list");
  const int L = static_cast<int>(ids.size());
  std::vector<double> v(static_cast<std::size_t>(L) * d);
  for (int i = 0; i < L; ++i)
    for (int j = 0; j < d; ++j)
      v[static_cast<std::size_t>(i) * d + j] =
          table.data()[static_cast<std::size_t>(ids[i]) * d + j];
  return record({L, d}, std::move(v), {table},
                [ids, d](const std::vector<double>& up,
                         const std::vector<std::vector<double>*>& g) {
                  if (!g[0]) return;
                  for (std::size_t i = 0; i < ids.size(); ++i)
                    for (int j = 0; j < d; ++j)
                      (*g[0])[static_cast<std::size_t>(ids[i]) * d + j] +=
                          up[i * d + j];
                },
                "gather_rows");
}

// ---------------------------------------------------------------------------
// Reductions

Tensor Tape::sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.data()) s += x;
  return record({}, {s}, {a},
                [](const std::vector<double>& up,
                   const std::vector<std::vector<double>*>& g) {
                  if (!g[0]) return;
                  for (double& x : *g[0]) x += up[0];
                },
                "sum");
}

Tensor Tape::weighted_sum(const Tensor& a, const std::vector<double>& weights) {
  if (weights.size() != a.size()) {
    throw ShapeError("weighted_sum: weight count " +
                     std::to_string(weights.size()) + " != tensor size " +
                     std::to_string(a.size()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) s += a.data()[i] * weights[i];
  return record({}, {s}, {a},
                [weights](const std::vector<double>& up,
                          const std::vector<std::vector<double>*>& g) {
                  if (!g[0]) return;
                  for (std::size_t i = 0; i < weights.size(); ++i)
                    (*g[0])[i] += up[0] * weights[i];
                },
                "weighted_sum");
}

// ---------------------------------------------------------------------------
// Normalization and softmax

Tensor Tape::layer_norm(const Tensor& x, const Tensor& gain,
                        const Tensor& bias, double eps) {
  if (x.rank() < 1) throw ShapeError("layer_norm: input has no axes");
  const int d = x.dim(x.rank() - 1);
  if (d < 2) throw ValueError("layer_norm: last axis must have size >= 2");
  if (gain.rank() != 1 || gain.dim(0) != d || bias.rank() != 1 ||
      bias.dim(0) != d) {
    throw ShapeError("layer_norm: gain/bias must be length " +
                     std::to_string(d));
  }
  const std::size_t rows = x.size() / static_cast<std::size_t>(d);
  std::vector<double> v(x.size());
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * static_cast<std::size_t>(d);
    double mean = 0.0;
    for (int j = 0; j < d; ++j) mean += x.data()[base + j];
    mean /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      const double c = x.data()[base + j] - mean;
      var += c * c;
    }
    var /= d;
    const double inv = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = inv;
    for (int j = 0; j < d; ++j) {
      const double h = (x.data()[base + j] - mean) * inv;
      (*xhat)[base + j] = h;
      v[base + j] = gain.data()[j] * h + bias.data()[j];
    }
  }
  return record(
      x.shape(), std::move(v), {x, gain, bias},
      [gain, d, rows, xhat, inv_std](
          const std::vector<double>& up,
          const std::vector<std::vector<double>*>& g) {
        for (std::size_t r = 0; r < rows; ++r) {
          const std::size_t base = r * static_cast<std::size_t>(d);
          if (g[1] || g[2]) {
            for (int j = 0; j < d; ++j) {
              if (g[1]) (*g[1])[j] += up[base + j] * (*xhat)[base + j];
              if (g[2]) (*g[2])[j] += up[base + j];
            }
          }
          if (g[0]) {
            double mean_dh = 0.0, mean_dh_h = 0.0;
            for (int j = 0; j < d; ++j) {
              const double dh = up[base + j] * gain.data()[j];
              mean_dh += dh;
              mean_dh_h += dh * (*xhat)[base + j];
            }
            mean_dh /= d;
            mean_dh_h /= d;
            const double inv = (*inv_std)[r];
            for (int j = 0; j < d; ++j) {
              const double dh = up[base + j] * gain.data()[j];
              (*g[0])[base + j] +=
                  inv * (dh - mean_dh - (*xhat)[base + j] * mean_dh_h);
            }
          }
        }
      },
      "layer_norm");
}

Tensor Tape::masked_softmax(const Tensor& logits, const AdditiveMask& mask) {
  if (logits.rank() < 1) throw ShapeError("masked_softmax: input has no axes");
  const int cols = logits.dim(logits.rank() - 1);
  if (mask.cols != cols) {
    throw ShapeError("masked_softmax: mask cols " + std::to_string(mask.cols) +
                     " != logits last axis " + std::to_string(cols));
  }
  if (static_cast<std::size_t>(mask.rows) * mask.cols != mask.bias.size()) {
    throw ShapeError("masked_softmax: mask storage does not match its shape");
  }
  const int sub_rows = logits.rank() >= 2 ? logits.dim(logits.rank() - 2) : 1;
  if (mask.rows != 1 && mask.rows != sub_rows) {
    throw ShapeError("masked_softmax: mask rows " + std::to_string(mask.rows) +
                     " not broadcastable to logits rows " +
                     std::to_string(sub_rows));
  }
  for (double b : mask.bias) {
    if (!(b == 0.0 || b == -kInf)) {
      throw ValueError("masked_softmax: mask entries must be 0 or -inf");
    }
  }

  const std::size_t rows = logits.size() / static_cast<std::size_t>(cols);
  auto probs = std::make_shared<std::vector<double>>(logits.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * static_cast<std::size_t>(cols);
    const int mrow =
        mask.rows == 1 ? 0 : static_cast<int>(r % static_cast<std::size_t>(sub_rows));
    const std::size_t mbase =
        static_cast<std::size_t>(mrow) * static_cast<std::size_t>(cols);
    double mx = -kInf;
    for (int j = 0; j < cols; ++j) {
      const double z = logits.data()[base + j] + mask.bias[mbase + j];
      mx = std::max(mx, z);
    }
    if (mx == -kInf) {
      throw ValueError("masked_softmax: row " + std::to_string(r) +
                       " has no attendable position");
    }
    double denom = 0.0;
    for (int j = 0; j < cols; ++j) {
      const double z = logits.data()[base + j] + mask.bias[mbase + j];
      const double e = z == -kInf ? 0.0 : std::exp(z - mx);
      (*probs)[base + j] = e;
      denom += e;
    }
    for (int j = 0; j < cols; ++j) (*probs)[base + j] /= denom;
  }
  std::vector<double> v = *probs;
  return record(logits.shape(), std::move(v), {logits},
                [probs, cols, rows](const std::vector<double>& up,
                                    const std::vector<std::vector<double>*>& g) {
                  if (!g[0]) return;
                  for (std::size_t r = 0; r < rows; ++r) {
                    const std::size_t base = r * static_cast<std::size_t>(cols);
                    double dot = 0.0;
                    for (int j = 0; j < cols; ++j)
                      dot += (*probs)[base + j] * up[base + j];
                    for (int j = 0; j < cols; ++j)
                      (*g[0])[base + j] +=
                          (*probs)[base + j] * (up[base + j] - dot);
                  }
                },
                "masked_softmax");
}

Tensor Tape::log_softmax(const Tensor& logits) {
  if (logits.rank() < 1) throw ShapeError("log_softmax: input has no axes");
  const int cols = logits.dim(logits.rank() - 1);
  const std::size_t rows = logits.size() / static_cast<std::size_t>(cols);
  std::vector<double> v(logits.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * static_cast<std::size_t>(cols);
    double mx = -kInf;
    for (int j = 0; j < cols; ++j) mx = std::max(mx, logits.data()[base + j]);
    double denom = 0.0;
    for (int j = 0; j < cols; ++j) denom += std::exp(logits.data()[base + j] - mx);
    const double lse = mx + std::log(denom);
    for (int j = 0; j < cols; ++j) v[base + j] = logits.data()[base + j] - lse;
  }
  auto logp = std::make_shared<std::vector<double>>(v);
  return record(logits.shape(), std::move(v), {logits},
                [logp, cols, rows](const std::vector<double>& up,
                                   const std::vector<std::vector<double>*>& g) {
                  if (!g[0]) return;
                  for (std::size_t r = 0; r < rows; ++r) {
                    const std::size_t base = r * static_cast<std::size_t>(cols);
                    double total = 0.0;
                    for (int j = 0; j < cols; ++j) total += up[base + j];
                    for (int j = 0; j < cols; ++j)
                      (*g[0])[base + j] +=
                          up[base + j] - std::exp((*logp)[base + j]) * total;
                  }
                },
                "log_softmax");
}

// ---------------------------------------------------------------------------
// Convolution

Tensor Tape::conv1d(const Tensor& x, const Tensor& kernel, int stride) {
  if (x.rank() != 2) throw ShapeError("conv1d: input is not rank 2");
  if (kernel.rank() != 3) throw ShapeError("conv1d: kernel is not rank 3");
  const int t = x.dim(0), cin = x.dim(1);
  const int kw = kernel.dim(0), kcin = kernel.dim(1), cout = kernel.dim(2);
  if (kw % 2 == 0) {
    throw ValueError("conv1d: kernel width must be odd, got " +
                     std::to_string(kw));
  }
  if (stride < 1) throw ValueError("conv1d: stride must be >= 1");
  if (kcin != cin) {
    throw ShapeError("conv1d: kernel expects " + std::to_string(kcin) +
                     " input channels, input has " + std::to_string(cin));
  }
  const int pad = (kw - 1) / 2;
  const int to = (t + stride - 1) / stride;
  std::vector<double> v(static_cast<std::size_t>(to) * cout, 0.0);
  for (int o = 0; o < to; ++o) {
    for (int dk = 0; dk < kw; ++dk) {
      const int s = stride * o + dk - pad;
      if (s < 0 || s >= t) continue;
      const std::size_t xrow = static_cast<std::size_t>(s) * cin;
      const std::size_t orow = static_cast<std::size_t>(o) * cout;
      for (int ci = 0; ci < cin; ++ci) {
        const double xv = x.data()[xrow + ci];
        const std::size_t krow =
            (static_cast<std::size_t>(dk) * cin + ci) * cout;
        for (int co = 0; co < cout; ++co)
          v[orow + co] += xv * kernel.data()[krow + co];
      }
    }
  }
  return record(
      {to, cout}, std::move(v), {x, kernel},
      [x, kernel, t, cin, kw, cout, pad, stride, to](
          const std::vector<double>& up,
          const std::vector<std::vector<double>*>& g) {
        for (int o = 0; o < to; ++o) {
          for (int dk = 0; dk < kw; ++dk) {
            const int s = stride * o + dk - pad;
            if (s < 0 || s >= t) continue;
            const std::size_t xrow = static_cast<std::size_t>(s) * cin;
            const std::size_t orow = static_cast<std::size_t>(o) * cout;
            for (int ci = 0; ci < cin; ++ci) {
              const std::size_t krow =
                  (static_cast<std::size_t>(dk) * cin + ci) * cout;
              for (int co = 0; co < cout; ++co) {
                const double u = up[orow + co];
                if (g[0]) (*g[0])[xrow + ci] += u * kernel.data()[krow + co];
                if (g[1]) (*g[1])[krow + co] += u * x.data()[xrow + ci];
              }
            }
          }
        }
      },
      "conv1d");
}

// ---------------------------------------------------------------------------
// Adam

void adam_step(ParamMap& params, const Gradients& grads, AdamState& state,
               double lr, double weight_decay,
               const std::function<double(const std::string&)>& lr_scale) {
  if (lr <= 0.0) throw ValueError("adam_step: learning rate must be positive");
  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (auto& [name, param] : params) {
    const std::size_t n = param.size();
    std::vector<double>& m = state.m[name];
    std::vector<double>& v = state.v[name];
    if (m.empty()) m.assign(n, 0.0);
    if (v.empty()) v.assign(n, 0.0);
    if (m.size() != n || v.size() != n) {
      throw ShapeError("adam_step: accumulator shape mismatch for '" + name +
                       "'");
    }
    const std::vector<double>* g = grads.find(param);
    if (g && g->size() != n) {
      throw ShapeError("adam_step: gradient shape mismatch for '" + name + "'");
    }
    const double eff_lr = lr * (lr_scale ? lr_scale(name) : 1.0);
    std::vector<double>& pv = param.mutable_data();
    for (std::size_t i = 0; i < n; ++i) {
      const double gi = g ? (*g)[i] : 0.0;
      if (weight_decay != 0.0) pv[i] -= eff_lr * weight_decay * pv[i];
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * gi;
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      pv[i] -= eff_lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

}  // namespace mpclab::numerics
