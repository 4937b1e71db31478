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
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "mpclab/common.hpp"

namespace mpclab::numerics {

class Tape;
class Gradients;

// Dense row-major tensor of 64-bit floats. Value semantics over a shared
// node; ops recorded on a Tape never mutate their inputs. A rank-0 tensor
// holds a single scalar.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor from_data(std::vector<int> shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const std::vector<int>& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  std::size_t size() const { return node_->value.size(); }
  const std::vector<double>& data() const { return node_->value; }
  std::vector<double>& mutable_data() { return node_->value; }

  double item() const;
  double at(int r, int c) const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool b);
  // Deep copy with fresh identity.
  Tensor clone() const;
  const void* id() const { return node_.get(); }

  static std::string shape_str(const std::vector<int>& shape);

 private:
  struct Node {
    std::vector<int> shape;
    std::vector<double> value;
    bool requires_grad = false;
    // True when this value can influence a requires_grad leaf's gradient.
    bool needs_grad = false;
  };
  std::shared_ptr<Node> node_;

  friend class Tape;
  friend class Gradients;
};

// Additive attention bias matrix: entries are 0 (attend) or -infinity
// (blocked). Broadcasts over the leading axes of the logits it masks.
struct AdditiveMask {
  int rows = 0;
  int cols = 0;
  std::vector<double> bias;
};

// Result of reverse-mode accumulation: gradients for every requires_grad
// leaf that can reach the loss. Leaves that cannot reach it get zeros.
class Gradients {
 public:
  std::vector<double> wrt(const Tensor& t) const;
  // Null when the tensor never influenced the loss.
  const std::vector<double>* find(const Tensor& t) const;

 private:
  friend class Tape;
  std::unordered_map<const void*, std::vector<double>> by_node_;
};

// Backward callback for one recorded op: receives the upstream gradient of
// the op output and accumulation buffers for each input (null where the
// input does not need a gradient).
using BackwardFn =
    std::function<void(const std::vector<double>& upstream,
                       const std::vector<std::vector<double>*>& input_grads)>;

// Ordered record of executed operations. Replaying the record backward
// populates a gradient for every requires_grad leaf reachable from the
// loss. All recording and replay is single-threaded and deterministic.
class Tape {
 public:
  Tensor add(const Tensor& a, const Tensor& b);
  Tensor sub(const Tensor& a, const Tensor& b);
  Tensor mul(const Tensor& a, const Tensor& b);
  Tensor scale(const Tensor& a, double c);
  // x[... , n] + bias[n], broadcast over leading axes.
  Tensor add_bias(const Tensor& x, const Tensor& bias);
  Tensor relu(const Tensor& a);
  Tensor abs(const Tensor& a);
  Tensor matmul(const Tensor& a, const Tensor& b);
  Tensor transpose(const Tensor& a);
  Tensor reshape(const Tensor& a, std::vector<int> shape);
  Tensor slice_cols(const Tensor& a, int begin, int end);
  Tensor concat_cols(const std::vector<Tensor>& parts);
  // Row lookup into table[v, d]; repeated ids accumulate additively on the
  // way back (embedding lookup).
  Tensor gather_rows(const Tensor& table, const std::vector<int>& ids);
  Tensor sum(const Tensor& a);
  // Dot product against constant weights; the reduction used by the losses.
  Tensor weighted_sum(const Tensor& a, const std::vector<double>& weights);
  Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                    double eps = 1e-6);
  // Softmax over the last axis after adding the mask bias. A row with no
  // attendable position is a hard error.
  Tensor masked_softmax(const Tensor& logits, const AdditiveMask& mask);
  Tensor log_softmax(const Tensor& logits);
  // Temporal convolution, odd kernel, zero padding of (k-1)/2 per side
  // before striding; output position i is centered on input stride*i.
  // x is [t, c_in], kernel is [k, c_in, c_out].
  Tensor conv1d(const Tensor& x, const Tensor& kernel, int stride);

  // Registers an externally computed op (value plus backward rule) so
  // fused losses defined outside this module participate in the tape.
  Tensor adopt(std::vector<int> shape, std::vector<double> value,
               const std::vector<Tensor>& inputs, BackwardFn back,
               const char* op_name);

  // Reverse-mode accumulation from a finite scalar loss.
  Gradients backward(const Tensor& loss) const;

  std::size_t recorded_ops() const { return entries_.size(); }

 private:
  struct Entry {
    std::shared_ptr<Tensor::Node> out;
    std::vector<std::shared_ptr<Tensor::Node>> inputs;
    BackwardFn back;
    const char* name;
  };

  Tensor record(std::vector<int> shape, std::vector<double> value,
                const std::vector<Tensor>& inputs, BackwardFn back,
                const char* op_name);

  std::vector<Entry> entries_;
  std::vector<std::shared_ptr<Tensor::Node>> leaves_;
  std::unordered_set<const void*> leaf_seen_;
};

// Named parameter collection; lexicographic order fixes every iteration.
using ParamMap = std::map<std::string, Tensor>;

// Adam accumulators keyed by parameter name.
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t step = 0;
  std::map<std::string, std::vector<double>> m;
  std::map<std::string, std::vector<double>> v;
};

// One Adam update with bias correction and decoupled weight decay
// (-lr * weight_decay * param applied before the moment contribution).
// lr_scale, when given, multiplies the learning rate per parameter name;
// that is the hook layer-wise discriminative fine-tuning uses.
void adam_step(ParamMap& params, const Gradients& grads, AdamState& state,
               double lr, double weight_decay,
               const std::function<double(const std::string&)>& lr_scale = {});

}  // namespace mpclab::numerics
