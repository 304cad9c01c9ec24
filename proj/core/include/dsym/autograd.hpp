// Copyright 2026 The DSYM Authors.
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

// Minimal reverse-mode automatic differentiation over dense Tensors.
//
// Every op builds a fresh graph node holding its forward value and a closure
// that pushes the node's gradient into its inputs. Graphs are rebuilt on each
// forward pass; leaves (parameters) keep accumulating gradients until
// zero_grad(). Under a NoGradGuard no closures or input links are recorded,
// so teacher/inference passes carry no graph.

#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "dsym/tensor.hpp"

namespace dsym::ag {

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  /// Gradient buffer, zero-allocated on first use.
  Tensor& grad_buffer();
};

class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);

  bool defined() const noexcept { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  /// Var is a handle; mutating through a const handle is allowed.
  Tensor& mutable_value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  int dim(int i) const { return node_->value.dim(i); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }

  /// Gradient accumulated so far. Empty tensor if nothing reached this node.
  const Tensor& grad() const { return node_->grad; }
  Tensor& mutable_grad() const { return node_->grad; }
  bool has_grad() const { return node_ && !node_->grad.empty(); }
  void zero_grad() const;

  /// Reverse sweep from this (single-element) node with seed 1.
  void backward() const;

  double item() const;

  const std::shared_ptr<Node>& node() const noexcept { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Gradient recording is on by default; the guard turns it off for its scope.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled() noexcept;

/// Wraps a forward value into a graph node. `backward` is only stored if some
/// input requires a gradient and recording is enabled.
Var make_op(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward);

/// Gradient buffer of input `i` inside a backward closure, or nullptr if that
/// input needs none.
inline Tensor* input_grad(Node& self, std::size_t i) {
  auto& in = self.inputs[i];
  return in->requires_grad ? &in->grad_buffer() : nullptr;
}

/// Constant (no gradient) wrapper.
inline Var constant(Tensor t) { return Var(std::move(t), false); }

}  // namespace dsym::ag
