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

#include "dsym/autograd.hpp"

#include <unordered_set>

#include "dsym/errors.hpp"

namespace dsym::ag {

namespace {
thread_local bool g_grad_enabled = true;
}

Tensor& Node::grad_buffer() {
  if (grad.empty() && !value.empty()) grad = Tensor(value.shape(), 0.0);
  return grad;
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

void Var::zero_grad() const {
  if (node_ && !node_->grad.empty()) node_->grad.fill(0.0);
}

double Var::item() const {
  if (node_->value.size() != 1) throw InvalidArgument("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

void Var::backward() const {
  if (!node_) throw InvalidState("backward() on undefined Var");
  if (node_->value.size() != 1) throw InvalidArgument("backward() needs a single-element root");
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order (inputs before users).
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      Node* child = n->inputs[next++].get();
      if (child->requires_grad && !seen.count(child)) {
        seen.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
  // Intermediate buffers are not needed after the sweep.
  for (Node* n : order) {
    if (n->backward) n->grad = Tensor();
  }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() noexcept { return g_grad_enabled; }

Var make_op(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward) {
  Var out(std::move(value), false);
  if (!g_grad_enabled) return out;
  bool any = false;
  for (const auto& v : inputs) any = any || v.requires_grad();
  if (!any) return out;
  auto& n = *out.node();
  n.requires_grad = true;
  n.inputs.reserve(inputs.size());
  for (auto& v : inputs) n.inputs.push_back(v.node());
  n.backward = std::move(backward);
  return out;
}

}  // namespace dsym::ag
