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

#pragma once

#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "dsym/autograd.hpp"
#include "dsym/rng.hpp"

namespace dsym::nn {

/// Ordered, named collection of trainable leaves. Order is the registration
/// order and is what checkpoints and EMA updates iterate over.
class ParamStore {
 public:
  ag::Var add(const std::string& name, Tensor init);

  const std::vector<std::pair<std::string, ag::Var>>& items() const noexcept { return params_; }
  std::size_t size() const noexcept { return params_.size(); }
  std::size_t scalar_count() const;

  ag::Var find(const std::string& name) const;
  void zero_grad();

  /// All parameter values concatenated in registration order.
  std::vector<double> flatten() const;
  void assign(const std::vector<double>& flat);
  /// Copy values from a store with identical names and shapes.
  void copy_from(const ParamStore& other);

  bool all_finite() const;

 private:
  std::vector<std::pair<std::string, ag::Var>> params_;
};

Tensor he_normal(Shape shape, int fan_in, Rng& rng);

struct Linear {
  ag::Var w;  ///< (in, out)
  ag::Var b;  ///< (out) or undefined
  Linear() = default;
  Linear(ParamStore& ps, const std::string& name, int in, int out, Rng& rng, bool bias = true);
  ag::Var operator()(const ag::Var& x) const;
};

struct Conv2d {
  ag::Var w;  ///< (out, in, k, k)
  ag::Var b;
  int stride = 1;
  int pad = 0;
  Conv2d() = default;
  Conv2d(ParamStore& ps, const std::string& name, int in, int out, int k, int stride, int pad, Rng& rng);
  ag::Var operator()(const ag::Var& x) const;
};

/// Sinusoidal encoding of a scalar position into `dim` features.
std::vector<double> sinusoidal_encoding(double position, int dim);

// Optimizers -----------------------------------------------------------------

struct SgdConfig {
  double lr = 1e-3;
  double momentum = 0.9;
  double weight_decay = 0.0;
};

class Sgd {
 public:
  Sgd(ParamStore& params, SgdConfig cfg);
  void step();
  void set_lr(double lr) { cfg_.lr = lr; }

 private:
  ParamStore& params_;
  SgdConfig cfg_;
  std::vector<Tensor> velocity_;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

class Adam {
 public:
  Adam(ParamStore& params, AdamConfig cfg);
  void step();
  void set_lr(double lr) { cfg_.lr = lr; }

 private:
  ParamStore& params_;
  AdamConfig cfg_;
  std::vector<Tensor> m_, v_;
  long t_ = 0;
};

/// Optimizer chosen by name ("sgd" or "adam").
class Optimizer {
 public:
  Optimizer(ParamStore& params, const std::string& kind, double lr, double momentum, double weight_decay);
  void step();
  void set_lr(double lr);

 private:
  std::unique_ptr<Sgd> sgd_;
  std::unique_ptr<Adam> adam_;
};

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
double clip_grad_norm(ParamStore& params, double max_norm);

// Checkpoints ----------------------------------------------------------------

/// Self-describing binary archive: string metadata plus named float64 arrays.
struct Checkpoint {
  std::map<std::string, std::string> meta;
  std::vector<std::pair<std::string, Tensor>> tensors;

  void add_store(const std::string& prefix, const ParamStore& ps);
  /// Loads tensors named prefix+name into `ps`; throws InvalidState on any
  /// missing name or shape mismatch.
  void load_store(const std::string& prefix, ParamStore& ps) const;
  const std::string& get(const std::string& key) const;
  const Tensor& tensor(const std::string& name) const;

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);
};

}  // namespace dsym::nn
