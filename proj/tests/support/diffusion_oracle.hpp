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

// Noise predictors with known behaviour, for checking the loss and the
// sampler independently of any trained network.

#pragma once

#include <cmath>
#include <vector>

#include "dsym/diffusion.hpp"

namespace dsym::testing {

/// Exact noise predictor when the data distribution is a point mass at
/// `x0` (model space, (1 or B, 1, S, S)): eps = (x_t - sqrt(ab) x0) / sqrt(1 - ab).
class PointMassDenoiser : public diff::NoisePredictor {
 public:
  PointMassDenoiser(Tensor x0_model, diff::NoiseSchedule sched) : x0_(std::move(x0_model)), sched_(std::move(sched)) {}

  ag::Var predict_noise(const ag::Var& x_t, const std::vector<int>& t,
                        const std::vector<diff::ConditionInput>&) const override {
    const Tensor& x = x_t.value();
    const std::size_t plane = x.size() / static_cast<std::size_t>(x.dim(0));
    Tensor eps(x.shape());
    for (int b = 0; b < x.dim(0); ++b) {
      const double ab = sched_.alpha_bar_at(t[static_cast<std::size_t>(b)]);
      const std::size_t src = x0_.dim(0) == 1 ? 0 : static_cast<std::size_t>(b) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const std::size_t k = static_cast<std::size_t>(b) * plane + i;
        eps[k] = (x[k] - std::sqrt(ab) * x0_[src + i]) / std::sqrt(1.0 - ab);
      }
    }
    return ag::constant(std::move(eps));
  }

 private:
  Tensor x0_;
  diff::NoiseSchedule sched_;
};

/// Always predicts zero noise.
class ZeroDenoiser : public diff::NoisePredictor {
 public:
  ag::Var predict_noise(const ag::Var& x_t, const std::vector<int>&,
                        const std::vector<diff::ConditionInput>&) const override {
    return ag::constant(Tensor(x_t.shape()));
  }
};

/// Ten-parameter linear predictor over per-pixel features
/// [x_t, 1, t/T, x_t t/T, mask, class/6, cx, cy, w, h].
class LinearStubDenoiser : public diff::NoisePredictor {
 public:
  static constexpr int kFeatures = 10;

  LinearStubDenoiser(int T, Rng& rng) : T_(T) {
    Tensor w({kFeatures, 1});
    for (double& v : w.values()) v = normal(rng, 0.0, 0.5);
    w_ = ag::Var(std::move(w), true);
  }

  const ag::Var& weights() const { return w_; }

  ag::Var predict_noise(const ag::Var& x_t, const std::vector<int>& t,
                        const std::vector<diff::ConditionInput>& cond) const override {
    const Tensor& x = x_t.value();
    const int B = x.dim(0);
    const std::size_t plane = x.size() / static_cast<std::size_t>(B);
    Tensor f({static_cast<int>(x.size()), kFeatures});
    for (int b = 0; b < B; ++b) {
      const auto& c = cond[static_cast<std::size_t>(b)];
      const double tt = static_cast<double>(t[static_cast<std::size_t>(b)]) / T_;
      for (std::size_t i = 0; i < plane; ++i) {
        const int r = static_cast<int>(static_cast<std::size_t>(b) * plane + i);
        const double xv = x[static_cast<std::size_t>(r)];
        const double row[kFeatures] = {xv,     1.0,      tt,       xv * tt,  c.mask[i] ? 1.0 : 0.0,
                                       synth::class_id(c.cls) / 6.0, c.box.cx, c.box.cy, c.box.w, c.box.h};
        for (int j = 0; j < kFeatures; ++j) f.at(r, j) = row[j];
      }
    }
    return ag::reshape(ag::matmul(ag::constant(std::move(f)), w_), x.shape());
  }

 private:
  int T_;
  ag::Var w_;
};

}  // namespace dsym::testing
