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

// Class- and layout-conditioned denoising diffusion: closed-form forward
// noising, epsilon-prediction training, deterministic DDIM sampling.
//
// Step indices run 1..T; alpha_bar(0) is 1. Images are [0,1] at the API
// boundary and [-1,1] inside the model.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "dsym/image.hpp"
#include "dsym/nn.hpp"
#include "dsym/ops.hpp"
#include "dsym/synthdata.hpp"

namespace dsym::diff {

enum class ScheduleKind { kLinear, kCosine };

ScheduleKind schedule_kind_from_name(const std::string& name);
std::string schedule_kind_name(ScheduleKind k);

struct NoiseSchedule {
  int T = 0;
  std::vector<double> beta;       ///< beta[t-1] is beta_t
  std::vector<double> alpha;      ///< 1 - beta
  std::vector<double> alpha_bar;  ///< cumulative products
  ScheduleKind kind = ScheduleKind::kLinear;
  double beta_start = 0.0;
  double beta_end = 0.0;

  /// alpha_bar for step t in [0, T]; t = 0 gives 1.
  double alpha_bar_at(int t) const;
};

/// Linear: beta evenly spaced from beta_start to beta_end. Cosine: betas
/// from the squared-cosine alpha_bar curve, clipped to [beta_start, beta_end].
/// Throws InvalidArgument unless T >= 1 and 0 < beta_start <= beta_end < 1.
NoiseSchedule make_schedule(int T = 200, double beta_start = 1e-4, double beta_end = 0.02,
                            ScheduleKind kind = ScheduleKind::kLinear);

/// sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps, for t in [0, T].
Tensor forward_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& s);

/// One Markov step: sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) eps, t in [1, T].
Tensor forward_step(const Tensor& x_prev, int t, const Tensor& eps, const NoiseSchedule& s);

/// What a sample is conditioned on. `mask` is S*S binary (union of defect
/// masks); `box` encloses the whole layout.
struct ConditionInput {
  synth::DefectClass cls = synth::DefectClass::kCrazing;
  std::vector<std::uint8_t> mask;
  synth::BBox box;
};

/// Condition for reconstructing an existing sample.
ConditionInput condition_from_sample(const synth::ImageSample& s);
/// Condition from a shape layout (all shapes share `cls`).
ConditionInput condition_from_layout(synth::DefectClass cls, const std::vector<synth::DefectShape>& layout, int size);

struct ConditionEmbedding {
  ag::Var e_cls;  ///< (B, d)
  ag::Var e_spa;  ///< (B, d)
  ag::Var c;      ///< (B, d)
};

/// Anything that predicts the added noise: the trained network or a test
/// oracle. `x_t` is (B, 1, S, S) in model space; `t` holds B steps.
class NoisePredictor {
 public:
  virtual ~NoisePredictor() = default;
  virtual ag::Var predict_noise(const ag::Var& x_t, const std::vector<int>& t,
                                const std::vector<ConditionInput>& cond) const = 0;
};

struct DenoiserConfig {
  int image_size = 64;
  int cond_dim = 64;       ///< d
  int base_channels = 8;   ///< channels at full resolution; doubled per level
  int time_dim = 64;
  bool operator==(const DenoiserConfig&) const = default;
};

namespace ops {

/// Single-head attention of one query per item over `tokens` keys/values
/// per item: out_b = sum_t softmax_t(q_b . k_bt / sqrt(d)) v_bt.
/// q is (B, d); k and v are (B*tokens, d).
ag::Var attention_pool(const ag::Var& q, const ag::Var& k, const ag::Var& v, int tokens);

}  // namespace ops

/// Three-level conv encoder-decoder with skip connections. The condition
/// mask is an extra input channel; time and condition embeddings modulate
/// every block through per-channel scale and shift.
class Denoiser : public NoisePredictor {
 public:
  Denoiser(DenoiserConfig cfg, std::uint64_t seed);
  Denoiser(const Denoiser&) = delete;
  Denoiser& operator=(const Denoiser&) = delete;
  Denoiser(Denoiser&&) = default;
  Denoiser& operator=(Denoiser&&) = default;

  const DenoiserConfig& config() const noexcept { return cfg_; }
  nn::ParamStore& params() noexcept { return params_; }
  const nn::ParamStore& params() const noexcept { return params_; }

  /// e_cls = Emb(class) + PE(class id); e_spa = CNN(mask) + MLP(box);
  /// c = CrossAttn(e_cls; spatial tokens) + e_cls + e_spa.
  ConditionEmbedding encode_condition(const std::vector<ConditionInput>& cond) const;

  /// The two summands of e_spa, exposed for inspection.
  struct SpatialTerms {
    ag::Var cnn;  ///< (B, d), mean of the mask tokens
    ag::Var mlp;  ///< (B, d)
  };
  SpatialTerms spatial_terms(const std::vector<ConditionInput>& cond) const;

  ag::Var predict_noise(const ag::Var& x_t, const std::vector<int>& t,
                        const std::vector<ConditionInput>& cond) const override;

  void save(const std::filesystem::path& path, const NoiseSchedule& sched,
            const std::map<std::string, std::string>& meta = {}) const;
  /// Loads the network and the schedule stored with it.
  static std::pair<Denoiser, NoiseSchedule> load(const std::filesystem::path& path);

 private:
  struct Tokens {
    ag::Var cnn_tokens;  ///< (B*T, d)
    ag::Var box_mlp;     ///< (B, d)
    int per_item = 0;
  };
  Tokens spatial_tokens(const std::vector<ConditionInput>& cond) const;
  Tensor mask_tensor(const std::vector<ConditionInput>& cond) const;

  DenoiserConfig cfg_;
  nn::ParamStore params_;
  // Condition encoder.
  ag::Var cls_table_;
  nn::Conv2d m1_, m2_, m3_;
  nn::Linear tok_proj_, box1_, box2_;
  nn::Linear wq_, wk_, wv_, wo_;
  // Embeddings.
  nn::Linear t1_, t2_, cproj_;
  // Encoder-decoder.
  nn::Conv2d enc1_, down1_, down2_, mid_, up2_, up1_, out_;
  nn::Linear f_enc1_, f_down1_, f_down2_, f_mid_, f_up2_, f_up1_;
};

/// Single-condition convenience wrapper.
ConditionEmbedding encode_condition(const Denoiser& net, synth::DefectClass cls,
                                    const std::vector<std::uint8_t>& mask, const synth::BBox& box);

/// Batch of x0 in [0,1] (B, 1, S, S); draws t ~ U{1..T} and eps ~ N(0, I)
/// from `rng` and returns mean((eps - eps_theta)^2). Throws
/// TrainingDivergence if the value is not finite.
ag::Var diffusion_loss(const NoisePredictor& net, const Tensor& x0, const std::vector<ConditionInput>& cond,
                       const NoiseSchedule& sched, Rng& rng);

/// Deterministic DDIM over `steps` evenly spaced steps from T down to 0.
/// One image per condition; item i starts from noise seeded by
/// derive_seed(seed, {i}). Output is rescaled to [0,1] and clamped.
/// Throws InvalidArgument unless 1 <= steps <= T.
std::vector<Image> ddim_sample(const NoisePredictor& net, const std::vector<ConditionInput>& cond,
                               const NoiseSchedule& sched, int steps, std::uint64_t seed);

/// `n_per_class` samples per class, each conditioned on a fresh layout from
/// the generator's shape priors and labeled with that layout's boxes.
std::vector<synth::ImageSample> synthesize_defect_set(const NoisePredictor& net, const NoiseSchedule& sched,
                                                      int n_per_class, std::uint64_t seed, int steps = 20,
                                                      int image_size = synth::kDefaultImageSize);

struct DiffusionTrainConfig {
  int epochs = 60;
  int batch_size = 16;
  double lr = 2e-3;
  double grad_clip = 1.0;
  std::uint64_t seed = 0;
};

/// Trains on labeled samples; returns the mean loss of each epoch.
/// `on_epoch(epoch, loss)` is called after each epoch when set; epoch counts
/// from 0.
std::vector<double> train_diffusion(Denoiser& net, const NoiseSchedule& sched,
                                    const std::vector<synth::ImageSample>& data, const DiffusionTrainConfig& cfg,
                                    const std::function<void(int, double)>& on_epoch = {});

/// Per-sample check that mean intensity on the conditioned defect pixels
/// differs from the background mean by more than 2 background std devs.
struct FidelityReport {
  std::vector<bool> pass;
  double pass_rate = 0.0;
};
FidelityReport fidelity_gate(const std::vector<synth::ImageSample>& samples);

}  // namespace dsym::diff
