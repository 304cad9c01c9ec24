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

// Cross-modal pseudo-label gate: a small contrastive image encoder paired
// with a learned table of prompt embeddings, cosine scoring, and an
// exponentially decaying acceptance threshold.

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

namespace dsym::clip {

/// Prompt rows: one per defect class, then the background prompt.
inline constexpr int kBackgroundPrompt = synth::kNumClasses;
inline constexpr int kNumPrompts = synth::kNumClasses + 1;

/// "A photo with {defect} defect", or "A photo with no defect" for the
/// background row. Throws InvalidArgument outside [0, kNumPrompts).
std::string prompt_text(int prompt);

using Embedding = std::vector<double>;

/// Cosine similarity. Throws InvalidArgument on a zero vector or a length
/// mismatch.
double similarity(const Embedding& a, const Embedding& b);

struct FilterConfig {
  double tau_0 = 0.3;
  double lambda_decay = 1.0;
  long T_total = 1;
  double tau_conf = 0.5;
};

/// Throws InvalidArgument unless tau_0 in (0,1), lambda_decay >= 0 and
/// T_total >= 1.
void validate(const FilterConfig& cfg);

/// tau_0 exp(-(t / T_total) lambda). Throws InvalidArgument unless
/// 0 <= t <= T_total.
double threshold_at(long t, const FilterConfig& cfg);

/// s > tau_t and C > tau_conf.
bool keep_sample(double s, double teacher_conf, long t, const FilterConfig& cfg);

struct EncoderConfig {
  int dim = 32;              ///< d
  int crop_size = 24;        ///< crops are resized to this square
  int channels = 16;         ///< first conv width; doubled once
  double temperature = 0.1;
  double pad = 0.2;          ///< box padding per side, as a fraction of box size
  bool operator==(const EncoderConfig&) const = default;
};

/// Symmetric contrastive objective over unit-normalized features.
/// Image-to-prompt: cross-entropy over all prompts for each image.
/// Prompt-to-image: for each prompt present in the batch, mean negative
/// log-probability of its images under a softmax over the batch. The result
/// is the average of the two directions.
ag::Var contrastive_loss(const ag::Var& image_features, const ag::Var& text_features, const std::vector<int>& labels,
                         double temperature);

/// Labeled crops for contrastive training or retrieval checks.
struct CropSet {
  std::vector<Image> crops;  ///< crop_size squares
  std::vector<int> labels;   ///< prompt rows
};

class ContrastiveEncoder {
 public:
  ContrastiveEncoder(EncoderConfig cfg, std::uint64_t seed);
  ContrastiveEncoder(const ContrastiveEncoder&) = delete;
  ContrastiveEncoder& operator=(const ContrastiveEncoder&) = delete;
  ContrastiveEncoder(ContrastiveEncoder&&) = default;
  ContrastiveEncoder& operator=(ContrastiveEncoder&&) = default;

  const EncoderConfig& config() const noexcept { return cfg_; }
  nn::ParamStore& params() noexcept { return params_; }
  const nn::ParamStore& params() const noexcept { return params_; }

  /// Box region padded by `pad` per side, resized to crop_size.
  Image region(const Image& image, const synth::BBox& box) const;

  /// (B, d) features of crop_size crops.
  ag::Var image_features(const std::vector<Image>& crops) const;
  /// (kNumPrompts, d) prompt table.
  const ag::Var& text_features() const noexcept { return text_; }

  /// Embedding of a whole image, resized to crop_size.
  Embedding encode_image(const Image& image) const;
  /// Embedding of a padded box region.
  Embedding encode_region(const Image& image, const synth::BBox& box) const;
  Embedding encode_text(synth::DefectClass cls) const;
  /// Row `prompt` of the table; throws InvalidArgument out of range.
  Embedding encode_prompt(int prompt) const;

  /// Cosine similarity of a region and a class prompt.
  double score(const Image& image, const synth::BBox& box, synth::DefectClass cls) const;
  /// Prompt row with the highest similarity for each crop.
  std::vector<int> retrieve(const std::vector<Image>& crops) const;

  void save(const std::filesystem::path& path, const std::map<std::string, std::string>& meta = {}) const;
  static ContrastiveEncoder load(const std::filesystem::path& path);

 private:
  EncoderConfig cfg_;
  nn::ParamStore params_;
  nn::Conv2d c1_, c2_, c3_;
  nn::Linear proj_;
  ag::Var text_;
};

/// One padded crop per annotation plus `background_per_image` crops from
/// windows that overlap no box, drawn with derive_seed(seed, {i}).
CropSet build_crop_set(const ContrastiveEncoder& enc, const std::vector<synth::ImageSample>& samples,
                       int background_per_image, std::uint64_t seed);

/// Top-1 prompt retrieval accuracy on a crop set.
double retrieval_accuracy(const ContrastiveEncoder& enc, const CropSet& set);

struct ContrastiveTrainConfig {
  int epochs = 30;
  int batch_size = 32;
  double lr = 3e-3;
  int background_per_image = 1;
  std::uint64_t seed = 0;
};

/// Trains on crops from labeled samples; returns the mean loss per epoch.
/// Throws TrainingDivergence on a non-finite loss or parameter.
std::vector<double> train_contrastive(ContrastiveEncoder& enc, const std::vector<synth::ImageSample>& samples,
                                      const ContrastiveTrainConfig& cfg,
                                      const std::function<void(int, double)>& on_epoch = {});

/// The filter is only trusted when held-out retrieval clears this bar;
/// otherwise it passes everything through and the run is flagged.
inline constexpr double kRetrievalGate = 0.7;

}  // namespace dsym::clip
