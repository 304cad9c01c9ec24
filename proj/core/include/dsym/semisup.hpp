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

// Two-stage teacher-student trainer. Phase 1 trains the student on labeled
// (plus synthesized) images. Phase 2 copies it into an EMA teacher whose
// filtered detections on unlabeled images supervise the student alongside
// a consistency term, ramped in by lambda_unsup.

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dsym/clipfilter.hpp"
#include "dsym/detector.hpp"
#include "dsym/eval.hpp"
#include "dsym/synthdata.hpp"

namespace dsym::semi {

struct TrainConfig {
  int epochs_sup = 50;
  int epochs_total = 200;
  double alpha = 0.999;
  double tau_conf = 0.5;
  double lambda_unsup_max = 1.0;
  int ramp_epochs = 30;
  int batch_size = 16;
  double lr = 1e-3;
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::string optimizer = "sgd";  ///< "sgd" or "adam"
  double grad_clip = 10.0;
  bool use_semisup = true;        ///< false: phase 2 sees labeled batches only
  double eval_conf = 0.01;        ///< detection threshold for mAP
  double pr_conf = 0.25;          ///< detection threshold for precision/recall
  std::uint64_t seed = 0;
};

/// Throws InvalidArgument unless epochs_sup < epochs_total (or equal, which
/// skips phase 2), alpha in (0,1], batch_size >= 1 and rates are positive.
void validate(const TrainConfig& cfg);

/// Mean over rows of -log p_{i, t_i}. `probs` is (N, C) with rows summing to
/// one. Returns a zero constant and sets `*degenerate` when N = 0.
ag::Var supervised_loss(const ag::Var& probs, const std::vector<int>& targets, bool* degenerate = nullptr);

/// Mean squared difference of shape-aligned outputs. Throws InvalidArgument
/// on a shape mismatch.
ag::Var consistency_loss(const ag::Var& student, const ag::Var& teacher);

/// Post-activation head maps of selected images as rows: per anchor,
/// sigmoid class scores, sigmoid objectness and expected side distances
/// divided by the bin count.
ag::Var activation_maps(const det::Detector& model, const det::HeadOutput& out, const std::vector<int>& images);

/// teacher <- alpha teacher + (1 - alpha) student, elementwise. Throws
/// InvalidArgument unless alpha in (0,1] and the stores have equal layout.
void ema_update(const nn::ParamStore& student, nn::ParamStore& teacher, double alpha);

struct TeacherStudentState {
  det::Detector student;
  det::Detector teacher;
  double alpha = 0.999;
  long step = 0;

  /// Teacher initialized as a copy of the student.
  TeacherStudentState(det::Detector s, double alpha);
  void ema_step();
};

/// 0 at epochs_sup rising linearly to lambda_unsup_max at epochs_sup +
/// ramp_epochs, constant after. Fractional epochs are allowed. Throws
/// InvalidArgument if epoch < epochs_sup.
double lambda_unsup(double epoch, const TrainConfig& cfg);

struct PseudoLabel {
  std::string source_image;
  std::vector<eval::Detection> detections;  ///< boxes used as targets
  double teacher_confidence = 0.0;          ///< top detection score
  double clip_similarity = 0.0;             ///< top detection region vs its class prompt
  bool accepted = false;
};

/// Scores regions with a contrastive encoder, or passes everything (with
/// similarity 1) when no encoder is set or `passthrough` is on.
struct PseudoFilter {
  const clip::ContrastiveEncoder* encoder = nullptr;
  bool passthrough = false;
  clip::FilterConfig config;
};

/// Teacher detections on `images` at step t. An image is accepted when its
/// top detection passes keep_sample(); its targets are then the detections
/// that individually pass keep_sample() as well. Rejected images carry no
/// targets.
std::vector<PseudoLabel> generate_pseudo_labels(const det::Detector& teacher,
                                                const std::vector<const synth::ImageSample*>& images,
                                                const PseudoFilter& filter, long step, double det_conf = 0.05);

struct ValMetrics {
  double map50 = 0.0;
  double map50_95 = 0.0;
  double precision = 0.0;
  double recall = 0.0;
};

ValMetrics evaluate_detector(const det::Detector& model, const std::vector<synth::ImageSample>& samples,
                             double eval_conf = 0.01, double pr_conf = 0.25);

struct EpochLog {
  int epoch = 0;          ///< 1-based
  std::string phase;      ///< "sup" or "semi"
  std::string model;      ///< "student" or "teacher"
  ValMetrics val;
  double loss = 0.0;      ///< mean training loss of the epoch
  double lambda = 0.0;    ///< lambda_unsup at the end of the epoch
  long accepted_pseudo = 0;
  long scored_pseudo = 0;
};

struct RunInputs {
  const std::vector<synth::ImageSample>* labeled = nullptr;
  const std::vector<synth::ImageSample>* unlabeled = nullptr;
  const std::vector<synth::ImageSample>* synthetic = nullptr;  ///< optional
  const std::vector<synth::ImageSample>* val = nullptr;
  PseudoFilter filter;
};

struct RunResult {
  TeacherStudentState state;
  std::vector<EpochLog> log;
  long accepted_total = 0;
  /// Every target used in a loss came from an accepted pseudo-label.
  bool filter_audit_ok = true;
};

/// Phase-2 optimizer steps: (epochs_total - epochs_sup) epochs of
/// ceil(max(unlabeled, labeled_pool) / batch_size) steps, at least 1. This is
/// the filter's T_total.
long semi_total_steps(std::size_t labeled_pool, std::size_t unlabeled, const TrainConfig& cfg);

/// Full training run, deterministic per cfg.seed. `on_epoch` sees each
/// log row as it is produced. Throws TrainingDivergence on a non-finite loss.
RunResult run_dsym(const RunInputs& in, const det::DetectorConfig& det_cfg, const TrainConfig& cfg,
                   const std::function<void(const EpochLog&)>& on_epoch = {});

}  // namespace dsym::semi
