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

// Detection metrics: IoU, greedy matching, precision/recall, all-point AP
// and mAP.

#pragma once

#include <array>
#include <optional>
#include <vector>

#include "dsym/synthdata.hpp"

namespace dsym::eval {

using synth::Annotation;
using synth::BBox;
using synth::DefectClass;

/// Detector output record. `id` breaks score ties when ranking; it should be
/// unique within one evaluation.
struct Detection {
  BBox box;
  DefectClass cls = DefectClass::kCrazing;
  double score = 0.0;
  int id = 0;
};

/// 0 for disjoint or zero-area boxes.
double iou(const BBox& a, const BBox& b);

struct MatchResult {
  std::vector<bool> is_tp;        // per detection
  std::vector<int> matched_gt;    // per detection, -1 if unmatched
  int tp = 0;
  int fp = 0;
  int fn = 0;
};

/// Greedy matching on one image. Detections must be sorted by score
/// descending; each claims the highest-IoU unmatched same-class GT with
/// IoU >= iou_thresh.
MatchResult match_detections(const std::vector<Detection>& dets, const std::vector<Annotation>& gts,
                             double iou_thresh = 0.5);

struct PR {
  double precision = 1.0;
  double recall = 1.0;
};

/// P = TP/(TP+FP) and R = TP/(TP+FN); both 0/0 cases are reported as 1.
PR precision_recall(int tp, int fp, int fn);

/// One image's detections and ground truth.
struct EvalImage {
  std::vector<Detection> dets;
  std::vector<Annotation> gts;
};

struct PRPoint {
  double recall;
  double precision;
  double score;
};

/// One point per distinct score of class `cls`, thresholds descending, so
/// recall is non-decreasing.
std::vector<PRPoint> pr_curve(const std::vector<EvalImage>& images, DefectClass cls, double iou_thresh = 0.5);

/// Area under the monotone precision envelope, summed over recall steps.
/// nullopt when the class has no ground truth.
std::optional<double> average_precision(const std::vector<EvalImage>& images, DefectClass cls,
                                        double iou_thresh = 0.5);

struct APResult {
  std::array<std::optional<double>, synth::kNumClasses> per_class_ap{};
  double map = 0.0;
  /// Classes without ground truth, excluded from the mean.
  std::vector<DefectClass> undefined;
};

/// Mean over defined classes. Throws InvalidArgument if none is defined.
APResult mean_ap(const std::array<std::optional<double>, synth::kNumClasses>& per_class);

struct ClassReport {
  int gt = 0;
  int tp = 0;
  int fp = 0;
  int fn = 0;
  PR pr;
  std::optional<double> ap50;
};

struct EvalReport {
  std::array<ClassReport, synth::kNumClasses> classes{};
  double map50 = 0.0;
  double map50_95 = 0.0;
  /// Micro-averaged over all classes at the given detections.
  PR overall;
};

/// Full report. P/R count every supplied detection; mAP@[.5:.95] averages
/// 10 IoU thresholds 0.50, 0.55, ..., 0.95.
EvalReport evaluate(const std::vector<EvalImage>& images);

}  // namespace dsym::eval
