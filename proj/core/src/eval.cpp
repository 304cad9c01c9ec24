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

#include "dsym/eval.hpp"

#include <algorithm>
#include <numeric>

#include "dsym/errors.hpp"

namespace dsym::eval {

double iou(const BBox& a, const BBox& b) {
  const double ax1 = a.cx - a.w / 2, ax2 = a.cx + a.w / 2, ay1 = a.cy - a.h / 2, ay2 = a.cy + a.h / 2;
  const double bx1 = b.cx - b.w / 2, bx2 = b.cx + b.w / 2, by1 = b.cy - b.h / 2, by2 = b.cy + b.h / 2;
  const double iw = std::min(ax2, bx2) - std::max(ax1, bx1);
  const double ih = std::min(ay2, by2) - std::max(ay1, by1);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.w * a.h + b.w * b.h - inter;
  return uni > 0 ? inter / uni : 0.0;
}

MatchResult match_detections(const std::vector<Detection>& dets, const std::vector<Annotation>& gts,
                             double iou_thresh) {
  MatchResult r;
  r.is_tp.assign(dets.size(), false);
  r.matched_gt.assign(dets.size(), -1);
  std::vector<bool> used(gts.size(), false);
  for (std::size_t i = 0; i < dets.size(); ++i) {
    int best = -1;
    double best_iou = iou_thresh;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (used[g] || gts[g].cls != dets[i].cls) continue;
      const double v = iou(dets[i].box, gts[g].box);
      if (v >= best_iou && (best < 0 || v > best_iou)) {
        best = static_cast<int>(g);
        best_iou = v;
      }
    }
    if (best >= 0) {
      used[static_cast<std::size_t>(best)] = true;
      r.is_tp[i] = true;
      r.matched_gt[i] = best;
      ++r.tp;
    } else {
      ++r.fp;
    }
  }
  r.fn = static_cast<int>(gts.size()) - r.tp;
  return r;
}

PR precision_recall(int tp, int fp, int fn) {
  if (tp < 0 || fp < 0 || fn < 0) throw InvalidArgument("precision_recall: negative count");
  PR pr;
  pr.precision = tp + fp == 0 ? 1.0 : static_cast<double>(tp) / (tp + fp);
  pr.recall = tp + fn == 0 ? 1.0 : static_cast<double>(tp) / (tp + fn);
  return pr;
}

namespace {

bool ranks_before(const Detection& a, const Detection& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.id < b.id;
}

struct Ranked {
  double score;
  bool tp;
};

/// Class-restricted greedy matching across images, in global rank order.
std::vector<Ranked> rank_and_match(const std::vector<EvalImage>& images, DefectClass cls, double iou_thresh,
                                   int& n_gt) {
  n_gt = 0;
  std::vector<Ranked> out;
  for (const auto& im : images) {
    std::vector<Detection> dets;
    for (const auto& d : im.dets)
      if (d.cls == cls) dets.push_back(d);
    std::vector<Annotation> gts;
    for (const auto& g : im.gts)
      if (g.cls == cls) gts.push_back(g);
    n_gt += static_cast<int>(gts.size());
    std::sort(dets.begin(), dets.end(), ranks_before);
    // Images are independent, so per-image greedy equals global-order greedy.
    const auto m = match_detections(dets, gts, iou_thresh);
    for (std::size_t i = 0; i < dets.size(); ++i) out.push_back({dets[i].score, m.is_tp[i]});
  }
  std::stable_sort(out.begin(), out.end(), [](const Ranked& a, const Ranked& b) { return a.score > b.score; });
  return out;
}

}  // namespace

std::vector<PRPoint> pr_curve(const std::vector<EvalImage>& images, DefectClass cls, double iou_thresh) {
  int n_gt = 0;
  const auto ranked = rank_and_match(images, cls, iou_thresh, n_gt);
  std::vector<PRPoint> pts;
  int tp = 0, fp = 0;
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    (ranked[i].tp ? tp : fp)++;
    if (i + 1 < ranked.size() && ranked[i + 1].score == ranked[i].score) continue;
    const PR pr = precision_recall(tp, fp, n_gt - tp);
    pts.push_back({pr.recall, pr.precision, ranked[i].score});
  }
  return pts;
}

std::optional<double> average_precision(const std::vector<EvalImage>& images, DefectClass cls, double iou_thresh) {
  int n_gt = 0;
  for (const auto& im : images)
    for (const auto& g : im.gts) n_gt += g.cls == cls;
  if (n_gt == 0) return std::nullopt;
  auto pts = pr_curve(images, cls, iou_thresh);
  for (std::size_t k = pts.size(); k-- > 1;) pts[k - 1].precision = std::max(pts[k - 1].precision, pts[k].precision);
  double ap = 0.0, prev_r = 0.0;
  for (const auto& p : pts) {
    ap += (p.recall - prev_r) * p.precision;
    prev_r = p.recall;
  }
  return ap;
}

APResult mean_ap(const std::array<std::optional<double>, synth::kNumClasses>& per_class) {
  APResult r;
  r.per_class_ap = per_class;
  double sum = 0.0;
  int n = 0;
  for (int c = 0; c < synth::kNumClasses; ++c) {
    const auto& ap = per_class[static_cast<std::size_t>(c)];
    if (ap) {
      sum += *ap;
      ++n;
    } else {
      r.undefined.push_back(synth::class_from_id(c));
    }
  }
  if (n == 0) throw InvalidArgument("mean_ap: no class has ground truth");
  r.map = sum / n;
  return r;
}

EvalReport evaluate(const std::vector<EvalImage>& images) {
  EvalReport rep;
  int tp = 0, fp = 0, fn = 0;
  for (const auto& im : images) {
    auto dets = im.dets;
    std::sort(dets.begin(), dets.end(), ranks_before);
    const auto m = match_detections(dets, im.gts, 0.5);
    for (std::size_t i = 0; i < dets.size(); ++i) {
      auto& cr = rep.classes[static_cast<std::size_t>(synth::class_id(dets[i].cls))];
      (m.is_tp[i] ? cr.tp : cr.fp)++;
    }
    for (const auto& g : im.gts) ++rep.classes[static_cast<std::size_t>(synth::class_id(g.cls))].gt;
    tp += m.tp;
    fp += m.fp;
    fn += m.fn;
  }
  std::array<std::optional<double>, synth::kNumClasses> ap50{};
  for (int c = 0; c < synth::kNumClasses; ++c) {
    auto& cr = rep.classes[static_cast<std::size_t>(c)];
    cr.fn = cr.gt - cr.tp;
    cr.pr = precision_recall(cr.tp, cr.fp, cr.fn);
    cr.ap50 = average_precision(images, synth::class_from_id(c), 0.5);
    ap50[static_cast<std::size_t>(c)] = cr.ap50;
  }
  rep.overall = precision_recall(tp, fp, fn);
  rep.map50 = mean_ap(ap50).map;
  double acc = 0.0;
  for (int k = 0; k < 10; ++k) {
    const double thr = 0.5 + 0.05 * k;
    std::array<std::optional<double>, synth::kNumClasses> aps{};
    for (int c = 0; c < synth::kNumClasses; ++c)
      aps[static_cast<std::size_t>(c)] = average_precision(images, synth::class_from_id(c), thr);
    acc += mean_ap(aps).map;
  }
  rep.map50_95 = acc / 10.0;
  return rep;
}

}  // namespace dsym::eval
