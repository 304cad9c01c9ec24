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

// Anchor-free single-channel detector: strided conv backbone with a small
// top-down neck (strides 8 and 16), a gated state-space block per level,
// and decoupled box / class / objectness branches. Boxes are predicted as
// discrete distance distributions (m+1 bins per side) and decoded by
// expectation.

#pragma once

#include <array>
#include <filesystem>
#include <vector>

#include "dsym/eval.hpp"
#include "dsym/image.hpp"
#include "dsym/nn.hpp"
#include "dsym/ops.hpp"

namespace dsym::det {

using eval::Detection;

// State-space scan -----------------------------------------------------------

/// h_t = A h_{t-1} + B x_t,  y_t = C h_t + D_skip x_t.
struct SSMParams {
  Tensor A;       ///< (N, N)
  Tensor B;       ///< (N, D)
  Tensor C;       ///< (D, N)
  Tensor D_skip;  ///< (D, D)
  int state_dim() const { return A.dim(0); }
  int feature_dim() const { return B.dim(1); }
};

/// Sequential recurrence over x (L, D). `h0` has N entries or is empty (zero).
/// Throws InvalidArgument on shape mismatch, L = 0 or non-finite input.
Tensor ssm_scan(const Tensor& x, const SSMParams& p, const std::vector<double>& h0 = {});

/// Same result by a log-depth associative scan over (A^k, v) pairs.
Tensor ssm_scan_parallel(const Tensor& x, const SSMParams& p, const std::vector<double>& h0 = {});

/// Largest eigenvalue magnitude of a square matrix.
double spectral_radius(const Tensor& a);

namespace ops {

/// Differentiable scan. `u` holds rows of `u.dim(0)/seq_len` independent
/// sequences of length `seq_len`, each starting from a zero state.
ag::Var ssm_scan(const ag::Var& u, const ag::Var& A, const ag::Var& B, const ag::Var& C, const ag::Var& D_skip,
                 int seq_len);

/// (P, 4(m+1)) side-major bin logits -> (P, 4) expected distances in bins.
ag::Var expected_distance(const ag::Var& box_logits, int bins);

/// Distribution loss: cross-entropy of each side's bin distribution against
/// the two-hot split of the target distance (P, 4), clamped to [0, m-0.01].
/// Returns the sum over rows of the side-averaged loss.
ag::Var dfl_loss(const ag::Var& box_logits, const Tensor& target_ltrb, int bins);

/// Sum over rows of 1 - IoU for boxes sharing an anchor point, both given as
/// non-negative (left, top, right, bottom) distances.
ag::Var ltrb_iou_loss(const ag::Var& pred_ltrb, const Tensor& target_ltrb);

}  // namespace ops

// Decoding -------------------------------------------------------------------

/// Pixel box corners.
struct PixelBox {
  double x1, y1, x2, y2;
};

/// Softmax per side, d = sum_k k p_k, box = (a - d_l s, a - d_t s, a + d_r s,
/// a + d_b s), clamped to [0, image_size]. `box_dist` is (P, 4(m+1)) and
/// `anchors` holds P (x, y) centers.
std::vector<PixelBox> dfl_decode(const Tensor& box_dist, const std::vector<std::array<double, 2>>& anchors,
                                 int stride, int bins, int image_size);

/// Elementwise logistic function.
Tensor classify(const Tensor& cls_logits);

/// ln(n / s). Throws InvalidArgument unless n >= 1 and s >= 1.
double init_head_bias(int n, int s);

/// Cell centers ((j + 0.5) s, (i + 0.5) s), row-major.
std::vector<std::array<double, 2>> make_anchors(int h, int w, int stride);

/// Per-class greedy suppression: a box is dropped if it overlaps an already
/// kept, higher-ranked box of the same class with IoU > iou_thresh. Output is
/// sorted by score descending (ties by input order).
std::vector<Detection> nms(std::vector<Detection> dets, double iou_thresh);

// Model ----------------------------------------------------------------------

struct DetectorConfig {
  int image_size = 64;
  int num_classes = synth::kNumClasses;
  int bins = 8;         ///< m; each side has m+1 bins
  int width = 32;       ///< head feature dim D
  int state_dim = 16;   ///< SSM state N
  bool use_mamba = true;
  bool operator==(const DetectorConfig&) const = default;
};

inline constexpr std::array<int, 2> kStrides = {8, 16};

struct LevelOutput {
  ag::Var box;  ///< (B*h*w, 4(m+1))
  ag::Var cls;  ///< (B*h*w, C)
  ag::Var obj;  ///< (B*h*w, 1)
  int h = 0;
  int w = 0;
  int stride = 0;
};

struct HeadOutput {
  int batch = 0;
  std::vector<LevelOutput> levels;
};

/// Per-anchor training targets for one batch, concatenated over images and
/// levels in the same order as the head rows.
struct Assignment {
  std::vector<int> level;              ///< per positive
  std::vector<int> row;                ///< per positive, row within its level
  std::vector<int> cls;                ///< per positive
  std::vector<std::array<double, 4>> ltrb;  ///< per positive, in stride units
  std::vector<std::array<double, 4>> box_px;  ///< matched GT corners
  std::vector<Tensor> obj_target;      ///< per level, (B*h*w, 1)
};

struct LossWeights {
  double cls = 1.0;
  double obj = 1.0;
  double dfl = 0.5;
  double iou = 2.0;
};

struct LossBreakdown {
  ag::Var total;
  double cls = 0.0;
  double obj = 0.0;
  double dfl = 0.0;
  double iou = 0.0;
  int positives = 0;
};

/// (B, 1, S, S) tensor; pixels mapped from [0,1] to [-2,2].
Tensor images_to_tensor(const std::vector<const Image*>& images);

class Detector {
 public:
  Detector(DetectorConfig cfg, std::uint64_t seed);
  // Parameters are shared handles, so copies must go through clone().
  Detector(const Detector&) = delete;
  Detector& operator=(const Detector&) = delete;
  Detector(Detector&&) = default;
  Detector& operator=(Detector&&) = default;
  /// Independent deep copy.
  Detector clone() const;

  const DetectorConfig& config() const noexcept { return cfg_; }
  nn::ParamStore& params() noexcept { return params_; }
  const nn::ParamStore& params() const noexcept { return params_; }

  /// Backbone plus neck: one (B, D, S/s, S/s) map per stride.
  std::vector<ag::Var> features(const ag::Var& images) const;
  /// Gated SSM block (or conv block when use_mamba is off) and branches.
  /// Throws InvalidState if a map's channel count differs from D.
  HeadOutput head(const std::vector<ag::Var>& features) const;
  HeadOutput forward(const ag::Var& images) const { return head(features(images)); }

  /// SSM parameters of one level, as plain tensors.
  SSMParams ssm_params(int level) const;
  /// Rescales each level's A so its spectral radius is at most `limit`.
  /// Returns true if any matrix changed.
  bool project_stable(double limit = 1.0);

  /// Center-in-box assignment over all levels. Ties go to the GT with the
  /// nearest center; a GT containing no anchor takes the nearest free
  /// stride-8 anchor.
  Assignment assign(const HeadOutput& out, const std::vector<std::vector<synth::Annotation>>& targets) const;

  LossBreakdown loss(const HeadOutput& out, const std::vector<std::vector<synth::Annotation>>& targets,
                     const LossWeights& w = {}) const;

  /// Decoded, thresholded (score > conf_thresh) and suppressed detections,
  /// at most `max_det` per image.
  std::vector<std::vector<Detection>> detect(const std::vector<const Image*>& images, double conf_thresh,
                                             double iou_nms = 0.5, int max_det = 100) const;
  std::vector<Detection> detect(const Image& image, double conf_thresh, double iou_nms = 0.5,
                                int max_det = 100) const;
  /// Converts raw head output of a batch into detections.
  std::vector<std::vector<Detection>> decode(const HeadOutput& out, double conf_thresh, double iou_nms,
                                             int max_det) const;

  void save(const std::filesystem::path& path, const std::map<std::string, std::string>& meta = {}) const;
  static Detector load(const std::filesystem::path& path);

 private:
  struct Level {
    nn::Linear in_proj, gate_proj, out_proj;
    ag::Var A, B, C, D_skip;
    nn::Conv2d conv_block;
    nn::Linear box, cls, obj;
  };

  DetectorConfig cfg_;
  nn::ParamStore params_;
  nn::Conv2d stem_, c2_, c3_, c4_, c5_, lat3_, lat4_, smooth3_, smooth4_;
  std::vector<Level> levels_;
};

}  // namespace dsym::det
