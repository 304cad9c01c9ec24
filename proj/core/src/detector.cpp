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

#include "dsym/detector.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

#include "dsym/errors.hpp"

namespace dsym::det {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

CMapMat cmap(const Tensor& t) { return CMapMat(t.data(), t.dim(0), t.dim(1)); }
MapMat map(Tensor& t) { return MapMat(t.data(), t.dim(0), t.dim(1)); }

void check_ssm_shapes(const Tensor& x, const SSMParams& p, const std::vector<double>& h0) {
  if (x.ndim() != 2 || x.dim(0) < 1) throw InvalidArgument("ssm_scan: x must be (L, D) with L >= 1");
  const int n = p.A.ndim() == 2 ? p.A.dim(0) : -1;
  const int d = x.dim(1);
  if (p.A.shape() != Shape{n, n} || p.B.shape() != Shape{n, d} || p.C.shape() != Shape{d, n} ||
      p.D_skip.shape() != Shape{d, d})
    throw InvalidArgument("ssm_scan: parameter shapes do not match N=" + std::to_string(n) +
                          ", D=" + std::to_string(d));
  if (!h0.empty() && static_cast<int>(h0.size()) != n) throw InvalidArgument("ssm_scan: h0 must have N entries");
  if (!x.all_finite()) throw InvalidArgument("ssm_scan: non-finite input");
  for (double v : h0)
    if (!std::isfinite(v)) throw InvalidArgument("ssm_scan: non-finite h0");
}

Eigen::VectorXd initial_state(const std::vector<double>& h0, int n) {
  if (h0.empty()) return Eigen::VectorXd::Zero(n);
  return Eigen::Map<const Eigen::VectorXd>(h0.data(), n);
}

Tensor ssm_output(const RowMat& h, const Tensor& x, const SSMParams& p) {
  Tensor y({x.dim(0), x.dim(1)});
  map(y) = h * cmap(p.C).transpose() + cmap(x) * cmap(p.D_skip).transpose();
  return y;
}

PixelBox to_pixel(const synth::BBox& b, int size) { return {b.x1(size), b.y1(size), b.x2(size), b.y2(size)}; }

}  // namespace

Tensor ssm_scan(const Tensor& x, const SSMParams& p, const std::vector<double>& h0) {
  check_ssm_shapes(x, p, h0);
  const int L = x.dim(0), n = p.state_dim();
  const RowMat bx = cmap(x) * cmap(p.B).transpose();  // (L, N)
  RowMat h(L, n);
  Eigen::VectorXd state = initial_state(h0, n);
  const auto A = cmap(p.A);
  for (int t = 0; t < L; ++t) {
    state = A * state + bx.row(t).transpose();
    h.row(t) = state.transpose();
  }
  return ssm_output(h, x, p);
}

Tensor ssm_scan_parallel(const Tensor& x, const SSMParams& p, const std::vector<double>& h0) {
  check_ssm_shapes(x, p, h0);
  const int L = x.dim(0), n = p.state_dim();
  const Eigen::MatrixXd A = cmap(p.A);
  // Element t is the affine map h -> M_t h + v_t. Composing t with its
  // predecessor (later after earlier) gives (M_l M_e, M_l v_e + v_l).
  std::vector<Eigen::MatrixXd> M(static_cast<std::size_t>(L), A);
  std::vector<Eigen::VectorXd> v(static_cast<std::size_t>(L));
  const RowMat bx = cmap(x) * cmap(p.B).transpose();
  for (int t = 0; t < L; ++t) v[static_cast<std::size_t>(t)] = bx.row(t).transpose();
  v[0] += A * initial_state(h0, n);
  M[0].setZero();
  for (int offset = 1; offset < L; offset *= 2) {
    auto M_prev = M;
    auto v_prev = v;
    for (int t = offset; t < L; ++t) {
      const auto ut = static_cast<std::size_t>(t), ue = static_cast<std::size_t>(t - offset);
      v[ut] = M_prev[ut] * v_prev[ue] + v_prev[ut];
      M[ut] = M_prev[ut] * M_prev[ue];
    }
  }
  RowMat h(L, n);
  for (int t = 0; t < L; ++t) h.row(t) = v[static_cast<std::size_t>(t)].transpose();
  return ssm_output(h, x, p);
}

double spectral_radius(const Tensor& a) {
  if (a.ndim() != 2 || a.dim(0) != a.dim(1)) throw InvalidArgument("spectral_radius: square matrix required");
  Eigen::EigenSolver<Eigen::MatrixXd> es(Eigen::MatrixXd(cmap(a)), false);
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

namespace ops {

ag::Var ssm_scan(const ag::Var& u, const ag::Var& A, const ag::Var& B, const ag::Var& C, const ag::Var& D_skip,
                 int seq_len) {
  const Tensor& uv = u.value();
  if (uv.ndim() != 2 || seq_len < 1 || uv.dim(0) % seq_len != 0)
    throw InvalidArgument("ssm_scan: rows must be a whole number of sequences");
  SSMParams p{A.value(), B.value(), C.value(), D_skip.value()};
  const int d = uv.dim(1), n = p.state_dim(), seqs = uv.dim(0) / seq_len;
  check_ssm_shapes(Tensor({seq_len, d}), p, {});
  if (!uv.all_finite()) throw InvalidArgument("ssm_scan: non-finite input");

  auto hs = std::make_shared<RowMat>(uv.dim(0), n);
  const RowMat bu = cmap(uv) * cmap(p.B).transpose();
  const auto Am = cmap(p.A);
  for (int s = 0; s < seqs; ++s) {
    Eigen::VectorXd state = Eigen::VectorXd::Zero(n);
    for (int t = 0; t < seq_len; ++t) {
      const int r = s * seq_len + t;
      state = Am * state + bu.row(r).transpose();
      hs->row(r) = state.transpose();
    }
  }
  Tensor y({uv.dim(0), d});
  map(y) = (*hs) * cmap(p.C).transpose() + cmap(uv) * cmap(p.D_skip).transpose();

  return ag::make_op(std::move(y), {u, A, B, C, D_skip}, [hs, seq_len, seqs, n](ag::Node& self) {
    const Tensor& uval = self.inputs[0]->value;
    const auto Av = cmap(self.inputs[1]->value);
    const auto Bv = cmap(self.inputs[2]->value);
    const auto Cv = cmap(self.inputs[3]->value);
    const auto Dv = cmap(self.inputs[4]->value);
    const auto gy = cmap(self.grad);
    const int rows = uval.dim(0);
    // lambda_t = C^T gy_t + A^T lambda_{t+1}: gradient w.r.t. h_t.
    RowMat lam(rows, n);
    const RowMat gyC = gy * Cv;
    for (int s = 0; s < seqs; ++s) {
      Eigen::RowVectorXd next = Eigen::RowVectorXd::Zero(n);
      for (int t = seq_len - 1; t >= 0; --t) {
        const int r = s * seq_len + t;
        next = gyC.row(r) + next * Av;
        lam.row(r) = next;
      }
    }
    RowMat h_prev = RowMat::Zero(rows, n);
    for (int s = 0; s < seqs; ++s)
      for (int t = 1; t < seq_len; ++t) h_prev.row(s * seq_len + t) = hs->row(s * seq_len + t - 1);
    const auto uv_map = cmap(uval);
    if (Tensor* g = ag::input_grad(self, 0)) map(*g) += lam * Bv + gy * Dv;
    if (Tensor* g = ag::input_grad(self, 1)) map(*g) += lam.transpose() * h_prev;
    if (Tensor* g = ag::input_grad(self, 2)) map(*g) += lam.transpose() * uv_map;
    if (Tensor* g = ag::input_grad(self, 3)) map(*g) += gy.transpose() * (*hs);
    if (Tensor* g = ag::input_grad(self, 4)) map(*g) += gy.transpose() * uv_map;
  });
}

ag::Var expected_distance(const ag::Var& box_logits, int bins) {
  const int p = box_logits.value().dim(0);
  if (box_logits.value().dim(1) != 4 * (bins + 1)) throw InvalidArgument("expected_distance: width != 4(m+1)");
  Tensor k({bins + 1, 1});
  for (int i = 0; i <= bins; ++i) k[static_cast<std::size_t>(i)] = i;
  auto probs = ag::softmax_rows(ag::reshape(box_logits, {4 * p, bins + 1}));
  return ag::reshape(ag::matmul(probs, ag::constant(std::move(k))), {p, 4});
}

ag::Var dfl_loss(const ag::Var& box_logits, const Tensor& target_ltrb, int bins) {
  const int p = box_logits.value().dim(0);
  if (box_logits.value().dim(1) != 4 * (bins + 1) || target_ltrb.shape() != Shape{p, 4})
    throw InvalidArgument("dfl_loss: shape mismatch");
  Tensor w({4 * p, bins + 1});
  for (int r = 0; r < 4 * p; ++r) {
    const double t = std::clamp(target_ltrb[static_cast<std::size_t>(r)], 0.0, bins - 0.01);
    const int lo = static_cast<int>(std::floor(t));
    w.at(r, lo) = lo + 1 - t;
    w.at(r, lo + 1) = t - lo;
  }
  auto logp = ag::log_softmax_rows(ag::reshape(box_logits, {4 * p, bins + 1}));
  return ag::scale(ag::sum(ag::mul(logp, ag::constant(std::move(w)))), -0.25);
}

ag::Var ltrb_iou_loss(const ag::Var& pred_ltrb, const Tensor& target_ltrb) {
  const Tensor& pv = pred_ltrb.value();
  if (pv.ndim() != 2 || pv.dim(1) != 4 || !pv.same_shape(target_ltrb))
    throw InvalidArgument("ltrb_iou_loss: expected matching (P, 4) inputs");
  constexpr double kEps = 1e-9;
  const int rows = pv.dim(0);
  double loss = 0.0;
  for (int r = 0; r < rows; ++r) {
    const double* q = pv.data() + 4 * r;
    const double* t = target_ltrb.data() + 4 * r;
    const double iw = std::min(q[0], t[0]) + std::min(q[2], t[2]);
    const double ih = std::min(q[1], t[1]) + std::min(q[3], t[3]);
    const double inter = iw * ih;
    const double uni = (q[0] + q[2]) * (q[1] + q[3]) + (t[0] + t[2]) * (t[1] + t[3]) - inter + kEps;
    loss += 1.0 - inter / uni;
  }
  return ag::make_op(Tensor::scalar(loss), {pred_ltrb}, [target_ltrb, rows](ag::Node& self) {
    Tensor* g = ag::input_grad(self, 0);
    if (!g) return;
    const Tensor& pv2 = self.inputs[0]->value;
    const double go = self.grad[0];
    for (int r = 0; r < rows; ++r) {
      const double* q = pv2.data() + 4 * r;
      const double* t = target_ltrb.data() + 4 * r;
      const double iw = std::min(q[0], t[0]) + std::min(q[2], t[2]);
      const double ih = std::min(q[1], t[1]) + std::min(q[3], t[3]);
      const double inter = iw * ih;
      const double pw = q[0] + q[2], ph = q[1] + q[3];
      const double uni = pw * ph + (t[0] + t[2]) * (t[1] + t[3]) - inter + kEps;
      const double d_inter = (uni + inter) / (uni * uni);  // dIoU/dI
      const double d_area = -inter / (uni * uni);          // dIoU/dA_pred
      double* gr = g->data() + 4 * r;
      gr[0] -= go * (d_inter * (q[0] < t[0] ? ih : 0.0) + d_area * ph);
      gr[2] -= go * (d_inter * (q[2] < t[2] ? ih : 0.0) + d_area * ph);
      gr[1] -= go * (d_inter * (q[1] < t[1] ? iw : 0.0) + d_area * pw);
      gr[3] -= go * (d_inter * (q[3] < t[3] ? iw : 0.0) + d_area * pw);
    }
  });
}

}  // namespace ops

std::vector<PixelBox> dfl_decode(const Tensor& box_dist, const std::vector<std::array<double, 2>>& anchors,
                                 int stride, int bins, int image_size) {
  if (bins < 1) throw InvalidArgument("dfl_decode: m must be >= 1");
  if (box_dist.ndim() != 2 || box_dist.dim(1) != 4 * (bins + 1) ||
      static_cast<std::size_t>(box_dist.dim(0)) != anchors.size())
    throw InvalidArgument("dfl_decode: expected (P, 4(m+1)) logits and P anchors");
  std::vector<PixelBox> out;
  out.reserve(anchors.size());
  std::vector<double> e(static_cast<std::size_t>(bins + 1));
  for (std::size_t r = 0; r < anchors.size(); ++r) {
    std::array<double, 4> d{};
    for (int side = 0; side < 4; ++side) {
      const double* z = box_dist.data() + r * static_cast<std::size_t>(4 * (bins + 1)) + side * (bins + 1);
      const double mx = *std::max_element(z, z + bins + 1);
      double tot = 0.0, acc = 0.0;
      for (int k = 0; k <= bins; ++k) {
        e[static_cast<std::size_t>(k)] = std::exp(z[k] - mx);
        tot += e[static_cast<std::size_t>(k)];
      }
      for (int k = 0; k <= bins; ++k) acc += k * e[static_cast<std::size_t>(k)];
      d[static_cast<std::size_t>(side)] = acc / tot;
    }
    const double ax = anchors[r][0], ay = anchors[r][1], s = stride, lim = image_size;
    out.push_back({std::clamp(ax - d[0] * s, 0.0, lim), std::clamp(ay - d[1] * s, 0.0, lim),
                   std::clamp(ax + d[2] * s, 0.0, lim), std::clamp(ay + d[3] * s, 0.0, lim)});
  }
  return out;
}

Tensor classify(const Tensor& cls_logits) {
  Tensor p(cls_logits.shape());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double c = cls_logits[i];
    p[i] = c >= 0 ? 1.0 / (1.0 + std::exp(-c)) : std::exp(c) / (1.0 + std::exp(c));
  }
  return p;
}

double init_head_bias(int n, int s) {
  if (n < 1 || s < 1) throw InvalidArgument("init_head_bias: n and s must be >= 1");
  return std::log(static_cast<double>(n) / s);
}

std::vector<std::array<double, 2>> make_anchors(int h, int w, int stride) {
  std::vector<std::array<double, 2>> a;
  a.reserve(static_cast<std::size_t>(h) * w);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) a.push_back({(j + 0.5) * stride, (i + 0.5) * stride});
  return a;
}

std::vector<Detection> nms(std::vector<Detection> dets, double iou_thresh) {
  std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
  std::vector<Detection> kept;
  for (const auto& d : dets) {
    bool suppressed = false;
    for (const auto& k : kept)
      if (k.cls == d.cls && eval::iou(k.box, d.box) > iou_thresh) {
        suppressed = true;
        break;
      }
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

Tensor images_to_tensor(const std::vector<const Image*>& images) {
  if (images.empty()) throw InvalidArgument("images_to_tensor: empty batch");
  const int h = images[0]->height, w = images[0]->width;
  Tensor t({static_cast<int>(images.size()), 1, h, w});
  for (std::size_t b = 0; b < images.size(); ++b) {
    if (images[b]->height != h || images[b]->width != w) throw InvalidArgument("images_to_tensor: mixed sizes");
    for (std::size_t i = 0; i < images[b]->pixels.size(); ++i)
      t[b * images[b]->pixels.size() + i] = (images[b]->pixels[i] - 0.5) * 4.0;
  }
  return t;
}

// Model ----------------------------------------------------------------------

Detector::Detector(DetectorConfig cfg, std::uint64_t seed) : cfg_(cfg) {
  if (cfg_.image_size % 32 != 0 || cfg_.image_size < 32)
    throw InvalidArgument("detector: image size must be a positive multiple of 32");
  if (cfg_.bins < 1 || cfg_.width < 1 || cfg_.state_dim < 1 || cfg_.num_classes < 1)
    throw InvalidArgument("detector: invalid head dimensions");
  Rng rng(derive_seed(seed, {0xde7}));
  const int D = cfg_.width, N = cfg_.state_dim;
  stem_ = nn::Conv2d(params_, "stem", 1, 16, 3, 2, 1, rng);
  c2_ = nn::Conv2d(params_, "c2", 16, 32, 3, 2, 1, rng);
  c3_ = nn::Conv2d(params_, "c3", 32, 32, 3, 1, 1, rng);
  c4_ = nn::Conv2d(params_, "c4", 32, 48, 3, 2, 1, rng);
  c5_ = nn::Conv2d(params_, "c5", 48, 64, 3, 2, 1, rng);
  lat3_ = nn::Conv2d(params_, "lat3", 48, D, 1, 1, 0, rng);
  lat4_ = nn::Conv2d(params_, "lat4", 64, D, 1, 1, 0, rng);
  smooth3_ = nn::Conv2d(params_, "smooth3", D, D, 3, 1, 1, rng);
  smooth4_ = nn::Conv2d(params_, "smooth4", D, D, 3, 1, 1, rng);

  for (std::size_t li = 0; li < kStrides.size(); ++li) {
    const std::string pre = "head" + std::to_string(li) + ".";
    Level lv;
    if (cfg_.use_mamba) {
      lv.in_proj = nn::Linear(params_, pre + "in", D, D, rng);
      lv.gate_proj = nn::Linear(params_, pre + "gate", D, D, rng);
      lv.out_proj = nn::Linear(params_, pre + "out", D, D, rng);
      lv.out_proj.w.mutable_value() *= 0.1;
      Tensor A({N, N});
      for (int i = 0; i < N; ++i) {
        A.at(i, i) = 0.5 + 0.4 * i / std::max(1, N - 1);
        for (int j = 0; j < N; ++j) A.at(i, j) += normal(rng, 0.0, 0.02);
      }
      const double rho = spectral_radius(A);
      if (rho > 0.95) A *= 0.95 / rho;
      Tensor Bm({N, D}), Cm({D, N});
      for (double& v : Bm.values()) v = normal(rng, 0.0, 1.0 / std::sqrt(D));
      for (double& v : Cm.values()) v = normal(rng, 0.0, 1.0 / std::sqrt(N));
      lv.A = params_.add(pre + "ssm.A", std::move(A));
      lv.B = params_.add(pre + "ssm.B", std::move(Bm));
      lv.C = params_.add(pre + "ssm.C", std::move(Cm));
      lv.D_skip = params_.add(pre + "ssm.D", Tensor({D, D}));
    } else {
      lv.conv_block = nn::Conv2d(params_, pre + "block", D, D, 3, 1, 1, rng);
      lv.conv_block.w.mutable_value() *= 0.1;
    }
    lv.box = nn::Linear(params_, pre + "box", D, 4 * (cfg_.bins + 1), rng);
    for (double& v : lv.box.w.mutable_value().values()) v = normal(rng, 0.0, 0.01);
    lv.cls = nn::Linear(params_, pre + "cls", D, cfg_.num_classes, rng);
    lv.cls.w.mutable_value().fill(0.0);
    lv.cls.b.mutable_value().fill(init_head_bias(cfg_.num_classes, kStrides[li]));
    lv.obj = nn::Linear(params_, pre + "obj", D, 1, rng);
    lv.obj.w.mutable_value().fill(0.0);
    lv.obj.b.mutable_value().fill(-2.0);
    levels_.push_back(std::move(lv));
  }
}

Detector Detector::clone() const {
  Detector d(cfg_, 0);
  d.params_.copy_from(params_);
  return d;
}

std::vector<ag::Var> Detector::features(const ag::Var& images) const {
  const auto& s = images.shape();
  if (s.size() != 4 || s[1] != 1 || s[2] != cfg_.image_size || s[3] != cfg_.image_size)
    throw InvalidArgument("detector: expected (B, 1, " + std::to_string(cfg_.image_size) + ", " +
                          std::to_string(cfg_.image_size) + ") input, got " + shape_str(s));
  auto x = ag::silu(stem_(images));
  x = ag::silu(c2_(x));
  x = ag::silu(c3_(x));
  auto p3 = ag::silu(c4_(x));
  auto p4 = ag::silu(c5_(p3));
  auto l4 = lat4_(p4);
  auto l3 = ag::add(lat3_(p3), ag::upsample2x(l4));
  return {ag::silu(smooth3_(l3)), ag::silu(smooth4_(l4))};
}

HeadOutput Detector::head(const std::vector<ag::Var>& feats) const {
  if (feats.size() != levels_.size()) throw InvalidState("detector head: expected one map per stride");
  HeadOutput out;
  for (std::size_t li = 0; li < feats.size(); ++li) {
    const auto& f = feats[li];
    const auto& s = f.shape();
    if (s.size() != 4 || s[1] != cfg_.width)
      throw InvalidState("detector head: level " + std::to_string(li) + " has " + shape_str(s) + ", expected " +
                         std::to_string(cfg_.width) + " channels");
    const Level& lv = levels_[li];
    const int b = s[0], h = s[2], w = s[3];
    ag::Var rows;
    if (cfg_.use_mamba) {
      auto x = ag::nchw_to_rows(f);
      auto u = lv.in_proj(x);
      auto g = lv.gate_proj(x);
      auto y = ops::ssm_scan(u, lv.A, lv.B, lv.C, lv.D_skip, h * w);
      rows = ag::add(x, lv.out_proj(ag::mul(y, ag::silu(g))));
    } else {
      rows = ag::nchw_to_rows(ag::add(f, ag::silu(lv.conv_block(f))));
    }
    out.batch = b;
    out.levels.push_back({lv.box(rows), lv.cls(rows), lv.obj(rows), h, w, kStrides[li]});
  }
  return out;
}

SSMParams Detector::ssm_params(int level) const {
  const Level& lv = levels_.at(static_cast<std::size_t>(level));
  if (!cfg_.use_mamba) throw InvalidState("detector: SSM block disabled");
  return {lv.A.value(), lv.B.value(), lv.C.value(), lv.D_skip.value()};
}

bool Detector::project_stable(double limit) {
  if (!cfg_.use_mamba) return false;
  bool changed = false;
  for (auto& lv : levels_) {
    const double rho = spectral_radius(lv.A.value());
    if (rho > limit) {
      lv.A.mutable_value() *= limit / rho;
      changed = true;
    }
  }
  return changed;
}

Assignment Detector::assign(const HeadOutput& out, const std::vector<std::vector<synth::Annotation>>& targets) const {
  if (static_cast<int>(targets.size()) != out.batch) throw InvalidArgument("assign: one target list per image");
  const int S = cfg_.image_size;
  Assignment as;
  struct Pos {
    int level, row, gt;
  };
  std::vector<Pos> pos;
  for (const auto& lvl : out.levels) as.obj_target.emplace_back(Shape{out.batch * lvl.h * lvl.w, 1});

  for (int b = 0; b < out.batch; ++b) {
    const auto& gts = targets[static_cast<std::size_t>(b)];
    std::vector<PixelBox> px;
    for (const auto& g : gts) px.push_back(to_pixel(g.box, S));
    std::vector<bool> covered(gts.size(), false);
    for (std::size_t li = 0; li < out.levels.size(); ++li) {
      const auto& lvl = out.levels[li];
      const auto anchors = make_anchors(lvl.h, lvl.w, lvl.stride);
      for (std::size_t a = 0; a < anchors.size(); ++a) {
        const double ax = anchors[a][0], ay = anchors[a][1];
        int best = -1;
        double best_d = 0.0;
        for (std::size_t g = 0; g < px.size(); ++g) {
          const auto& p = px[g];
          if (!(ax > p.x1 && ax < p.x2 && ay > p.y1 && ay < p.y2)) continue;
          const double d = std::hypot(ax - (p.x1 + p.x2) / 2, ay - (p.y1 + p.y2) / 2);
          if (best < 0 || d < best_d) {
            best = static_cast<int>(g);
            best_d = d;
          }
        }
        if (best < 0) continue;
        covered[static_cast<std::size_t>(best)] = true;
        pos.push_back({static_cast<int>(li), b * lvl.h * lvl.w + static_cast<int>(a), best});
      }
    }
    // Fallback: nearest free anchor at the finest level.
    const auto& fine = out.levels.front();
    const auto anchors = make_anchors(fine.h, fine.w, fine.stride);
    for (std::size_t g = 0; g < px.size(); ++g) {
      if (covered[g]) continue;
      const double cx = (px[g].x1 + px[g].x2) / 2, cy = (px[g].y1 + px[g].y2) / 2;
      int best = -1;
      double best_d = 0.0;
      for (std::size_t a = 0; a < anchors.size(); ++a) {
        const int row = b * fine.h * fine.w + static_cast<int>(a);
        const bool taken = std::any_of(pos.begin(), pos.end(), [&](const Pos& p) { return p.level == 0 && p.row == row; });
        if (taken) continue;
        const double d = std::hypot(anchors[a][0] - cx, anchors[a][1] - cy);
        if (best < 0 || d < best_d) {
          best = row;
          best_d = d;
        }
      }
      if (best >= 0) pos.push_back({0, best, static_cast<int>(g)});
    }
  }
  std::stable_sort(pos.begin(), pos.end(), [](const Pos& a, const Pos& b) {
    return a.level != b.level ? a.level < b.level : a.row < b.row;
  });
  for (const auto& p : pos) {
    const auto& lvl = out.levels[static_cast<std::size_t>(p.level)];
    const int hw = lvl.h * lvl.w, b = p.row / hw, a = p.row % hw;
    const double ax = (a % lvl.w + 0.5) * lvl.stride, ay = (a / lvl.w + 0.5) * lvl.stride;
    const auto& gt = targets[static_cast<std::size_t>(b)][static_cast<std::size_t>(p.gt)];
    const PixelBox g = to_pixel(gt.box, S);
    const double s = lvl.stride;
    as.level.push_back(p.level);
    as.row.push_back(p.row);
    as.cls.push_back(synth::class_id(gt.cls));
    as.ltrb.push_back({std::max(0.0, (ax - g.x1) / s), std::max(0.0, (ay - g.y1) / s), std::max(0.0, (g.x2 - ax) / s),
                       std::max(0.0, (g.y2 - ay) / s)});
    as.box_px.push_back({g.x1, g.y1, g.x2, g.y2});
    as.obj_target[static_cast<std::size_t>(p.level)][static_cast<std::size_t>(p.row)] = 1.0;
  }
  return as;
}

LossBreakdown Detector::loss(const HeadOutput& out, const std::vector<std::vector<synth::Annotation>>& targets,
                             const LossWeights& w) const {
  const Assignment as = assign(out, targets);
  LossBreakdown lb;
  const int P = static_cast<int>(as.row.size());
  lb.positives = P;
  const double norm = 1.0 / std::max(P, 1);

  std::vector<ag::Var> obj_terms;
  for (std::size_t li = 0; li < out.levels.size(); ++li)
    obj_terms.push_back(ag::bce_with_logits(out.levels[li].obj, as.obj_target[li]));
  auto obj = ag::scale(ag::add_n(obj_terms), norm);
  lb.obj = obj.item();
  std::vector<ag::Var> terms{ag::scale(obj, w.obj)};

  if (P > 0) {
    std::vector<ag::Var> box_parts, cls_parts;
    for (std::size_t li = 0; li < out.levels.size(); ++li) {
      std::vector<int> rows;
      for (int k = 0; k < P; ++k)
        if (as.level[static_cast<std::size_t>(k)] == static_cast<int>(li)) rows.push_back(as.row[static_cast<std::size_t>(k)]);
      if (rows.empty()) continue;
      box_parts.push_back(ag::gather_rows(out.levels[li].box, rows));
      cls_parts.push_back(ag::gather_rows(out.levels[li].cls, rows));
    }
    auto box = ag::concat_rows(box_parts);
    auto cls = ag::concat_rows(cls_parts);
    Tensor onehot({P, cfg_.num_classes});
    Tensor ltrb({P, 4});
    for (int k = 0; k < P; ++k) {
      onehot.at(k, as.cls[static_cast<std::size_t>(k)]) = 1.0;
      for (int j = 0; j < 4; ++j) ltrb.at(k, j) = as.ltrb[static_cast<std::size_t>(k)][static_cast<std::size_t>(j)];
    }
    auto cls_loss = ag::scale(ag::bce_with_logits(cls, onehot), norm);
    auto dfl = ag::scale(ops::dfl_loss(box, ltrb, cfg_.bins), norm);
    Tensor clamped = ltrb;
    for (double& v : clamped.values()) v = std::min(v, cfg_.bins - 0.01);
    auto iou = ag::scale(ops::ltrb_iou_loss(ops::expected_distance(box, cfg_.bins), clamped), norm);
    lb.cls = cls_loss.item();
    lb.dfl = dfl.item();
    lb.iou = iou.item();
    terms.push_back(ag::scale(cls_loss, w.cls));
    terms.push_back(ag::scale(dfl, w.dfl));
    terms.push_back(ag::scale(iou, w.iou));
  }
  lb.total = ag::add_n(terms);
  return lb;
}

std::vector<std::vector<Detection>> Detector::decode(const HeadOutput& out, double conf_thresh, double iou_nms,
                                                     int max_det) const {
  const int S = cfg_.image_size, C = cfg_.num_classes;
  std::vector<std::vector<Detection>> result(static_cast<std::size_t>(out.batch));
  std::vector<std::vector<Detection>> cand(static_cast<std::size_t>(out.batch));
  for (const auto& lvl : out.levels) {
    const auto anchors = make_anchors(lvl.h, lvl.w, lvl.stride);
    const int hw = lvl.h * lvl.w;
    const Tensor cls_p = classify(lvl.cls.value());
    const Tensor obj_p = classify(lvl.obj.value());
    for (int b = 0; b < out.batch; ++b) {
      Tensor box_rows({hw, 4 * (cfg_.bins + 1)});
      std::copy_n(lvl.box.value().data() + static_cast<std::size_t>(b) * hw * box_rows.dim(1), box_rows.size(),
                  box_rows.data());
      std::vector<PixelBox> boxes;  // decoded lazily
      for (int a = 0; a < hw; ++a) {
        const int r = b * hw + a;
        for (int c = 0; c < C; ++c) {
          const double score = cls_p.at(r, c) * obj_p[static_cast<std::size_t>(r)];
          if (!(score > conf_thresh)) continue;
          if (boxes.empty()) boxes = dfl_decode(box_rows, anchors, lvl.stride, cfg_.bins, S);
          const PixelBox& p = boxes[static_cast<std::size_t>(a)];
          Detection d;
          d.box = synth::BBox::from_corners(p.x1, p.y1, p.x2, p.y2, S, S);
          d.cls = synth::class_from_id(c);
          d.score = score;
          cand[static_cast<std::size_t>(b)].push_back(d);
        }
      }
    }
  }
  for (int b = 0; b < out.batch; ++b) {
    auto& c = cand[static_cast<std::size_t>(b)];
    std::stable_sort(c.begin(), c.end(), [](const Detection& x, const Detection& y) { return x.score > y.score; });
    if (c.size() > 1000) c.resize(1000);
    auto kept = nms(std::move(c), iou_nms);
    if (static_cast<int>(kept.size()) > max_det) kept.resize(static_cast<std::size_t>(max_det));
    for (std::size_t i = 0; i < kept.size(); ++i) kept[i].id = static_cast<int>(i);
    result[static_cast<std::size_t>(b)] = std::move(kept);
  }
  return result;
}

std::vector<std::vector<Detection>> Detector::detect(const std::vector<const Image*>& images, double conf_thresh,
                                                     double iou_nms, int max_det) const {
  ag::NoGradGuard guard;
  const auto out = forward(ag::constant(images_to_tensor(images)));
  return decode(out, conf_thresh, iou_nms, max_det);
}

std::vector<Detection> Detector::detect(const Image& image, double conf_thresh, double iou_nms, int max_det) const {
  return detect(std::vector<const Image*>{&image}, conf_thresh, iou_nms, max_det).front();
}

void Detector::save(const std::filesystem::path& path, const std::map<std::string, std::string>& meta) const {
  nn::Checkpoint ck;
  ck.meta = meta;
  ck.meta["kind"] = "detector";
  ck.meta["image_size"] = std::to_string(cfg_.image_size);
  ck.meta["num_classes"] = std::to_string(cfg_.num_classes);
  ck.meta["bins"] = std::to_string(cfg_.bins);
  ck.meta["width"] = std::to_string(cfg_.width);
  ck.meta["state_dim"] = std::to_string(cfg_.state_dim);
  ck.meta["use_mamba"] = cfg_.use_mamba ? "1" : "0";
  ck.add_store("det.", params_);
  ck.save(path.string());
}

Detector Detector::load(const std::filesystem::path& path) {
  const auto ck = nn::Checkpoint::load(path.string());
  if (ck.meta.count("kind") == 0 || ck.get("kind") != "detector")
    throw InvalidState(path.string() + ": not a detector checkpoint");
  DetectorConfig cfg;
  try {
    cfg.image_size = std::stoi(ck.get("image_size"));
    cfg.num_classes = std::stoi(ck.get("num_classes"));
    cfg.bins = std::stoi(ck.get("bins"));
    cfg.width = std::stoi(ck.get("width"));
    cfg.state_dim = std::stoi(ck.get("state_dim"));
    cfg.use_mamba = ck.get("use_mamba") == "1";
  } catch (const std::logic_error& e) {
    throw InvalidState(path.string() + ": bad detector metadata: " + e.what());
  }
  Detector d(cfg, 0);
  ck.load_store("det.", d.params_);
  return d;
}

}  // namespace dsym::det
