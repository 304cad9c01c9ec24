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

#include "dsym/diffusion.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numbers>
#include <cstdio>
#include <limits>

#include "dsym/errors.hpp"

namespace dsym::diff {

using ag::Var;
namespace aops = dsym::ag;

namespace {

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

void check_step(int t, const NoiseSchedule& s, int lo, const char* what) {
  if (t < lo || t > s.T)
    throw InvalidArgument(std::string(what) + ": step " + std::to_string(t) + " outside [" + std::to_string(lo) +
                          ", " + std::to_string(s.T) + "]");
}

Tensor zeros_like_shape(const Tensor& t) { return Tensor(t.shape()); }

std::vector<std::uint8_t> union_mask(const synth::ImageSample& s) {
  const std::size_t n = static_cast<std::size_t>(s.image.height) * s.image.width;
  std::vector<std::uint8_t> m(n, 0);
  if (s.has_mask()) {
    for (std::size_t i = 0; i < n; ++i) m[i] = s.mask[i] > 0 ? 1 : 0;
    return m;
  }
  for (std::size_t k = 0; k < s.annotations.size(); ++k) {
    const auto a = s.annotation_mask(k);
    for (std::size_t i = 0; i < n; ++i) m[i] |= a[i];
  }
  return m;
}

synth::BBox enclosing(const std::vector<synth::BBox>& boxes, int size) {
  double x1 = size, y1 = size, x2 = 0, y2 = 0;
  for (const auto& b : boxes) {
    x1 = std::min(x1, b.x1(size));
    y1 = std::min(y1, b.y1(size));
    x2 = std::max(x2, b.x2(size));
    y2 = std::max(y2, b.y2(size));
  }
  return synth::BBox::from_corners(x1, y1, x2, y2, size, size);
}

/// Film parameters come out of one Linear as [gamma | beta].
Var block(const nn::Conv2d& conv, const nn::Linear& film_lin, const Var& x, const Var& emb) {
  const Var h = conv(x);
  const int c = h.dim(1);
  const Var gb = film_lin(emb);
  return aops::silu(aops::film(h, aops::slice_cols(gb, 0, c), aops::slice_cols(gb, c, 2 * c)));
}

nn::Linear zero_linear(nn::ParamStore& ps, const std::string& name, int in, int out, Rng& rng) {
  nn::Linear l(ps, name, in, out, rng);
  l.w.mutable_value().fill(0.0);
  l.b.mutable_value().fill(0.0);
  return l;
}

}  // namespace

// Schedule -------------------------------------------------------------------

ScheduleKind schedule_kind_from_name(const std::string& name) {
  if (name == "linear") return ScheduleKind::kLinear;
  if (name == "cosine") return ScheduleKind::kCosine;
  throw InvalidArgument("unknown noise schedule '" + name + "' (expected linear or cosine)");
}

std::string schedule_kind_name(ScheduleKind k) { return k == ScheduleKind::kLinear ? "linear" : "cosine"; }

double NoiseSchedule::alpha_bar_at(int t) const {
  if (t < 0 || t > T) throw InvalidArgument("alpha_bar_at: step " + std::to_string(t) + " outside [0, T]");
  return t == 0 ? 1.0 : alpha_bar[static_cast<std::size_t>(t - 1)];
}

NoiseSchedule make_schedule(int T, double beta_start, double beta_end, ScheduleKind kind) {
  if (T < 1) throw InvalidArgument("make_schedule: T must be >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw InvalidArgument("make_schedule: need 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.T = T;
  s.kind = kind;
  s.beta_start = beta_start;
  s.beta_end = beta_end;
  s.beta.resize(static_cast<std::size_t>(T));
  if (kind == ScheduleKind::kLinear) {
    for (int i = 0; i < T; ++i)
      s.beta[static_cast<std::size_t>(i)] = T == 1 ? beta_start : beta_start + (beta_end - beta_start) * i / (T - 1);
  } else {
    constexpr double kOffset = 0.008;
    auto f = [&](int t) {
      const double u = (static_cast<double>(t) / T + kOffset) / (1.0 + kOffset) * std::numbers::pi / 2;
      return std::cos(u) * std::cos(u);
    };
    for (int i = 1; i <= T; ++i)
      s.beta[static_cast<std::size_t>(i - 1)] = std::clamp(1.0 - f(i) / f(i - 1), beta_start, beta_end);
  }
  double prod = 1.0;
  for (double b : s.beta) {
    s.alpha.push_back(1.0 - b);
    prod *= 1.0 - b;
    s.alpha_bar.push_back(prod);
  }
  return s;
}

Tensor forward_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& s) {
  if (!x0.same_shape(eps))
    throw InvalidArgument("forward_sample: x0 " + shape_str(x0.shape()) + " vs eps " + shape_str(eps.shape()));
  check_step(t, s, 0, "forward_sample");
  const double ab = s.alpha_bar_at(t);
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  Tensor y = zeros_like_shape(x0);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a * x0[i] + b * eps[i];
  return y;
}

Tensor forward_step(const Tensor& x_prev, int t, const Tensor& eps, const NoiseSchedule& s) {
  if (!x_prev.same_shape(eps)) throw InvalidArgument("forward_step: shape mismatch");
  check_step(t, s, 1, "forward_step");
  const double beta = s.beta[static_cast<std::size_t>(t - 1)];
  const double a = std::sqrt(1.0 - beta), b = std::sqrt(beta);
  Tensor y = zeros_like_shape(x_prev);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a * x_prev[i] + b * eps[i];
  return y;
}

// Conditions -----------------------------------------------------------------

ConditionInput condition_from_sample(const synth::ImageSample& s) {
  if (s.annotations.empty()) throw InvalidArgument("condition_from_sample: sample '" + s.id + "' has no annotations");
  if (s.image.height != s.image.width) throw InvalidArgument("condition_from_sample: image must be square");
  std::vector<synth::BBox> boxes;
  for (const auto& a : s.annotations) boxes.push_back(a.box);
  return {s.annotations.front().cls, union_mask(s), enclosing(boxes, s.image.width)};
}

ConditionInput condition_from_layout(synth::DefectClass cls, const std::vector<synth::DefectShape>& layout,
                                     int size) {
  if (layout.empty()) throw InvalidArgument("condition_from_layout: empty layout");
  ConditionInput c;
  c.cls = cls;
  c.mask.assign(static_cast<std::size_t>(size) * size, 0);
  std::vector<synth::BBox> boxes;
  for (const auto& sh : layout) {
    if (sh.mask.size() != c.mask.size()) throw InvalidArgument("condition_from_layout: mask size mismatch");
    for (std::size_t i = 0; i < c.mask.size(); ++i) c.mask[i] |= sh.mask[i] ? 1 : 0;
    boxes.push_back(sh.box);
  }
  c.box = enclosing(boxes, size);
  return c;
}

// Attention ------------------------------------------------------------------

namespace ops {

Var attention_pool(const Var& q, const Var& k, const Var& v, int tokens) {
  if (q.value().ndim() != 2 || k.value().ndim() != 2 || v.value().ndim() != 2)
    throw InvalidArgument("attention_pool: inputs must be 2-D");
  const int B = q.dim(0), d = q.dim(1);
  if (tokens < 1 || k.shape() != Shape{B * tokens, d} || v.shape() != Shape{B * tokens, d})
    throw InvalidArgument("attention_pool: expected k, v of shape (B*tokens, d)");
  const double inv = 1.0 / std::sqrt(static_cast<double>(d));
  Tensor attn({B, tokens});
  Tensor y({B, d});
  const Tensor &qv = q.value(), &kv = k.value(), &vv = v.value();
  for (int b = 0; b < B; ++b) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int t = 0; t < tokens; ++t) {
      double s = 0.0;
      for (int j = 0; j < d; ++j) s += qv.at(b, j) * kv.at(b * tokens + t, j);
      attn.at(b, t) = s * inv;
      mx = std::max(mx, attn.at(b, t));
    }
    double z = 0.0;
    for (int t = 0; t < tokens; ++t) z += (attn.at(b, t) = std::exp(attn.at(b, t) - mx));
    for (int t = 0; t < tokens; ++t) {
      attn.at(b, t) /= z;
      for (int j = 0; j < d; ++j) y.at(b, j) += attn.at(b, t) * vv.at(b * tokens + t, j);
    }
  }
  return ag::make_op(std::move(y), {q, k, v}, [attn, B, d, tokens, inv](ag::Node& self) {
    const Tensor &qv = self.inputs[0]->value, &kv = self.inputs[1]->value, &vv = self.inputs[2]->value;
    Tensor* gq = ag::input_grad(self, 0);
    Tensor* gk = ag::input_grad(self, 1);
    Tensor* gv = ag::input_grad(self, 2);
    std::vector<double> ga(static_cast<std::size_t>(tokens));
    for (int b = 0; b < B; ++b) {
      double dot = 0.0;
      for (int t = 0; t < tokens; ++t) {
        const int r = b * tokens + t;
        double s = 0.0;
        for (int j = 0; j < d; ++j) {
          const double g = self.grad.at(b, j);
          s += g * vv.at(r, j);
          if (gv) gv->at(r, j) += attn.at(b, t) * g;
        }
        ga[static_cast<std::size_t>(t)] = s;
        dot += attn.at(b, t) * s;
      }
      for (int t = 0; t < tokens; ++t) {
        const int r = b * tokens + t;
        const double gs = attn.at(b, t) * (ga[static_cast<std::size_t>(t)] - dot) * inv;
        for (int j = 0; j < d; ++j) {
          if (gq) gq->at(b, j) += gs * kv.at(r, j);
          if (gk) gk->at(r, j) += gs * qv.at(b, j);
        }
      }
    }
  });
}

}  // namespace ops

// Denoiser -------------------------------------------------------------------

Denoiser::Denoiser(DenoiserConfig cfg, std::uint64_t seed) : cfg_(cfg) {
  if (cfg_.image_size < 8 || cfg_.image_size % 8 != 0)
    throw InvalidArgument("denoiser: image size must be a positive multiple of 8");
  if (cfg_.cond_dim < 2 || cfg_.base_channels < 1 || cfg_.time_dim < 2)
    throw InvalidArgument("denoiser: invalid dimensions");
  Rng rng(derive_seed(seed, {0xd1f}));
  const int d = cfg_.cond_dim, C = cfg_.base_channels, E = cfg_.time_dim;

  Tensor table({synth::kNumClasses, d});
  for (double& v : table.values()) v = normal(rng);
  cls_table_ = params_.add("cond.cls", std::move(table));
  m1_ = nn::Conv2d(params_, "cond.m1", 1, C, 3, 2, 1, rng);
  m2_ = nn::Conv2d(params_, "cond.m2", C, 2 * C, 3, 2, 1, rng);
  m3_ = nn::Conv2d(params_, "cond.m3", 2 * C, 2 * C, 3, 2, 1, rng);
  tok_proj_ = nn::Linear(params_, "cond.tok", 2 * C, d, rng);
  box1_ = nn::Linear(params_, "cond.box1", 4, d, rng);
  box2_ = nn::Linear(params_, "cond.box2", d, d, rng);
  wq_ = nn::Linear(params_, "cond.q", d, d, rng, false);
  wk_ = nn::Linear(params_, "cond.k", d, d, rng, false);
  wv_ = nn::Linear(params_, "cond.v", d, d, rng, false);
  wo_ = nn::Linear(params_, "cond.o", d, d, rng, false);

  t1_ = nn::Linear(params_, "emb.t1", E, E, rng);
  t2_ = nn::Linear(params_, "emb.t2", E, E, rng);
  cproj_ = nn::Linear(params_, "emb.c", d, E, rng);

  enc1_ = nn::Conv2d(params_, "unet.enc1", 2, C, 3, 1, 1, rng);
  down1_ = nn::Conv2d(params_, "unet.down1", C, 2 * C, 3, 2, 1, rng);
  down2_ = nn::Conv2d(params_, "unet.down2", 2 * C, 4 * C, 3, 2, 1, rng);
  mid_ = nn::Conv2d(params_, "unet.mid", 4 * C, 4 * C, 3, 1, 1, rng);
  up2_ = nn::Conv2d(params_, "unet.up2", 6 * C, 2 * C, 3, 1, 1, rng);
  up1_ = nn::Conv2d(params_, "unet.up1", 3 * C, C, 3, 1, 1, rng);
  out_ = nn::Conv2d(params_, "unet.out", C, 1, 3, 1, 1, rng);
  out_.w.mutable_value() *= 0.1;
  f_enc1_ = zero_linear(params_, "unet.f_enc1", E, 2 * C, rng);
  f_down1_ = zero_linear(params_, "unet.f_down1", E, 4 * C, rng);
  f_down2_ = zero_linear(params_, "unet.f_down2", E, 8 * C, rng);
  f_mid_ = zero_linear(params_, "unet.f_mid", E, 8 * C, rng);
  f_up2_ = zero_linear(params_, "unet.f_up2", E, 4 * C, rng);
  f_up1_ = zero_linear(params_, "unet.f_up1", E, 2 * C, rng);
}

Tensor Denoiser::mask_tensor(const std::vector<ConditionInput>& cond) const {
  const int B = static_cast<int>(cond.size()), S = cfg_.image_size;
  const std::size_t plane = static_cast<std::size_t>(S) * S;
  Tensor m({B, 1, S, S});
  for (int b = 0; b < B; ++b) {
    const auto& mk = cond[static_cast<std::size_t>(b)].mask;
    if (mk.size() != plane)
      throw InvalidArgument("denoiser: condition mask has " + std::to_string(mk.size()) + " pixels, expected " +
                            std::to_string(plane));
    for (std::size_t i = 0; i < plane; ++i) m[b * plane + i] = mk[i] ? 1.0 : 0.0;
  }
  return m;
}

Denoiser::Tokens Denoiser::spatial_tokens(const std::vector<ConditionInput>& cond) const {
  if (cond.empty()) throw InvalidArgument("denoiser: empty condition batch");
  const int B = static_cast<int>(cond.size());
  Var h = ag::constant(mask_tensor(cond));
  h = aops::silu(m1_(h));
  h = aops::silu(m2_(h));
  h = aops::silu(m3_(h));
  const int per_item = h.dim(2) * h.dim(3);
  Tensor boxes({B, 4});
  for (int b = 0; b < B; ++b) {
    const auto& bx = cond[static_cast<std::size_t>(b)].box;
    boxes.at(b, 0) = bx.cx;
    boxes.at(b, 1) = bx.cy;
    boxes.at(b, 2) = bx.w;
    boxes.at(b, 3) = bx.h;
  }
  return {tok_proj_(aops::nchw_to_rows(h)), box2_(aops::silu(box1_(ag::constant(std::move(boxes))))), per_item};
}

Denoiser::SpatialTerms Denoiser::spatial_terms(const std::vector<ConditionInput>& cond) const {
  const Tokens tk = spatial_tokens(cond);
  const int B = static_cast<int>(cond.size());
  Tensor avg({B, B * tk.per_item});
  for (int b = 0; b < B; ++b)
    for (int t = 0; t < tk.per_item; ++t) avg.at(b, b * tk.per_item + t) = 1.0 / tk.per_item;
  return {aops::matmul(ag::constant(std::move(avg)), tk.cnn_tokens), tk.box_mlp};
}

ConditionEmbedding Denoiser::encode_condition(const std::vector<ConditionInput>& cond) const {
  const Tokens tk = spatial_tokens(cond);
  const int B = static_cast<int>(cond.size()), d = cfg_.cond_dim;
  std::vector<int> ids, owner;
  Tensor pe({B, d});
  for (int b = 0; b < B; ++b) {
    const int id = synth::class_id(cond[static_cast<std::size_t>(b)].cls);
    ids.push_back(id);
    const auto enc = nn::sinusoidal_encoding(id, d);
    for (int j = 0; j < d; ++j) pe.at(b, j) = enc[static_cast<std::size_t>(j)];
    for (int t = 0; t < tk.per_item; ++t) owner.push_back(b);
  }
  const Var e_cls = aops::add(aops::gather_rows(cls_table_, ids), ag::constant(std::move(pe)));
  const Var tokens = aops::add(tk.cnn_tokens, aops::gather_rows(tk.box_mlp, owner));
  Tensor avg({B, B * tk.per_item});
  for (int b = 0; b < B; ++b)
    for (int t = 0; t < tk.per_item; ++t) avg.at(b, b * tk.per_item + t) = 1.0 / tk.per_item;
  const Var e_spa = aops::matmul(ag::constant(std::move(avg)), tokens);
  const Var att = wo_(ops::attention_pool(wq_(e_cls), wk_(tokens), wv_(tokens), tk.per_item));
  return {e_cls, e_spa, aops::add_n({att, e_cls, e_spa})};
}

Var Denoiser::predict_noise(const Var& x_t, const std::vector<int>& t, const std::vector<ConditionInput>& cond) const {
  const int S = cfg_.image_size;
  if (x_t.value().ndim() != 4 || x_t.dim(1) != 1 || x_t.dim(2) != S || x_t.dim(3) != S)
    throw InvalidArgument("denoiser: x_t must be (B, 1, " + std::to_string(S) + ", " + std::to_string(S) +
                          "), got " + shape_str(x_t.shape()));
  const int B = x_t.dim(0);
  if (static_cast<int>(t.size()) != B || static_cast<int>(cond.size()) != B)
    throw InvalidArgument("denoiser: batch of " + std::to_string(B) + " needs as many steps and conditions");
  const int E = cfg_.time_dim;
  Tensor temb({B, E});
  for (int b = 0; b < B; ++b) {
    const auto enc = nn::sinusoidal_encoding(t[static_cast<std::size_t>(b)], E);
    for (int j = 0; j < E; ++j) temb.at(b, j) = enc[static_cast<std::size_t>(j)];
  }
  const Var te = t2_(aops::silu(t1_(ag::constant(std::move(temb)))));
  const Var emb = aops::silu(aops::add(te, cproj_(encode_condition(cond).c)));

  const Var in = aops::concat_channels(x_t, ag::constant(mask_tensor(cond)));
  const Var e1 = block(enc1_, f_enc1_, in, emb);
  const Var d1 = block(down1_, f_down1_, e1, emb);
  const Var d2 = block(down2_, f_down2_, d1, emb);
  const Var m = block(mid_, f_mid_, d2, emb);
  const Var u2 = block(up2_, f_up2_, aops::concat_channels(aops::upsample2x(m), d1), emb);
  const Var u1 = block(up1_, f_up1_, aops::concat_channels(aops::upsample2x(u2), e1), emb);
  return out_(u1);
}

void Denoiser::save(const std::filesystem::path& path, const NoiseSchedule& sched,
                    const std::map<std::string, std::string>& meta) const {
  nn::Checkpoint ck;
  ck.meta = meta;
  ck.meta["kind"] = "diffusion";
  ck.meta["image_size"] = std::to_string(cfg_.image_size);
  ck.meta["cond_dim"] = std::to_string(cfg_.cond_dim);
  ck.meta["base_channels"] = std::to_string(cfg_.base_channels);
  ck.meta["time_dim"] = std::to_string(cfg_.time_dim);
  ck.meta["T"] = std::to_string(sched.T);
  ck.meta["beta_start"] = format_double(sched.beta_start);
  ck.meta["beta_end"] = format_double(sched.beta_end);
  ck.meta["schedule"] = schedule_kind_name(sched.kind);
  ck.add_store("diff.", params_);
  ck.save(path.string());
}

std::pair<Denoiser, NoiseSchedule> Denoiser::load(const std::filesystem::path& path) {
  const auto ck = nn::Checkpoint::load(path.string());
  if (ck.meta.count("kind") == 0 || ck.get("kind") != "diffusion")
    throw InvalidState(path.string() + ": not a diffusion checkpoint");
  DenoiserConfig cfg;
  NoiseSchedule sched;
  try {
    cfg.image_size = std::stoi(ck.get("image_size"));
    cfg.cond_dim = std::stoi(ck.get("cond_dim"));
    cfg.base_channels = std::stoi(ck.get("base_channels"));
    cfg.time_dim = std::stoi(ck.get("time_dim"));
    sched = make_schedule(std::stoi(ck.get("T")), std::stod(ck.get("beta_start")), std::stod(ck.get("beta_end")),
                          schedule_kind_from_name(ck.get("schedule")));
  } catch (const std::logic_error& e) {
    throw InvalidState(path.string() + ": bad diffusion metadata: " + e.what());
  }
  Denoiser net(cfg, 0);
  ck.load_store("diff.", net.params_);
  return {std::move(net), std::move(sched)};
}

ConditionEmbedding encode_condition(const Denoiser& net, synth::DefectClass cls, const std::vector<std::uint8_t>& mask,
                                    const synth::BBox& box) {
  return net.encode_condition({ConditionInput{cls, mask, box}});
}

// Training and sampling ------------------------------------------------------

Var diffusion_loss(const NoisePredictor& net, const Tensor& x0, const std::vector<ConditionInput>& cond,
                   const NoiseSchedule& sched, Rng& rng) {
  if (x0.ndim() != 4 || x0.dim(1) != 1) throw InvalidArgument("diffusion_loss: x0 must be (B, 1, H, W)");
  const int B = x0.dim(0);
  if (static_cast<int>(cond.size()) != B) throw InvalidArgument("diffusion_loss: one condition per image required");
  const std::size_t plane = x0.size() / static_cast<std::size_t>(B);
  Tensor eps(x0.shape()), xt(x0.shape());
  std::vector<int> steps;
  for (int b = 0; b < B; ++b) {
    const int t = uniform_int(rng, 1, sched.T);
    steps.push_back(t);
    const double ab = sched.alpha_bar_at(t);
    const double a = std::sqrt(ab), s = std::sqrt(1.0 - ab);
    for (std::size_t i = b * plane; i < (b + 1) * plane; ++i) {
      eps[i] = normal(rng);
      xt[i] = a * (2.0 * x0[i] - 1.0) + s * eps[i];
    }
  }
  const Var pred = net.predict_noise(ag::constant(std::move(xt)), steps, cond);
  Var loss = aops::mse(pred, ag::constant(std::move(eps)));
  if (!std::isfinite(loss.item())) throw TrainingDivergence("diffusion loss is not finite");
  return loss;
}

std::vector<Image> ddim_sample(const NoisePredictor& net, const std::vector<ConditionInput>& cond,
                               const NoiseSchedule& sched, int steps, std::uint64_t seed) {
  if (steps < 1 || steps > sched.T)
    throw InvalidArgument("ddim_sample: steps must be in [1, " + std::to_string(sched.T) + "], got " +
                          std::to_string(steps));
  if (cond.empty()) return {};
  const int B = static_cast<int>(cond.size());
  const auto side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(cond.front().mask.size()))));
  const int S = static_cast<int>(side);
  if (side * side != cond.front().mask.size()) throw InvalidArgument("ddim_sample: condition mask is not square");
  const std::size_t plane = side * side;
  ag::NoGradGuard no_grad;
  Tensor x({B, 1, S, S});
  for (int b = 0; b < B; ++b) {
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(b)}));
    for (std::size_t i = 0; i < plane; ++i) x[b * plane + i] = normal(rng);
  }
  // tau_i = floor(i T / steps) is strictly increasing since steps <= T.
  auto tau = [&](int i) { return static_cast<int>(static_cast<long long>(i) * sched.T / steps); };
  for (int i = steps; i >= 1; --i) {
    const int t = tau(i), tp = tau(i - 1);
    const double ab = sched.alpha_bar_at(t), abp = sched.alpha_bar_at(tp);
    const Tensor eps = net.predict_noise(ag::constant(x), std::vector<int>(static_cast<std::size_t>(B), t), cond)
                           .value();
    const double sa = std::sqrt(ab), sn = std::sqrt(1.0 - ab);
    const double spa = std::sqrt(abp), spn = std::sqrt(1.0 - abp);
    for (std::size_t k = 0; k < x.size(); ++k) {
      const double x0 = std::clamp((x[k] - sn * eps[k]) / sa, -1.0, 1.0);
      x[k] = spa * x0 + spn * eps[k];
    }
  }
  std::vector<Image> out;
  for (int b = 0; b < B; ++b) {
    Image img(S, S);
    for (std::size_t i = 0; i < plane; ++i) img.pixels[i] = std::clamp((x[b * plane + i] + 1.0) / 2.0, 0.0, 1.0);
    out.push_back(std::move(img));
  }
  return out;
}

std::vector<synth::ImageSample> synthesize_defect_set(const NoisePredictor& net, const NoiseSchedule& sched,
                                                      int n_per_class, std::uint64_t seed, int steps,
                                                      int image_size) {
  if (n_per_class < 0) throw InvalidArgument("synthesize_defect_set: n_per_class must be >= 0");
  constexpr int kChunk = 16;
  std::vector<synth::ImageSample> out;
  std::vector<std::vector<synth::DefectShape>> layouts;
  std::vector<ConditionInput> conds;
  for (synth::DefectClass cls : synth::all_classes()) {
    for (int i = 0; i < n_per_class; ++i) {
      const auto cid = static_cast<std::uint64_t>(synth::class_id(cls));
      auto layout = synth::sample_layout(cls, derive_seed(seed, {0x1a, cid, static_cast<std::uint64_t>(i)}),
                                         image_size);
      conds.push_back(condition_from_layout(cls, layout, image_size));
      layouts.push_back(std::move(layout));
      synth::ImageSample s;
      char idx[16];
      std::snprintf(idx, sizeof(idx), "%04d", i);
      s.id = "synth_" + std::string(synth::class_name(cls)) + "_" + idx;
      out.push_back(std::move(s));
    }
  }
  for (std::size_t begin = 0; begin < conds.size(); begin += kChunk) {
    const std::size_t end = std::min(conds.size(), begin + kChunk);
    const std::vector<ConditionInput> chunk(conds.begin() + static_cast<long>(begin),
                                            conds.begin() + static_cast<long>(end));
    auto imgs = ddim_sample(net, chunk, sched, steps, derive_seed(seed, {0x5a, begin / kChunk}));
    for (std::size_t j = 0; j < imgs.size(); ++j) {
      auto& s = out[begin + j];
      const auto& layout = layouts[begin + j];
      s.image = std::move(imgs[j]);
      s.mask.assign(static_cast<std::size_t>(image_size) * image_size, 0);
      for (std::size_t k = 0; k < layout.size(); ++k) {
        s.annotations.push_back({conds[begin + j].cls, layout[k].box});
        for (std::size_t p = 0; p < s.mask.size(); ++p)
          if (layout[k].mask[p]) s.mask[p] = static_cast<std::uint8_t>(k + 1);
      }
    }
  }
  return out;
}

std::vector<double> train_diffusion(Denoiser& net, const NoiseSchedule& sched,
                                    const std::vector<synth::ImageSample>& data, const DiffusionTrainConfig& cfg,
                                    const std::function<void(int, double)>& on_epoch) {
  if (cfg.epochs < 0 || cfg.batch_size < 1 || !(cfg.lr > 0))
    throw InvalidArgument("train_diffusion: invalid epochs, batch size or learning rate");
  std::vector<std::size_t> usable;
  std::vector<ConditionInput> conds(data.size());
  const int S = net.config().image_size;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data[i].annotations.empty()) continue;
    if (data[i].image.height != S || data[i].image.width != S)
      throw InvalidArgument("train_diffusion: sample '" + data[i].id + "' is not " + std::to_string(S) + "x" +
                            std::to_string(S));
    conds[i] = condition_from_sample(data[i]);
    usable.push_back(i);
  }
  if (usable.empty()) throw InvalidArgument("train_diffusion: no annotated samples");
  nn::Adam opt(net.params(), {.lr = cfg.lr});
  Rng rng(derive_seed(cfg.seed, {0xd1ff}));
  const std::size_t plane = static_cast<std::size_t>(S) * S;
  std::vector<double> history;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(usable.begin(), usable.end(), rng);
    double total = 0.0;
    int batches = 0;
    for (std::size_t begin = 0; begin < usable.size(); begin += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(usable.size(), begin + static_cast<std::size_t>(cfg.batch_size));
      const int B = static_cast<int>(end - begin);
      Tensor x0({B, 1, S, S});
      std::vector<ConditionInput> bc;
      for (std::size_t j = begin; j < end; ++j) {
        const auto& img = data[usable[j]].image;
        std::copy(img.pixels.begin(), img.pixels.end(), x0.data() + (j - begin) * plane);
        bc.push_back(conds[usable[j]]);
      }
      net.params().zero_grad();
      Var loss = diffusion_loss(net, x0, bc, sched, rng);
      loss.backward();
      if (cfg.grad_clip > 0) nn::clip_grad_norm(net.params(), cfg.grad_clip);
      opt.step();
      if (!net.params().all_finite()) throw TrainingDivergence("diffusion parameters became non-finite");
      total += loss.item();
      ++batches;
    }
    history.push_back(total / batches);
    if (on_epoch) on_epoch(epoch, history.back());
  }
  return history;
}

FidelityReport fidelity_gate(const std::vector<synth::ImageSample>& samples) {
  FidelityReport r;
  int passed = 0;
  for (const auto& s : samples) {
    const int H = s.image.height, W = s.image.width;
    const auto defect = union_mask(s);
    std::vector<std::uint8_t> in_box(defect.size(), 0);
    for (const auto& a : s.annotations) {
      const int x0 = std::clamp(static_cast<int>(std::floor(a.box.x1(W))), 0, W);
      const int x1 = std::clamp(static_cast<int>(std::ceil(a.box.x2(W))), 0, W);
      const int y0 = std::clamp(static_cast<int>(std::floor(a.box.y1(H))), 0, H);
      const int y1 = std::clamp(static_cast<int>(std::ceil(a.box.y2(H))), 0, H);
      for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) in_box[static_cast<std::size_t>(y) * W + x] = 1;
    }
    double fg = 0, bg = 0, bg2 = 0;
    int nf = 0, nb = 0;
    for (std::size_t i = 0; i < defect.size(); ++i) {
      const double v = s.image.pixels[i];
      if (defect[i]) {
        fg += v;
        ++nf;
      } else if (!in_box[i]) {
        bg += v;
        bg2 += v * v;
        ++nb;
      }
    }
    bool ok = false;
    if (nf > 0 && nb > 1) {
      const double mb = bg / nb;
      const double sd = std::sqrt(std::max(0.0, bg2 / nb - mb * mb));
      ok = std::abs(fg / nf - mb) > 2.0 * sd;
    }
    r.pass.push_back(ok);
    passed += ok ? 1 : 0;
  }
  r.pass_rate = samples.empty() ? 0.0 : static_cast<double>(passed) / samples.size();
  return r;
}

}  // namespace dsym::diff
