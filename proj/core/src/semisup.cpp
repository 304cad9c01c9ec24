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

#include "dsym/semisup.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dsym/errors.hpp"

namespace dsym::semi {

using ag::Var;

void validate(const TrainConfig& cfg) {
  if (cfg.epochs_sup < 0 || cfg.epochs_total < cfg.epochs_sup)
    throw InvalidArgument("train: need 0 <= epochs_sup <= epochs_total");
  if (!(cfg.alpha > 0.0 && cfg.alpha <= 1.0)) throw InvalidArgument("train: alpha must be in (0, 1]");
  if (cfg.batch_size < 1) throw InvalidArgument("train: batch_size must be >= 1");
  if (!(cfg.lr > 0.0)) throw InvalidArgument("train: lr must be > 0");
  if (cfg.ramp_epochs < 0) throw InvalidArgument("train: ramp_epochs must be >= 0");
  if (!(cfg.lambda_unsup_max >= 0.0)) throw InvalidArgument("train: lambda_unsup_max must be >= 0");
  if (cfg.optimizer != "sgd" && cfg.optimizer != "adam")
    throw InvalidArgument("train: optimizer must be sgd or adam, got '" + cfg.optimizer + "'");
}

Var supervised_loss(const Var& probs, const std::vector<int>& targets, bool* degenerate) {
  if (degenerate) *degenerate = false;
  if (targets.empty()) {
    if (degenerate) *degenerate = true;
    return ag::constant(Tensor::scalar(0.0));
  }
  if (probs.value().ndim() != 2 || probs.dim(0) != static_cast<int>(targets.size()))
    throw InvalidArgument("supervised_loss: one probability row per target required");
  Tensor onehot(probs.shape());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] < 0 || targets[i] >= probs.dim(1)) throw InvalidArgument("supervised_loss: target out of range");
    onehot.at(static_cast<int>(i), targets[i]) = 1.0;
  }
  return ag::cross_entropy(probs, onehot);
}

Var consistency_loss(const Var& student, const Var& teacher) {
  if (student.shape() != teacher.shape())
    throw InvalidArgument("consistency_loss: shapes " + shape_str(student.shape()) + " and " +
                          shape_str(teacher.shape()) + " differ");
  return ag::mse(student, teacher);
}

Var activation_maps(const det::Detector& model, const det::HeadOutput& out, const std::vector<int>& images) {
  const int bins = model.config().bins;
  std::vector<Var> parts;
  for (const auto& lvl : out.levels) {
    const int hw = lvl.h * lvl.w;
    std::vector<int> rows;
    for (int b : images) {
      if (b < 0 || b >= out.batch) throw InvalidArgument("activation_maps: image index out of range");
      for (int r = 0; r < hw; ++r) rows.push_back(b * hw + r);
    }
    const Var dist = ag::scale(det::ops::expected_distance(ag::gather_rows(lvl.box, rows), bins), 1.0 / bins);
    parts.push_back(ag::concat_cols({ag::sigmoid(ag::gather_rows(lvl.cls, rows)),
                                     ag::sigmoid(ag::gather_rows(lvl.obj, rows)), dist}));
  }
  return ag::concat_rows(parts);
}

void ema_update(const nn::ParamStore& student, nn::ParamStore& teacher, double alpha) {
  if (!(alpha > 0.0 && alpha <= 1.0)) throw InvalidArgument("ema_update: alpha must be in (0, 1]");
  if (student.size() != teacher.size()) throw InvalidArgument("ema_update: parameter stores differ");
  const auto& s = student.items();
  const auto& t = teacher.items();
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i].first != t[i].first || s[i].second.shape() != t[i].second.shape())
      throw InvalidArgument("ema_update: parameter '" + s[i].first + "' does not line up");
    Tensor& tv = t[i].second.mutable_value();
    const Tensor& sv = s[i].second.value();
    for (std::size_t k = 0; k < tv.size(); ++k) tv[k] = alpha * tv[k] + (1.0 - alpha) * sv[k];
  }
}

TeacherStudentState::TeacherStudentState(det::Detector s, double a)
    : student(std::move(s)), teacher(student.clone()), alpha(a) {}

void TeacherStudentState::ema_step() {
  ema_update(student.params(), teacher.params(), alpha);
  ++step;
}

double lambda_unsup(double epoch, const TrainConfig& cfg) {
  if (epoch < cfg.epochs_sup) throw InvalidArgument("lambda_unsup: epoch precedes the semi-supervised phase");
  if (cfg.ramp_epochs == 0) return cfg.lambda_unsup_max;
  const double r = (epoch - cfg.epochs_sup) / cfg.ramp_epochs;
  return cfg.lambda_unsup_max * std::min(1.0, r);
}

namespace {

std::vector<PseudoLabel> filter_detections(const std::vector<std::vector<eval::Detection>>& dets,
                                           const std::vector<const synth::ImageSample*>& images,
                                           const PseudoFilter& filter, long step) {
  const bool scoring = filter.encoder != nullptr && !filter.passthrough;
  std::vector<PseudoLabel> out;
  for (std::size_t i = 0; i < images.size(); ++i) {
    PseudoLabel pl;
    pl.source_image = images[i]->id;
    const auto& d = dets[i];
    if (!d.empty()) {
      auto sim = [&](const eval::Detection& x) {
        return scoring ? filter.encoder->score(images[i]->image, x.box, x.cls) : 1.0;
      };
      // Detections arrive sorted by score, so the first is the top one.
      pl.teacher_confidence = d.front().score;
      pl.clip_similarity = sim(d.front());
      pl.accepted = clip::keep_sample(pl.clip_similarity, pl.teacher_confidence, step, filter.config);
      if (pl.accepted) {
        pl.detections.push_back(d.front());
        for (std::size_t k = 1; k < d.size(); ++k)
          if (d[k].score > filter.config.tau_conf && clip::keep_sample(sim(d[k]), d[k].score, step, filter.config))
            pl.detections.push_back(d[k]);
      }
    }
    out.push_back(std::move(pl));
  }
  return out;
}

std::vector<const Image*> image_ptrs(const std::vector<const synth::ImageSample*>& xs) {
  std::vector<const Image*> v;
  for (const auto* s : xs) v.push_back(&s->image);
  return v;
}

}  // namespace

std::vector<PseudoLabel> generate_pseudo_labels(const det::Detector& teacher,
                                                const std::vector<const synth::ImageSample*>& images,
                                                const PseudoFilter& filter, long step, double det_conf) {
  if (images.empty()) return {};
  return filter_detections(teacher.detect(image_ptrs(images), det_conf), images, filter, step);
}

ValMetrics evaluate_detector(const det::Detector& model, const std::vector<synth::ImageSample>& samples,
                             double eval_conf, double pr_conf) {
  ValMetrics m;
  if (samples.empty()) return m;
  std::vector<eval::EvalImage> all, confident;
  constexpr std::size_t kChunk = 32;
  for (std::size_t begin = 0; begin < samples.size(); begin += kChunk) {
    std::vector<const Image*> ims;
    for (std::size_t j = begin; j < std::min(samples.size(), begin + kChunk); ++j) ims.push_back(&samples[j].image);
    const auto dets = model.detect(ims, eval_conf);
    for (std::size_t j = 0; j < dets.size(); ++j) {
      eval::EvalImage e{dets[j], samples[begin + j].annotations};
      eval::EvalImage c{{}, e.gts};
      for (const auto& d : dets[j])
        if (d.score >= pr_conf) c.dets.push_back(d);
      all.push_back(std::move(e));
      confident.push_back(std::move(c));
    }
  }
  const auto rep = eval::evaluate(all);
  m.map50 = rep.map50;
  m.map50_95 = rep.map50_95;
  const auto pr = eval::evaluate(confident).overall;
  m.precision = pr.precision;
  m.recall = pr.recall;
  return m;
}

long semi_total_steps(std::size_t labeled_pool, std::size_t unlabeled, const TrainConfig& cfg) {
  const auto B = static_cast<std::size_t>(cfg.batch_size);
  const long steps_per_epoch = static_cast<long>(std::max<std::size_t>(1, (std::max(unlabeled, labeled_pool) + B - 1) / B));
  return std::max(1L, (cfg.epochs_total - cfg.epochs_sup) * steps_per_epoch);
}

RunResult run_dsym(const RunInputs& in, const det::DetectorConfig& det_cfg, const TrainConfig& cfg,
                   const std::function<void(const EpochLog&)>& on_epoch) {
  validate(cfg);
  if (in.labeled == nullptr || in.labeled->empty()) throw InvalidArgument("run_dsym: labeled split is empty");
  const std::vector<synth::ImageSample> none;
  const auto& unlabeled = in.unlabeled ? *in.unlabeled : none;
  const auto& val = in.val ? *in.val : none;
  std::vector<const synth::ImageSample*> pool;
  for (const auto& s : *in.labeled) pool.push_back(&s);
  if (in.synthetic)
    for (const auto& s : *in.synthetic) pool.push_back(&s);

  RunResult result{TeacherStudentState(det::Detector(det_cfg, derive_seed(cfg.seed, {1})), cfg.alpha), {}, 0, true};
  auto& st = result.state;
  det::Detector& student = st.student;
  nn::Optimizer opt(student.params(), cfg.optimizer, cfg.lr, cfg.momentum, cfg.weight_decay);
  Rng rng(derive_seed(cfg.seed, {2}));
  const auto B = static_cast<std::size_t>(cfg.batch_size);
  std::vector<EpochLog> log;

  auto targets_of = [](const std::vector<const synth::ImageSample*>& xs) {
    std::vector<std::vector<synth::Annotation>> t;
    for (const auto* s : xs) t.push_back(s->annotations);
    return t;
  };
  auto check = [](double v, const std::string& what, int epoch) {
    if (!std::isfinite(v))
      throw TrainingDivergence(what + " is not finite at epoch " + std::to_string(epoch));
  };
  auto apply = [&](det::Detector& model, Var& loss, int epoch) {
    check(loss.item(), "training loss", epoch);
    loss.backward();
    if (cfg.grad_clip > 0) nn::clip_grad_norm(model.params(), cfg.grad_clip);
    opt.step();
    model.project_stable();
    if (!model.params().all_finite()) throw TrainingDivergence("parameters became non-finite at epoch " +
                                                               std::to_string(epoch));
  };
  auto emit = [&](EpochLog row) {
    log.push_back(row);
    if (on_epoch) on_epoch(log.back());
  };

  // Phase 1: supervised.
  for (int epoch = 1; epoch <= cfg.epochs_sup; ++epoch) {
    std::shuffle(pool.begin(), pool.end(), rng);
    double total = 0.0;
    int steps = 0;
    for (std::size_t begin = 0; begin < pool.size(); begin += B) {
      const std::vector<const synth::ImageSample*> batch(pool.begin() + static_cast<long>(begin),
                                                         pool.begin() + static_cast<long>(std::min(pool.size(), begin + B)));
      student.params().zero_grad();
      const auto out = student.forward(ag::constant(det::images_to_tensor(image_ptrs(batch))));
      Var loss = student.loss(out, targets_of(batch)).total;
      apply(student, loss, epoch);
      total += loss.item();
      ++steps;
    }
    EpochLog row;
    row.epoch = epoch;
    row.phase = "sup";
    row.model = "student";
    row.val = evaluate_detector(student, val, cfg.eval_conf, cfg.pr_conf);
    row.loss = total / steps;
    emit(row);
  }

  // The teacher starts from the end-of-phase-1 student.
  st.teacher.params().copy_from(student.params());
  const int semi_epochs = cfg.epochs_total - cfg.epochs_sup;
  if (semi_epochs > 0) {
    const std::size_t n_unl = unlabeled.size();
    const long steps_per_epoch =
        static_cast<long>(std::max<std::size_t>(1, (std::max(n_unl, pool.size()) + B - 1) / B));
    PseudoFilter filter = in.filter;
    filter.config.T_total = semi_total_steps(pool.size(), n_unl, cfg);
    filter.config.tau_conf = cfg.tau_conf;
    clip::validate(filter.config);

    std::vector<const synth::ImageSample*> unl;
    for (const auto& s : unlabeled) unl.push_back(&s);
    std::size_t lab_cursor = pool.size();
    std::size_t unl_cursor = unl.size();
    auto next_batch = [&](std::vector<const synth::ImageSample*>& src, std::size_t& cursor) {
      std::vector<const synth::ImageSample*> batch;
      while (batch.size() < std::min(B, src.size())) {
        if (cursor >= src.size()) {
          std::shuffle(src.begin(), src.end(), rng);
          cursor = 0;
        }
        batch.push_back(src[cursor++]);
      }
      return batch;
    };

    long global = 0;
    for (int epoch = cfg.epochs_sup + 1; epoch <= cfg.epochs_total; ++epoch) {
      double total = 0.0, lam = 0.0;
      long accepted = 0, scored = 0;
      for (long k = 0; k < steps_per_epoch; ++k, ++global) {
        lam = lambda_unsup(cfg.epochs_sup + static_cast<double>(global + 1) / steps_per_epoch, cfg);
        st.student.params().zero_grad();
        const auto lab = next_batch(pool, lab_cursor);
        const auto out = st.student.forward(ag::constant(det::images_to_tensor(image_ptrs(lab))));
        Var loss = st.student.loss(out, targets_of(lab)).total;

        if (cfg.use_semisup && !unl.empty() && lam > 0.0) {
          const auto ub = next_batch(unl, unl_cursor);
          const Tensor ux = det::images_to_tensor(image_ptrs(ub));
          det::HeadOutput tout;
          std::vector<PseudoLabel> pls;
          {
            ag::NoGradGuard guard;
            tout = st.teacher.forward(ag::constant(ux));
            pls = filter_detections(st.teacher.decode(tout, 0.05, 0.5, 100), ub, filter, global);
          }
          std::vector<int> keep;
          std::vector<std::vector<synth::Annotation>> pseudo;
          for (std::size_t i = 0; i < pls.size(); ++i) {
            ++scored;
            if (!pls[i].accepted) continue;
            if (pls[i].detections.empty()) result.filter_audit_ok = false;
            keep.push_back(static_cast<int>(i));
            std::vector<synth::Annotation> t;
            for (const auto& d : pls[i].detections) t.push_back({d.cls, d.box});
            pseudo.push_back(std::move(t));
          }
          accepted += static_cast<long>(keep.size());
          if (!keep.empty()) {
            std::vector<const Image*> kept_imgs;
            for (int i : keep) kept_imgs.push_back(&ub[static_cast<std::size_t>(i)]->image);
            const auto sout = st.student.forward(ag::constant(det::images_to_tensor(kept_imgs)));
            std::vector<int> all(keep.size());
            std::iota(all.begin(), all.end(), 0);
            Var tmaps = activation_maps(st.teacher, tout, keep);
            const Var cons = consistency_loss(activation_maps(st.student, sout, all), ag::constant(tmaps.value()));
            const Var pl = st.student.loss(sout, pseudo).total;
            loss = ag::add(loss, ag::scale(ag::add(pl, cons), lam));
          }
        }
        apply(st.student, loss, epoch);
        st.ema_step();
        total += loss.item();
      }
      result.accepted_total += accepted;
      for (const char* who : {"student", "teacher"}) {
        EpochLog row;
        row.epoch = epoch;
        row.phase = "semi";
        row.model = who;
        row.val = evaluate_detector(std::string(who) == "student" ? st.student : st.teacher, val, cfg.eval_conf,
                                    cfg.pr_conf);
        row.loss = total / steps_per_epoch;
        row.lambda = lam;
        row.accepted_pseudo = accepted;
        row.scored_pseudo = scored;
        emit(row);
      }
    }
  }
  result.log = std::move(log);
  return result;
}

}  // namespace dsym::semi
