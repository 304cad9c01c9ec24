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

// Acceptance harness: runs the nine release criteria and prints one
// PASS/FAIL line each. Exits non-zero if any criterion fails.
//
//   acceptance --cli PATH --configs DIR --work DIR [--only 1,7,...]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "diffusion_oracle.hpp"
#include "dsym/clipfilter.hpp"
#include "dsym/detector.hpp"
#include "dsym/diffusion.hpp"
#include "dsym/eval.hpp"
#include "dsym/experiment.hpp"
#include "dsym/semisup.hpp"
#include "eval_oracle.hpp"
#include "gradcheck.hpp"
#include "ssm_oracle.hpp"

namespace fs = std::filesystem;
using namespace dsym;
using dsym::testing::check_gradients;

namespace {

// Pinned tolerances and budgets.
constexpr double kApTol = 1e-12;
constexpr double kApBudgetSeconds = 10.0;
constexpr double kTableMap = 78.45;
constexpr double kTableTol = 0.1;
constexpr double kMomentSigmas = 3.0;
constexpr int kMomentDraws = 10000;
constexpr double kDdimTol = 1e-3;
constexpr double kScanTol = 1e-6;
constexpr double kGradTol = 1e-4;
constexpr double kEmaTol = 1e-10;
constexpr double kDecayTol = 1e-12;
constexpr double kTrendMargin = 0.02;
constexpr double kTrendBudgetSeconds = 7200.0;
constexpr double kRetrievalGate = 0.7;

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Options {
  std::string cli;
  fs::path configs;
  fs::path work = "acceptance_work";
  std::set<int> only;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

Tensor randn(Shape shape, Rng& rng, double sd = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = normal(rng, 0.0, sd);
  return t;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------- 1

Outcome metric_oracle() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(2026);
  double worst = 0.0;
  int compared = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const auto images = testing::random_instance(rng, 20);
    for (int c = 0; c < 2; ++c) {
      const auto cls = synth::class_from_id(c);
      const auto got = eval::average_precision(images, cls);
      const auto want = testing::brute_force_ap(images, cls, 0.5);
      if (got.has_value() != want.has_value()) return {false, "definedness differs on trial " + std::to_string(trial)};
      if (got) {
        worst = std::max(worst, std::abs(*got - *want));
        ++compared;
      }
    }
  }
  const double secs = seconds_since(t0);
  return {worst <= kApTol && secs < kApBudgetSeconds,
          std::to_string(compared) + " AP values, max |diff| " + fmt("%.3g", worst) + ", " + fmt("%.2f", secs) + " s"};
}

// ---------------------------------------------------------------- 2

Outcome table_spot_check() {
  const std::array<std::optional<double>, synth::kNumClasses> per_class{49.3, 80.9, 97.8, 81.4, 75.1, 86.2};
  const auto r = eval::mean_ap(per_class);
  return {std::abs(r.map - kTableMap) <= kTableTol && r.undefined.empty(), "mean of six per-class APs " +
                                                                               fmt("%.4f", r.map)};
}

// ---------------------------------------------------------------- 3

Outcome diffusion_marginals() {
  const auto s = diff::make_schedule();
  const Tensor x0({4}, std::vector<double>{-1.0, -0.2, 0.4, 1.0});
  Rng rng(31);
  double worst_z = 0.0;
  for (int t : {1, 20, 80, 150, 200}) {
    const double ab = s.alpha_bar_at(t);
    const double var = 1.0 - ab;
    std::vector<double> sum(4, 0.0), sum2(4, 0.0);
    for (int n = 0; n < kMomentDraws; ++n) {
      const Tensor y = diff::forward_sample(x0, t, randn({4}, rng), s);
      for (int i = 0; i < 4; ++i) {
        sum[i] += y[i];
        sum2[i] += y[i] * y[i];
      }
    }
    for (int i = 0; i < 4; ++i) {
      const double m = sum[i] / kMomentDraws;
      const double v = (sum2[i] - kMomentDraws * m * m) / (kMomentDraws - 1);
      worst_z = std::max(worst_z, std::abs(m - std::sqrt(ab) * x0[i]) / std::sqrt(var / kMomentDraws));
      worst_z = std::max(worst_z, std::abs(v - var) / (var * std::sqrt(2.0 / (kMomentDraws - 1))));
    }
  }

  // DDIM with the exact noise predictor of a point-mass data distribution.
  std::vector<synth::ImageSample> xs;
  for (int i = 0; i < 2; ++i) xs.push_back(synth::generate_sample(synth::class_from_id(i), derive_seed(41, {static_cast<std::uint64_t>(i)})));
  const int S = xs.front().image.height;
  Tensor target({2, 1, S, S});
  std::size_t k = 0;
  for (const auto& x : xs)
    for (double v : x.image.pixels) target[k++] = 2.0 * v - 1.0;
  const testing::PointMassDenoiser oracle(target, s);
  std::vector<diff::ConditionInput> cond;
  for (const auto& x : xs) cond.push_back(diff::condition_from_sample(x));
  double ddim_err = 0.0;
  for (int steps : {s.T, 20}) {
    const auto out = diff::ddim_sample(oracle, cond, s, steps, 3);
    for (std::size_t b = 0; b < out.size(); ++b)
      for (std::size_t i = 0; i < out[b].pixels.size(); ++i)
        ddim_err = std::max(ddim_err, std::abs(out[b].pixels[i] - xs[b].image.pixels[i]));
  }
  return {worst_z < kMomentSigmas && ddim_err < kDdimTol,
          "worst moment deviation " + fmt("%.2f", worst_z) + " SE over 5 t, DDIM max error " + fmt("%.3g", ddim_err)};
}

// ---------------------------------------------------------------- 4

Outcome scan_equivalence() {
  Rng rng(44);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto inst = testing::random_ssm(rng, 8, 16, 64);
    worst = std::max(worst, max_abs_diff(det::ssm_scan(inst.x, inst.p, inst.h0),
                                         det::ssm_scan_parallel(inst.x, inst.p, inst.h0)));
  }
  return {worst < kScanTol, "100 instances, max |parallel - sequential| " + fmt("%.3g", worst)};
}

// ---------------------------------------------------------------- 5

Outcome gradient_suite() {
  std::vector<std::pair<std::string, double>> errs;

  {  // diffusion loss through a linear stub and a small denoiser
    const auto s = diff::make_schedule(50, 1e-3, 0.05);
    std::vector<synth::ImageSample> xs;
    for (int i = 0; i < 3; ++i)
      xs.push_back(synth::generate_sample(synth::class_from_id(i), derive_seed(13, {static_cast<std::uint64_t>(i)}), 32));
    Tensor x({3, 1, 32, 32});
    std::size_t k = 0;
    for (const auto& smp : xs)
      for (double v : smp.image.pixels) x[k++] = v;
    std::vector<diff::ConditionInput> cond;
    for (const auto& smp : xs) cond.push_back(diff::condition_from_sample(smp));
    Rng init(8);
    const testing::LinearStubDenoiser stub(s.T, init);
    errs.emplace_back("diffusion loss (stub)", check_gradients([&] {
                                                 Rng rng(99);
                                                 return diff::diffusion_loss(stub, x, cond, s, rng);
                                               },
                                               {stub.weights()})
                                                 .rel_error);
    diff::DenoiserConfig dc;
    dc.image_size = 32;
    dc.cond_dim = 8;
    dc.base_channels = 2;
    dc.time_dim = 8;
    diff::Denoiser net(dc, 12);
    Rng pert(5);
    for (const auto& [name, p] : net.params().items())
      if (name.find(".f_") != std::string::npos)
        for (double& v : p.mutable_value().values()) v = normal(pert, 0.0, 0.05);
    std::vector<ag::Var> leaves;
    for (const auto& [_, p] : net.params().items()) leaves.push_back(p);
    errs.emplace_back("diffusion loss (denoiser)", check_gradients([&] {
                                                     Rng rng(99);
                                                     return diff::diffusion_loss(net, x, cond, s, rng);
                                                   },
                                                   leaves, 1e-5, 3)
                                                     .rel_error);
  }

  {  // supervised and consistency losses
    Rng rng(1);
    const ag::Var logits(randn({4, 5}, rng), true);
    const std::vector<int> targets{0, 3, 4, 1};
    errs.emplace_back("supervised loss",
                      check_gradients([&] { return semi::supervised_loss(ag::softmax_rows(logits), targets); }, {logits})
                          .rel_error);
    const ag::Var a(randn({3, 4}, rng), true);
    const Tensor b = randn({3, 4}, rng);
    errs.emplace_back("consistency loss",
                      check_gradients([&] { return semi::consistency_loss(a, ag::constant(b)); }, {a}).rel_error);
  }

  {  // contrastive loss on features and through the image encoder
    Rng rng(2);
    const ag::Var img(randn({9, 4}, rng), true), txt(randn({clip::kNumPrompts, 4}, rng), true);
    const std::vector<int> labels{0, 1, 1, 2, 6, 6, 3, 5, 0};
    errs.emplace_back("contrastive loss",
                      check_gradients([&] { return clip::contrastive_loss(img, txt, labels, 0.5); }, {img, txt}).rel_error);
    clip::EncoderConfig ec;
    ec.dim = 4;
    ec.channels = 2;
    ec.crop_size = 8;
    const clip::ContrastiveEncoder enc(ec, 4);
    std::vector<Image> crops;
    for (int i = 0; i < 5; ++i) {
      Image c(8, 8);
      for (double& v : c.pixels) v = uniform(rng, 0, 1);
      crops.push_back(c);
    }
    const std::vector<int> cl{0, 2, 2, 6, 4};
    std::vector<ag::Var> leaves;
    for (const auto& [_, p] : enc.params().items()) leaves.push_back(p);
    errs.emplace_back("contrastive encoder", check_gradients([&] {
                                               return clip::contrastive_loss(enc.image_features(crops), enc.text_features(),
                                                                             cl, ec.temperature);
                                             },
                                             leaves)
                                               .rel_error);
  }

  {  // detection head forward
    det::DetectorConfig c;
    c.width = 4;
    c.state_dim = 3;
    c.bins = 2;
    c.num_classes = 2;
    det::Detector model(c, 3);
    Rng rng(9);
    const ag::Var f0(randn({1, 4, 4, 4}, rng), true), f1(randn({1, 4, 2, 2}, rng), true);
    std::vector<ag::Var> leaves{f0, f1};
    for (auto& [name, v] : model.params().items())
      if (name.rfind("head", 0) == 0) {
        for (double& x : v.mutable_value().values()) x += normal(rng, 0.0, 0.1);
        leaves.push_back(v);
      }
    auto probe = [](const ag::Var& y, std::uint64_t seed) {
      Rng r(seed);
      return ag::sum(ag::mul(y, ag::constant(randn(y.shape(), r))));
    };
    errs.emplace_back("head forward", check_gradients([&] {
                                        const auto out = model.head({f0, f1});
                                        std::vector<ag::Var> t;
                                        for (std::size_t li = 0; li < 2; ++li) {
                                          t.push_back(probe(out.levels[li].box, 10 + li));
                                          t.push_back(probe(out.levels[li].cls, 20 + li));
                                          t.push_back(probe(out.levels[li].obj, 30 + li));
                                        }
                                        return ag::add_n(t);
                                      },
                                      leaves)
                                        .rel_error);
  }

  bool ok = true;
  std::string detail;
  for (const auto& [name, e] : errs) {
    ok = ok && e < kGradTol;
    detail += (detail.empty() ? "" : ", ") + name + " " + fmt("%.2g", e);
  }
  return {ok, "relative errors: " + detail};
}

// ---------------------------------------------------------------- 6

Outcome ema_and_filter_algebra() {
  // Teacher contracts toward a frozen student by exactly alpha per step.
  Rng rng(6);
  nn::ParamStore s, t;
  s.add("a", randn({4, 5}, rng));
  s.add("b", randn({7}, rng));
  t.add("a", randn({4, 5}, rng));
  t.add("b", randn({7}, rng));
  auto dist = [](const nn::ParamStore& x, const nn::ParamStore& y) {
    const auto u = x.flatten(), v = y.flatten();
    double acc = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) acc += (u[i] - v[i]) * (u[i] - v[i]);
    return std::sqrt(acc);
  };
  const double d0 = dist(s, t);
  double ema_err = 0.0;
  for (const double alpha : {0.9, 0.99, 0.999}) {
    nn::ParamStore tc;
    tc.add("a", Tensor(t.items()[0].second.value()));
    tc.add("b", Tensor(t.items()[1].second.value()));
    for (int k = 1; k <= 100; ++k) {
      semi::ema_update(s, tc, alpha);
      ema_err = std::max(ema_err, std::abs(dist(s, tc) - std::pow(alpha, k) * d0));
    }
  }

  // Threshold decay against direct evaluation.
  double decay_err = 0.0;
  for (const double tau0 : {0.1, 0.3, 0.9})
    for (const double lam : {0.0, 0.5, 1.0, 4.0})
      for (const long T : {1L, 37L, 1000L}) {
        clip::FilterConfig fc;
        fc.tau_0 = tau0;
        fc.lambda_decay = lam;
        fc.T_total = T;
        for (long step = 0; step <= T; step += std::max(1L, T / 50))
          decay_err = std::max(decay_err, std::abs(clip::threshold_at(step, fc) -
                                                   tau0 * std::exp(-lam * static_cast<double>(step) / T)));
      }

  // Keep decisions on a 10 x 10 x 10 grid of (similarity, confidence, step).
  clip::FilterConfig fc;
  fc.tau_0 = 0.3;
  fc.lambda_decay = 1.0;
  fc.T_total = 90;
  fc.tau_conf = 0.5;
  int grid = 0, mismatches = 0;
  for (int i = 0; i < 10; ++i)
    for (int j = 0; j < 10; ++j)
      for (int k = 0; k < 10; ++k) {
        const double sim = -0.95 + 0.21 * i, conf = 0.03 + 0.107 * j;
        const long step = 10L * k;
        const double tau = 0.3 * std::exp(-static_cast<double>(step) / 90.0);
        const bool rule = sim > tau && conf > 0.5;
        mismatches += clip::keep_sample(sim, conf, step, fc) != rule;
        ++grid;
      }
  return {ema_err < kEmaTol && decay_err <= kDecayTol && mismatches == 0,
          "EMA max deviation " + fmt("%.2g", ema_err) + ", decay max error " + fmt("%.2g", decay_err) + ", " +
              std::to_string(mismatches) + " mismatches on " + std::to_string(grid) + " grid points"};
}

// ---------------------------------------------------------------- 7, 8

struct TrendRun {
  bool done = false;
  exp::AblationResult result;
  double seconds = 0.0;
  std::size_t train_images = 0;
  double labeled_fraction = 0.0;
  std::string error;
};

TrendRun run_trend(const Options& opt) {
  TrendRun out;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    const auto cfg = exp::load_config(opt.configs / "acceptance.ini");
    const auto data = synth::build_splits(cfg.dataset.counts, cfg.dataset.seed, cfg.dataset.image_size);
    out.train_images = data.labeled_train.size() + data.unlabeled_train.size();
    out.labeled_fraction = data.labeled_fraction;
    out.result = exp::run_ablation(cfg, data, [](const std::string& m) { std::cerr << "  " << m << std::endl; });
    exp::write_ablation(out.result, opt.work / "trend");
    out.done = true;
  } catch (const std::exception& e) {
    out.error = e.what();
  }
  out.seconds = seconds_since(t0);
  return out;
}

Outcome end_to_end_trend(const TrendRun& run) {
  if (!run.done) return {false, "ablation failed: " + run.error};
  const exp::ArmSummary* sup = nullptr;
  const exp::ArmSummary* full = nullptr;
  for (const auto& s : run.result.summary) {
    if (s.arm == "mamba") sup = &s;
    if (s.arm == "dsym") full = &s;
  }
  if (!sup || !full) return {false, "acceptance config must list the mamba and dsym arms"};
  std::string per_seed;
  for (const auto& r : run.result.runs)
    per_seed += " " + r.arm + "/" + std::to_string(r.seed) + "=" + (r.status == "ok" ? fmt("%.4f", r.val.map50) : r.status);
  const double delta = full->map50 - sup->map50;
  const bool dataset_ok = run.train_images == 600 && std::abs(run.labeled_fraction - 0.2) < 1e-12;
  const bool ok = dataset_ok && sup->status == "ok" && full->status == "ok" && sup->runs == 3 && full->runs == 3 &&
                  full->map50 > sup->map50 && delta >= kTrendMargin && run.seconds < kTrendBudgetSeconds;
  return {ok, "val mAP@0.5 supervised-only " + fmt("%.4f", sup->map50) + ", full " + fmt("%.4f", full->map50) +
                  ", delta " + fmt("%+.4f", delta) + " over " + std::to_string(full->runs) + " seeds, " +
                  std::to_string(run.train_images) + " train images, " + fmt("%.0f", run.seconds) + " s;" + per_seed};
}

Outcome filter_gate(const TrendRun& run, const Options& opt) {
  if (!run.done) return {false, "ablation failed: " + run.error};
  bool ok = true;
  std::string detail;
  for (const auto& r : run.result.runs) {
    if (r.arm != "dsym") continue;
    // Each seed's encoder must clear the gate and stay unflagged.
    ok = ok && r.retrieval > kRetrievalGate && !r.filter_flagged;
    detail += (detail.empty() ? "" : ", ") + std::string("seed ") + std::to_string(r.seed) + " " +
              fmt("%.3f", r.retrieval) + (r.filter_flagged ? " (flagged)" : "");
  }
  // An untrained encoder must fall back to pass-through and be flagged.
  auto cfg = exp::load_config(opt.configs / "acceptance.ini");
  cfg.clip.epochs = 0;
  const auto data = synth::build_splits(cfg.dataset.counts, cfg.dataset.seed, cfg.dataset.image_size);
  const auto untrained = exp::build_filter(cfg, data.labeled_train, data.test, 0);
  const bool fallback = untrained.retrieval <= kRetrievalGate && !untrained.trusted;
  ok = ok && fallback;
  return {ok, "7-way held-out retrieval: " + detail + "; untrained encoder " + fmt("%.3f", untrained.retrieval) +
                  (fallback ? " falls back to pass-through" : " NOT flagged")};
}

// ---------------------------------------------------------------- 9

Outcome cli_determinism(const Options& opt) {
  if (opt.cli.empty()) return {false, "no --cli given"};
  const fs::path a = opt.work / "determinism_a", b = opt.work / "determinism_b";
  fs::remove_all(a);
  fs::remove_all(b);
  auto run = [&](const fs::path& out) {
    const std::string cmd = "\"" + opt.cli + "\" --config \"" + (opt.configs / "smoke.ini").string() +
                            "\" --seed 0 ablation --out \"" + out.string() + "\" > \"" + out.string() +
                            ".log\" 2>&1";
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
  };
  const int ra = run(a), rb = run(b);
  if (ra != 0 || rb != 0)
    return {false, "ablation exit codes " + std::to_string(ra) + ", " + std::to_string(rb)};
  auto slurp = [](const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
  };
  const std::string ma = slurp(a / "metrics.csv"), mb = slurp(b / "metrics.csv");
  const auto rows = std::count(ma.begin(), ma.end(), '\n');
  return {!ma.empty() && rows > 1 && ma == mb,
          "two CLI ablation runs, metrics.csv " + std::to_string(ma.size()) + " bytes / " + std::to_string(rows) +
              " lines, " + (ma == mb ? "byte-identical" : "DIFFERENT")};
}

}  // namespace

int main(int argc, char** argv) {
  Options opt;
  for (int i = 1; i + 1 < argc; i += 2) {
    const std::string k = argv[i], v = argv[i + 1];
    if (k == "--cli") opt.cli = v;
    else if (k == "--configs") opt.configs = v;
    else if (k == "--work") opt.work = v;
    else if (k == "--only") {
      std::stringstream ss(v);
      std::string item;
      while (std::getline(ss, item, ',')) opt.only.insert(std::stoi(item));
    } else {
      std::cerr << "unknown option " << k << "\n";
      return 2;
    }
  }
  if (opt.configs.empty()) {
    std::cerr << "usage: acceptance --cli PATH --configs DIR [--work DIR] [--only 1,2,...]\n";
    return 2;
  }
  fs::create_directories(opt.work);
  auto wanted = [&](int n) { return opt.only.empty() || opt.only.count(n) > 0; };

  const std::vector<std::pair<int, std::string>> names = {
      {1, "metric oracle equivalence"},  {2, "per-class table spot check"}, {3, "diffusion marginals and DDIM"},
      {4, "SSM scan equivalence"},       {5, "gradient suite"},             {6, "EMA and filter algebra"},
      {7, "end-to-end trend"},           {8, "filter usefulness gate"},     {9, "ablation determinism"}};

  TrendRun trend;
  if (wanted(7) || wanted(8)) trend = run_trend(opt);

  int failed = 0;
  for (const auto& [n, name] : names) {
    if (!wanted(n)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      switch (n) {
        case 1: o = metric_oracle(); break;
        case 2: o = table_spot_check(); break;
        case 3: o = diffusion_marginals(); break;
        case 4: o = scan_equivalence(); break;
        case 5: o = gradient_suite(); break;
        case 6: o = ema_and_filter_algebra(); break;
        case 7: o = end_to_end_trend(trend); break;
        case 8: o = filter_gate(trend, opt); break;
        case 9: o = cli_determinism(opt); break;
      }
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << n << " (" << name << "): " << o.detail << " ["
              << fmt("%.1f", seconds_since(t0)) << " s]" << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
