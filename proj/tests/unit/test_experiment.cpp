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

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "dsym/errors.hpp"
#include "dsym/experiment.hpp"
#include "dsym/plot.hpp"
#include "json.hpp"

using namespace dsym;
using namespace dsym::exp;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::size_t count(const std::string& hay, const std::string& needle) {
  std::size_t n = 0;
  for (auto pos = hay.find(needle); pos != std::string::npos; pos = hay.find(needle, pos + 1)) ++n;
  return n;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("dsym_test_experiment_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

semi::EpochLog log_row(int epoch, const char* phase, const char* model, double map) {
  semi::EpochLog l;
  l.epoch = epoch;
  l.phase = phase;
  l.model = model;
  l.val.map50 = map;
  l.val.precision = map / 2;
  l.val.recall = map / 3;
  return l;
}

// Small enough for a few seconds per arm, large enough that every class
// has labeled boxes.
ExperimentConfig tiny_config() {
  ExperimentConfig c;
  c.dataset.counts = {1, 3, 3, 1};
  c.dataset.seed = 11;
  c.diffusion.T = 20;
  c.diffusion.epochs = 1;
  c.diffusion.per_class = 1;
  c.diffusion.sample_steps = 4;
  c.diffusion.base_channels = 4;
  c.diffusion.cond_dim = 16;
  c.clip.epochs = 1;
  c.clip.batch_size = 8;
  c.train.epochs_sup = 1;
  c.train.epochs_total = 2;
  c.train.ramp_epochs = 1;
  c.train.batch_size = 8;
  c.train.lr = 1e-2;
  c.train.alpha = 0.9;
  c.detector.width = 16;
  c.arms = {"mamba", "dsym"};
  c.seeds = {4};
  return c;
}

}  // namespace

TEST_CASE("config round trips through INI text") {
  const ExperimentConfig d;
  CHECK(to_ini(parse_config(to_ini(d))) == to_ini(d));
  CHECK(parse_config("") .train.lr == d.train.lr);

  ExperimentConfig c;
  c.train.lr = 0.0123456789012345;
  c.diffusion.beta_end = 0.1 + 0.2;  // not exactly representable in short decimal
  c.dataset.seed = 18446744073709551615ULL;
  c.arms = {"dsym", "baseline"};
  c.seeds = {7, 3};
  c.flags.use_clip_filter = false;
  c.diffusion.schedule = "cosine";
  const auto back = parse_config(to_ini(c));
  CHECK(back.train.lr == c.train.lr);
  CHECK(back.diffusion.beta_end == c.diffusion.beta_end);
  CHECK(back.dataset.seed == c.dataset.seed);
  CHECK(back.arms == c.arms);
  CHECK(back.seeds == c.seeds);
  CHECK(back.flags == c.flags);
  CHECK(back.diffusion.schedule == "cosine");
  CHECK(to_ini(back) == to_ini(c));
  CHECK(config_hash(back) == config_hash(c));
  CHECK(config_hash(c) != config_hash(d));

  // Every key appears exactly once in canonical output.
  const auto text = to_ini(d);
  for (const auto& k : config_keys()) {
    const auto key = k.substr(k.find('.') + 1);
    CHECK_MESSAGE(text.find("\n" + key + " = ") != std::string::npos, k);
  }
}

TEST_CASE("config overrides only the keys present") {
  const auto c = parse_config("[train]\nlr = 0.05\n\n[ablation]\narms = mamba, dsym\nseeds = 5\n");
  CHECK(c.train.lr == 0.05);
  CHECK(c.arms == std::vector<std::string>{"mamba", "dsym"});
  CHECK(c.seeds == std::vector<std::uint64_t>{5});
  CHECK(c.train.epochs_sup == ExperimentConfig{}.train.epochs_sup);
}

TEST_CASE("config rejects unknown keys and malformed values") {
  CHECK_THROWS_AS(parse_config("[train]\nlearning_rate = 0.1\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[nonsense]\nx = 1\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("lr = 0.1\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[train]\nlr = fast\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[train]\nepochs_sup = 3.5\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[dataset]\nseed = -1\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[ablation]\nuse_semisup = maybe\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[ablation]\narms = dsym, nope\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[train\n"), ConfigError);
  try {
    parse_config("[train]\nlearning_rate = 0.1\n");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("train.learning_rate") != std::string::npos);
  }
}

TEST_CASE("config validation names the offending key") {
  auto expect = [](const std::string& text, const std::string& key) {
    try {
      parse_config(text);
      FAIL("accepted: " << text);
    } catch (const ConfigError& e) {
      CHECK_MESSAGE(std::string(e.what()).find(key) != std::string::npos, e.what());
    }
  };
  expect("[filter]\ntau_0 = 1.5\n", "filter.tau_0");
  expect("[filter]\nlambda_decay = -1\n", "filter.lambda_decay");
  expect("[dataset]\nimage_size = 50\n", "dataset.image_size");
  expect("[diffusion]\nsample_steps = 500\n", "diffusion.sample_steps");
  expect("[diffusion]\nschedule = quadratic\n", "diffusion.schedule");
  expect("[ablation]\nlabeled_fraction = 0\n", "ablation.labeled_fraction");
  expect("[ablation]\narms = dsym, dsym\n", "ablation.arms");
  expect("[ablation]\nseeds = \n", "ablation.seeds");
  expect("[train]\nepochs_sup = 10\nepochs_total = 5\n", "[train]");
}

TEST_CASE("arm table") {
  CHECK(find_arm("baseline").flags == ArmFlags{false, false, false, false, 0.2});
  CHECK(find_arm("mamba").flags == ArmFlags{true, false, false, false, 0.2});
  CHECK(find_arm("dsym").flags == ArmFlags{true, true, true, true, 0.2});
  CHECK(find_arm("dsym_40").flags.labeled_fraction == 0.4);
  CHECK_THROWS_AS(find_arm("turbo"), ConfigError);
  std::set<std::string> names;
  for (const auto& a : builtin_arms()) {
    CHECK(names.insert(a.name).second);
    CHECK(!a.label.empty());
  }
}

TEST_CASE("acceptance curve matches direct counting and never decreases") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<ScoredSample> pool(300);
  for (auto& s : pool) {
    s.similarity = u(rng) * 0.5;
    s.confidence = u(rng);
  }
  clip::FilterConfig cfg;
  cfg.tau_0 = 0.4;
  cfg.lambda_decay = 2.0;
  cfg.T_total = 1000;
  cfg.tau_conf = 0.3;
  const auto curve = acceptance_curve(pool, cfg, 11);
  REQUIRE(curve.size() == 11);
  CHECK(curve.front().step == 0);
  CHECK(curve.back().step == 1000);
  for (std::size_t i = 0; i < curve.size(); ++i) {
    const auto& p = curve[i];
    const double tau = 0.4 * std::exp(-2.0 * static_cast<double>(p.step) / 1000.0);
    CHECK(p.tau_t == doctest::Approx(tau).epsilon(1e-12));
    long direct = 0;
    for (const auto& s : pool) direct += s.similarity > tau && s.confidence > 0.3;
    CHECK(p.accepted == direct);
    CHECK(p.total == 300);
    CHECK(p.rate == doctest::Approx(direct / 300.0));
    if (i) CHECK(p.accepted >= curve[i - 1].accepted);
  }
  CHECK(curve.back().accepted > curve.front().accepted);
  CHECK_THROWS_AS(acceptance_curve(pool, cfg, 1), InvalidArgument);

  const auto csv = audit_csv(curve);
  CHECK(csv.rfind("step,tau_t,accepted,total,rate\n", 0) == 0);
  CHECK(count(csv, "\n") == 12);
}

TEST_CASE("metrics csv and summary") {
  ArmResult a;
  a.arm = "mamba";
  a.seed = 0;
  a.log = {log_row(1, "sup", "student", 0.1), log_row(2, "semi", "student", 0.2), log_row(2, "semi", "teacher", 0.3)};
  a.val = a.log.back().val;
  ArmResult b = a;
  b.seed = 1;
  b.val.map50 = 0.5;
  b.val.recall = 0.4;
  ArmResult c = a;
  c.seed = 2;
  c.status = "diverged";
  c.val.map50 = 0.99;

  const auto csv = metrics_csv({a, b});
  CHECK(csv == metrics_csv({a, b}));
  CHECK(csv.rfind("arm,seed,epoch,phase,model,split,map50,precision,recall,accepted_pseudo\n", 0) == 0);
  CHECK(csv.find("mamba,1,2,semi,teacher,val,0.300000,0.150000,0.100000,0\n") != std::string::npos);
  CHECK(count(csv, "\n") == 7);

  ExperimentConfig cfg;
  cfg.arms = {"mamba"};
  const auto s = summarize(cfg, {a, b, c});
  REQUIRE(s.size() == 1);
  CHECK(s[0].runs == 2);
  CHECK(s[0].status == "partial");
  CHECK(s[0].map50 == doctest::Approx(0.4));
  CHECK(s[0].map50_sd == doctest::Approx(std::sqrt(0.02)));
  CHECK(s[0].recall == doctest::Approx((0.1 + 0.4) / 2));
  const auto md = summary_markdown(s);
  CHECK(md.find("| Arm | Recall (%) | Precision (%) | mAP@0.5 (%) |") == 0);
  CHECK(md.find("40.0 ± 14.1") != std::string::npos);
  CHECK(md.find("(partial)") != std::string::npos);
}

TEST_CASE("charts: one polyline per series, bars in the given order") {
  const std::string svg = plot::line_chart({"t", "x", "y", 0.0, 1.0}, {{"a", {0, 1}, {0.1, 0.2}},
                                                                      {"b", {0, 1}, {0.3, 0.4}},
                                                                      {"c<", {0, 1, 2}, {0.5, 0.6, 0.7}}});
  CHECK(count(svg, "<polyline") == 3);
  CHECK(svg.find("c&lt;") != std::string::npos);
  CHECK_THROWS_AS(plot::line_chart({}, {{"bad", {0, 1}, {0.0}}}), InvalidArgument);

  const std::string bars = plot::bar_chart({"t", "x", "y", {}, {}}, {"first", "second", "third"},
                                           {0.5, std::nullopt, 0.25});
  const auto p1 = bars.find(">first<"), p2 = bars.find(">second<"), p3 = bars.find(">third<");
  CHECK(p1 < p2);
  CHECK(p2 < p3);
  CHECK(count(bars, "n/a") == 1);
  CHECK(count(bars, "class=\"bar-label\"") == 3);
}

TEST_CASE("report lists incomplete runs and orders bars by class id") {
  const fs::path root = scratch("report");
  const fs::path good = root / "good", empty = root / "empty", out = root / "out";
  fs::create_directories(empty);
  ArmResult a;
  a.arm = "dsym";
  a.log = {log_row(1, "sup", "student", 0.1), log_row(2, "semi", "teacher", 0.3)};
  write_text(good / "metrics.csv", metrics_csv({a}));
  eval::EvalReport rep;
  for (int c = 0; c < synth::kNumClasses; ++c) rep.classes[static_cast<std::size_t>(c)].ap50 = 0.1 * (c + 1);
  rep.classes[2].ap50.reset();
  // Reverse the class list so ordering must come from the ids.
  auto j = nlohmann::json::parse(eval_json(rep, "test"));
  std::reverse(j["classes"].begin(), j["classes"].end());
  write_text(good / "eval.json", j.dump());
  write_text(good / "acceptance_curve.csv", "step,tau_t,accepted,total,rate\n0,0.3,1,4,0.25\n10,0.1,3,4,0.75\n");

  const auto res = write_report({good, empty}, out);
  CHECK(res.complete == std::vector<std::string>{good.string()});
  CHECK(res.incomplete == std::vector<std::string>{empty.string()});
  CHECK(fs::exists(out / "index.html"));
  CHECK(slurp(out / "index.html").find("incomplete: " + empty.string()) != std::string::npos);

  const std::string map = slurp(out / "00_map50_vs_epoch.svg");
  CHECK(count(map, "<polyline") == 2);  // student and teacher
  const std::string bars = slurp(out / "00_per_class_ap.svg");
  std::size_t last = 0;
  for (auto c : synth::all_classes()) {
    const auto pos = bars.find(">" + std::string(synth::class_name(c)) + "<");
    REQUIRE(pos != std::string::npos);
    CHECK(pos > last);
    last = pos;
  }
  CHECK(count(bars, "n/a") == 1);
  CHECK(fs::exists(out / "00_filter_acceptance.svg"));
  CHECK(!fs::exists(out / "01_map50_vs_epoch.svg"));
  fs::remove_all(root);
}

TEST_CASE("eval json carries per-class metrics and null AP for absent classes") {
  eval::EvalReport rep;
  rep.map50 = 0.5;
  rep.classes[0].gt = 3;
  rep.classes[0].tp = 2;
  rep.classes[0].ap50 = 0.75;
  const auto j = nlohmann::json::parse(eval_json(rep, "test"));
  CHECK(j["split"] == "test");
  CHECK(j["map50"].get<double>() == 0.5);
  REQUIRE(j["classes"].size() == static_cast<std::size_t>(synth::kNumClasses));
  CHECK(j["classes"][0]["ap50"].get<double>() == 0.75);
  CHECK(j["classes"][0]["tp"].get<int>() == 2);
  CHECK(j["classes"][1]["ap50"].is_null());
}

TEST_CASE("tiny ablation is reproducible and shares artifacts across arms") {
  const auto cfg = tiny_config();
  const auto data = synth::build_splits(cfg.dataset.counts, cfg.dataset.seed);
  const auto r1 = run_ablation(cfg, data);
  const auto r2 = run_ablation(cfg, data);
  REQUIRE(r1.runs.size() == 2);
  CHECK(metrics_csv(r1.runs) == metrics_csv(r2.runs));
  CHECK(summary_csv(r1.summary) == summary_csv(r2.summary));
  const auto& mamba = r1.runs[0];
  const auto& full = r1.runs[1];
  CHECK(mamba.arm == "mamba");
  CHECK(mamba.retrieval == -1.0);
  CHECK(mamba.n_synthetic == 0);
  CHECK(full.n_synthetic == static_cast<std::size_t>(synth::kNumClasses));
  CHECK(full.retrieval >= 0.0);
  CHECK(full.filter_flagged == (full.retrieval <= clip::kRetrievalGate));
  CHECK(full.pr_precision.size() == 101);
  // Teacher is reported once phase 2 ran.
  CHECK(full.val.map50 == full.log.back().val.map50);
  CHECK(full.log.back().model == "teacher");

  const fs::path dir = scratch("ablation");
  write_ablation(r1, dir);
  for (const char* f : {"metrics.csv", "summary.csv", "table.md", "map_vs_epoch.svg", "pr_curve.svg"})
    CHECK_MESSAGE(fs::exists(dir / f), f);
  CHECK(slurp(dir / "metrics.csv") == metrics_csv(r1.runs));
  fs::remove_all(dir);
}
