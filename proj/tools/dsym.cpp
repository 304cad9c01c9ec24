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

// dsym: dataset generation, diffusion training and synthesis, detector
// training, evaluation, ablations, filter audits and reports.
//
// Exit codes: 0 success, 2 invalid arguments or config, 3 training
// divergence (after outputs are written), 1 any other failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "dsym/errors.hpp"
#include "dsym/experiment.hpp"
#include "dsym/image.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace dsym;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitInvalid = 2;
constexpr int kExitDiverged = 3;

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string data;
};

void note(const std::string& msg) { std::cerr << "[dsym] " << msg << std::endl; }

exp::ExperimentConfig load(const Globals& g) {
  return g.config.empty() ? exp::ExperimentConfig{} : exp::load_config(g.config);
}

/// Dataset from --data (a make-data run dir or a dataset dir), else
/// generated in memory from the [dataset] section.
synth::DatasetSplit dataset(const Globals& g, const exp::ExperimentConfig& cfg) {
  if (g.data.empty()) return synth::build_splits(cfg.dataset.counts, cfg.dataset.seed, cfg.dataset.image_size);
  fs::path dir = g.data;
  if (fs::exists(dir / "data" / "manifest.json")) dir /= "data";
  return synth::load_dataset(dir, cfg.dataset.image_size);
}

/// A run directory: resolved config, manifest and artifacts. A finished
/// run (one with a manifest) is never modified.
class RunDir {
 public:
  RunDir(const Globals& g, const std::string& command, const exp::ExperimentConfig& cfg, std::uint64_t seed)
      : command_(command), seed_(seed), hash_(exp::config_hash(cfg)), started_(exp::utc_now()) {
    dir_ = g.out.empty() ? fs::path("runs") / (command + "-" + synth::hash_hex(hash_).substr(0, 8) + "-s" +
                                               std::to_string(seed))
                         : fs::path(g.out);
    existing_ = fs::exists(dir_ / "manifest.json");
    config_ = exp::to_ini(cfg);
  }

  /// Throws InvalidArgument for a finished run, then archives the config.
  void start() {
    if (existing_)
      throw InvalidArgument("run directory " + dir_.string() + " already holds a finished run; choose another --out");
    exp::write_text(dir_ / "config.ini", config_);
  }

  const fs::path& dir() const { return dir_; }
  fs::path path(const std::string& name) {
    artifacts_.push_back(name);
    return dir_ / name;
  }
  json& metrics() { return metrics_; }
  void set(const std::string& key, json value) { extra_[key] = std::move(value); }

  /// Manifest of a previous run in this directory, if any.
  std::optional<json> previous() const {
    if (!existing_) return std::nullopt;
    std::ifstream is(dir_ / "manifest.json");
    try {
      json j;
      is >> j;
      return j;
    } catch (const json::exception&) {
      return std::nullopt;
    }
  }

  void finish(const std::string& status) {
    json m = {{"run_id", command_ + "-" + synth::hash_hex(hash_).substr(0, 8) + "-s" + std::to_string(seed_)},
              {"command", command_},
              {"config_hash", synth::hash_hex(hash_)},
              {"seed", seed_},
              {"status", status},
              {"started_at", started_},
              {"finished_at", exp::utc_now()},
              {"metrics", metrics_},
              {"artifacts", artifacts_}};
    for (const auto& [k, v] : extra_.items()) m[k] = v;
    exp::write_text(dir_ / "manifest.json", m.dump(2) + "\n");
    note("wrote " + dir_.string());
  }

 private:
  std::string command_;
  std::uint64_t seed_;
  std::uint64_t hash_;
  std::string started_;
  std::string config_;
  fs::path dir_;
  bool existing_ = false;
  json metrics_ = json::object();
  json extra_ = json::object();
  std::vector<std::string> artifacts_ = {"config.ini"};
};

json eval_metrics(const eval::EvalReport& r) {
  return {{"map50", r.map50}, {"map50_95", r.map50_95}, {"precision", r.overall.precision},
          {"recall", r.overall.recall}};
}

std::string fixed(double v, int digits = 4) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

// ---------------------------------------------------------------- commands

int cmd_make_data(const Globals& g) {
  auto cfg = load(g);
  if (g.seed) cfg.dataset.seed = *g.seed;
  exp::validate(cfg);
  const auto data = synth::build_splits(cfg.dataset.counts, cfg.dataset.seed, cfg.dataset.image_size);
  const std::string hash = synth::hash_hex(synth::dataset_hash(data));
  RunDir run(g, "make-data", cfg, cfg.dataset.seed);
  if (const auto prev = run.previous(); prev && prev->value("dataset_hash", "") == hash) {
    note("dataset " + hash + " already present in " + run.dir().string());
    return kExitOk;
  }
  run.start();
  synth::save_dataset(data, run.path("data"));
  const std::size_t train = data.labeled_train.size() + data.unlabeled_train.size();
  run.metrics() = {{"train_images", train},
                   {"labeled", data.labeled_train.size()},
                   {"unlabeled", data.unlabeled_train.size()},
                   {"val", data.val.size()},
                   {"test", data.test.size()},
                   {"labeled_fraction", data.labeled_fraction}};
  run.set("dataset_hash", hash);
  note(std::to_string(train) + " train images (" + fixed(100 * data.labeled_fraction, 1) + "% labeled), " +
       std::to_string(data.val.size()) + " val, " + std::to_string(data.test.size()) + " test; hash " + hash);
  run.finish("ok");
  return kExitOk;
}

int cmd_train_diffusion(const Globals& g) {
  auto cfg = load(g);
  const std::uint64_t seed = g.seed.value_or(cfg.train.seed);
  cfg.train.seed = seed;
  exp::validate(cfg);
  const auto data = synth::with_labeled_fraction(dataset(g, cfg), cfg.flags.labeled_fraction);
  RunDir run(g, "train-diffusion", cfg, seed);
  run.start();
  auto only_train = cfg;
  only_train.diffusion.per_class = 0;
  const auto syn = exp::build_synthesis(only_train, data.labeled_train, seed, note);
  syn.denoiser->save(run.path("denoiser.ckpt"), syn.schedule,
                     {{"config_hash", synth::hash_hex(exp::config_hash(cfg))}, {"seed", std::to_string(seed)}});
  run.metrics() = {{"labeled_images", data.labeled_train.size()}};
  run.finish("ok");
  return kExitOk;
}

int cmd_synth(const Globals& g, const std::string& ckpt, std::optional<int> per_class) {
  auto cfg = load(g);
  const std::uint64_t seed = g.seed.value_or(cfg.train.seed);
  cfg.train.seed = seed;
  if (per_class) cfg.diffusion.per_class = *per_class;
  exp::validate(cfg);
  auto [net, sched] = diff::Denoiser::load(ckpt);
  RunDir run(g, "synth", cfg, seed);
  run.start();
  const auto samples = diff::synthesize_defect_set(net, sched, cfg.diffusion.per_class, derive_seed(seed, {0xd3}),
                                                   cfg.diffusion.sample_steps, cfg.dataset.image_size);
  const auto fid = diff::fidelity_gate(samples);
  synth::save_samples(samples, run.dir(), "synthetic");
  run.path("images/synthetic");
  run.path("labels/synthetic");
  run.metrics() = {{"samples", samples.size()}, {"fidelity_pass_rate", fid.pass_rate}};
  run.set("denoiser", ckpt);
  note(std::to_string(samples.size()) + " samples, fidelity pass rate " + fixed(fid.pass_rate));
  run.finish("ok");
  return kExitOk;
}

int cmd_train(const Globals& g) {
  auto cfg = load(g);
  const std::uint64_t seed = g.seed.value_or(cfg.train.seed);
  cfg.train.seed = seed;
  exp::validate(cfg);
  const auto data = dataset(g, cfg);
  RunDir run(g, "train", cfg, seed);
  run.start();
  exp::RunOptions opt;
  opt.save_dir = run.dir();
  opt.progress = note;
  auto r = exp::run_arm(cfg, data, cfg.flags, seed, opt);
  r.arm = "train";
  exp::write_text(run.path("metrics.csv"), exp::metrics_csv({r}));
  run.set("dataset_hash", synth::hash_hex(synth::dataset_hash(data)));
  if (r.status != "ok") {
    run.set("error", r.error);
    run.finish(r.status);
    return kExitDiverged;
  }
  exp::write_text(run.path("eval.json"), exp::eval_json(r.test, "test"));
  for (const char* f : {"student.ckpt", "teacher.ckpt", "denoiser.ckpt", "clip.ckpt"})
    if (fs::exists(run.dir() / f)) run.path(f);
  run.metrics() = {{"val", {{"map50", r.val.map50}, {"precision", r.val.precision}, {"recall", r.val.recall}}},
                   {"test", eval_metrics(r.test)},
                   {"accepted_pseudo_total", r.accepted_total},
                   {"synthetic_samples", r.n_synthetic}};
  if (r.retrieval >= 0) {
    run.metrics()["filter_retrieval"] = r.retrieval;
    run.metrics()["filter_flagged"] = r.filter_flagged;
  }
  note("val mAP@0.5 " + fixed(r.val.map50) + ", test mAP@0.5 " + fixed(r.test.map50));
  run.finish("ok");
  return kExitOk;
}

int cmd_evaluate(const Globals& g, const std::string& ckpt, const std::string& split) {
  auto cfg = load(g);
  exp::validate(cfg);
  const auto data = dataset(g, cfg);
  const auto& samples = synth::split_by_name(data, split);
  const auto model = det::Detector::load(ckpt);
  const auto rep = exp::evaluate_split(model, samples, cfg.train.eval_conf, cfg.train.pr_conf);
  RunDir run(g, "evaluate", cfg, g.seed.value_or(cfg.train.seed));
  run.start();
  exp::write_text(run.path("eval.json"), exp::eval_json(rep, split));
  run.metrics() = eval_metrics(rep);
  run.set("checkpoint", ckpt);
  run.set("split", split);
  note(split + ": mAP@0.5 " + fixed(rep.map50) + ", mAP@[.5:.95] " + fixed(rep.map50_95) + " on " +
       std::to_string(samples.size()) + " images");
  run.finish("ok");
  return kExitOk;
}

int cmd_detect(const std::string& image, const std::string& ckpt, double conf) {
  const auto model = det::Detector::load(ckpt);
  const Image src = from_bytes(read_png(image));
  const int S = model.config().image_size;
  const Image in = (src.height == S && src.width == S) ? src : resize_bilinear(src, S, S);
  for (const auto& d : model.detect(in, conf)) {
    // Boxes are normalized, so they map straight back to the source size.
    std::printf("%s %.4f %.1f %.1f %.1f %.1f\n", std::string(synth::class_name(d.cls)).c_str(), d.score,
                d.box.x1(src.width), d.box.y1(src.height), d.box.x2(src.width), d.box.y2(src.height));
  }
  return kExitOk;
}

int cmd_ablation(const Globals& g) {
  auto cfg = load(g);
  if (g.seed) cfg.seeds = {*g.seed};
  exp::validate(cfg);
  const auto data = dataset(g, cfg);
  RunDir run(g, "ablation", cfg, cfg.seeds.front());
  run.start();
  const auto result = exp::run_ablation(cfg, data, note);
  exp::write_ablation(result, run.dir());
  for (const char* f : {"metrics.csv", "summary.csv", "table.md", "map_vs_epoch.svg", "pr_curve.svg"}) run.path(f);
  bool diverged = false;
  json arms = json::array();
  for (const auto& s : result.summary) {
    diverged = diverged || s.status != "ok";
    json a = {{"arm", s.arm},           {"runs", s.runs},         {"status", s.status},
              {"val_map50", s.map50},   {"val_map50_sd", s.map50_sd}, {"recall", s.recall},
              {"precision", s.precision}, {"test_map50", s.test_map50}};
    if (s.retrieval >= 0) {
      a["filter_retrieval"] = s.retrieval;
      a["filter_flagged"] = s.filter_flagged;
    }
    arms.push_back(a);
  }
  json errors = json::array();
  for (const auto& r : result.runs)
    if (r.status != "ok") errors.push_back({{"arm", r.arm}, {"seed", r.seed}, {"error", r.error}});
  run.metrics() = {{"arms", arms}};
  run.set("seeds", cfg.seeds);
  run.set("dataset_hash", synth::hash_hex(synth::dataset_hash(data)));
  if (!errors.empty()) run.set("errors", errors);
  std::cout << exp::summary_markdown(result.summary);
  run.finish(diverged ? "diverged" : "ok");
  return diverged ? kExitDiverged : kExitOk;
}

int cmd_filter_audit(const Globals& g, const std::string& ckpt, std::string clip_ckpt, const std::string& split,
                     std::optional<long> step, int points) {
  auto cfg = load(g);
  exp::validate(cfg);
  const auto full = dataset(g, cfg);
  const auto data = synth::with_labeled_fraction(full, cfg.flags.labeled_fraction);
  const auto& pool = synth::split_by_name(data, split);
  const auto teacher = det::Detector::load(ckpt);
  if (clip_ckpt.empty() && fs::exists(fs::path(ckpt).parent_path() / "clip.ckpt"))
    clip_ckpt = (fs::path(ckpt).parent_path() / "clip.ckpt").string();
  std::optional<clip::ContrastiveEncoder> enc;
  if (!clip_ckpt.empty()) enc.emplace(clip::ContrastiveEncoder::load(clip_ckpt));
  else note("no encoder checkpoint; similarities default to 1 (pass-through)");

  clip::FilterConfig fc = cfg.filter;
  const std::size_t synthetic = cfg.flags.use_diffusion_synth
                                    ? static_cast<std::size_t>(cfg.diffusion.per_class) * synth::kNumClasses
                                    : 0;
  fc.T_total = semi::semi_total_steps(data.labeled_train.size() + synthetic, data.unlabeled_train.size(), cfg.train);
  fc.tau_conf = cfg.train.tau_conf;
  const long t = step.value_or(0);
  if (t < 0 || t > fc.T_total)
    throw InvalidArgument("--step must be in [0, " + std::to_string(fc.T_total) + "], got " + std::to_string(t));

  RunDir run(g, "filter-audit", cfg, g.seed.value_or(cfg.train.seed));
  run.start();
  const auto scored = exp::score_pool(teacher, enc ? &*enc : nullptr, pool);
  exp::write_text(run.path("filter_audit.csv"), exp::audit_rows_csv(scored, t, fc));
  const auto curve = exp::acceptance_curve(scored, fc, points);
  exp::write_text(run.path("acceptance_curve.csv"), exp::audit_csv(curve));
  long accepted = 0;
  for (const auto& s : scored) accepted += clip::keep_sample(s.similarity, s.confidence, t, fc);
  run.metrics() = {{"pool", scored.size()},
                   {"step", t},
                   {"T_total", fc.T_total},
                   {"tau_t", clip::threshold_at(t, fc)},
                   {"accepted", accepted}};
  run.set("checkpoint", ckpt);
  if (enc) run.set("encoder", clip_ckpt);
  run.set("split", split);
  note(std::to_string(accepted) + " of " + std::to_string(scored.size()) + " " + split + " images accepted at step " +
       std::to_string(t) + " of " + std::to_string(fc.T_total));
  run.finish("ok");
  return kExitOk;
}

int cmd_report(const Globals& g, const std::vector<std::string>& runs) {
  std::vector<fs::path> dirs(runs.begin(), runs.end());
  const fs::path out = g.out.empty() ? fs::path("report") : fs::path(g.out);
  const auto res = exp::write_report(dirs, out);
  for (const auto& d : res.incomplete) note("incomplete run (no metrics.csv): " + d);
  note("report with " + std::to_string(res.files.size()) + " files in " + out.string());
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dsym: semi-supervised surface-defect detection experiments"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  std::uint64_t seed = 0;
  app.add_option("--config", g.config, "INI experiment config (defaults when omitted)")->check(CLI::ExistingFile);
  auto* seed_opt = app.add_option("--seed", seed, "seed: dataset seed for make-data, training seed otherwise");
  app.add_option("--out", g.out, "output directory");

  std::function<int()> action;
  auto data_opt = [&](CLI::App* sub) {
    sub->add_option("--data", g.data, "dataset from make-data (generated from the config when omitted)");
  };

  auto* make_data = app.add_subcommand("make-data", "generate the synthetic dataset");
  make_data->callback([&] { action = [&] { return cmd_make_data(g); }; });

  auto* train_diff = app.add_subcommand("train-diffusion", "train the conditional denoiser on the labeled split");
  data_opt(train_diff);
  train_diff->callback([&] { action = [&] { return cmd_train_diffusion(g); }; });

  std::string synth_ckpt;
  std::optional<int> per_class;
  auto* synth_cmd = app.add_subcommand("synth", "synthesize labeled defect images with a trained denoiser");
  synth_cmd->add_option("--ckpt", synth_ckpt, "denoiser checkpoint")->required()->check(CLI::ExistingFile);
  synth_cmd->add_option("--per-class", per_class, "samples per class")->check(CLI::NonNegativeNumber);
  synth_cmd->callback([&] { action = [&] { return cmd_synth(g, synth_ckpt, per_class); }; });

  auto* train = app.add_subcommand("train", "train one detector with the [ablation] flags");
  data_opt(train);
  train->callback([&] { action = [&] { return cmd_train(g); }; });

  std::string eval_ckpt, eval_split = "test";
  auto* evaluate = app.add_subcommand("evaluate", "evaluate a detector checkpoint and write eval.json");
  evaluate->add_option("--ckpt", eval_ckpt, "detector checkpoint")->required()->check(CLI::ExistingFile);
  evaluate->add_option("--split", eval_split, "split to evaluate")
      ->check(CLI::IsMember({"test", "val", "labeled", "unlabeled"}));
  data_opt(evaluate);
  evaluate->callback([&] { action = [&] { return cmd_evaluate(g, eval_ckpt, eval_split); }; });

  std::string det_image, det_ckpt;
  double det_conf = 0.25;
  auto* detect = app.add_subcommand("detect", "print detections for one PNG: class score x1 y1 x2 y2");
  detect->add_option("--image", det_image, "grayscale PNG")->required()->check(CLI::ExistingFile);
  detect->add_option("--ckpt", det_ckpt, "detector checkpoint")->required()->check(CLI::ExistingFile);
  detect->add_option("--conf", det_conf, "score threshold")->check(CLI::Range(0.0, 1.0));
  detect->callback([&] { action = [&] { return cmd_detect(det_image, det_ckpt, det_conf); }; });

  auto* ablation = app.add_subcommand("ablation", "run every configured arm at every seed");
  data_opt(ablation);
  ablation->callback([&] { action = [&] { return cmd_ablation(g); }; });

  std::string audit_ckpt, audit_clip, audit_split = "unlabeled";
  std::optional<long> audit_step;
  int audit_points = 21;
  auto* audit = app.add_subcommand("filter-audit", "score a pool with a teacher and the filter");
  audit->add_option("--ckpt", audit_ckpt, "teacher checkpoint")->required()->check(CLI::ExistingFile);
  audit->add_option("--clip", audit_clip, "encoder checkpoint (default: clip.ckpt beside --ckpt)")
      ->check(CLI::ExistingFile);
  audit->add_option("--split", audit_split, "pool split")
      ->check(CLI::IsMember({"test", "val", "labeled", "unlabeled"}));
  audit->add_option("--step", audit_step, "phase-2 step for the per-image decisions (default 0)");
  audit->add_option("--points", audit_points, "steps on the acceptance curve")->check(CLI::Range(2, 100000));
  data_opt(audit);
  audit->callback([&] {
    action = [&] { return cmd_filter_audit(g, audit_ckpt, audit_clip, audit_split, audit_step, audit_points); };
  });

  std::vector<std::string> report_runs;
  auto* report = app.add_subcommand("report", "render plots and an index page for run directories");
  report->add_option("runs", report_runs, "run directories")->required();
  report->callback([&] { action = [&] { return cmd_report(g, report_runs); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitInvalid;
  }
  if (*seed_opt) g.seed = seed;

  try {
    return action();
  } catch (const ConfigError& e) {
    std::cerr << "dsym: config error: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const InvalidArgument& e) {
    std::cerr << "dsym: invalid argument: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const TrainingDivergence& e) {
    std::cerr << "dsym: training diverged: " << e.what() << "\n";
    return kExitDiverged;
  } catch (const std::exception& e) {
    std::cerr << "dsym: " << e.what() << "\n";
    return kExitFailure;
  }
}
