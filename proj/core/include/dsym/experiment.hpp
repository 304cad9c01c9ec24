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

// Experiment orchestration shared by the command-line tool and the
// acceptance harness: INI config schema, ablation arms, the per-arm
// pipeline (synthesis, filter encoder, two-phase training), run artifacts,
// the frozen-pool filter audit and static reports.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "dsym/clipfilter.hpp"
#include "dsym/detector.hpp"
#include "dsym/diffusion.hpp"
#include "dsym/eval.hpp"
#include "dsym/semisup.hpp"
#include "dsym/synthdata.hpp"

namespace dsym::exp {

struct DatasetSection {
  synth::SplitCounts counts;
  std::uint64_t seed = 0;
  int image_size = synth::kDefaultImageSize;
};

struct DiffusionSection {
  int T = 200;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  std::string schedule = "linear";
  int epochs = 60;
  int batch_size = 16;
  double lr = 2e-3;
  int base_channels = 8;
  int cond_dim = 64;
  int per_class = 100;     ///< synthesized samples per class
  int sample_steps = 20;   ///< DDIM steps
};

struct ClipSection {
  int epochs = 30;
  int batch_size = 32;
  double lr = 3e-3;
  int dim = 32;
  int background_per_image = 1;
};

/// Component switches of one training run.
struct ArmFlags {
  bool use_mamba_head = true;
  bool use_semisup = true;
  bool use_diffusion_synth = true;
  bool use_clip_filter = true;
  double labeled_fraction = 0.2;
  bool operator==(const ArmFlags&) const = default;
};

struct ExperimentConfig {
  DatasetSection dataset;
  DiffusionSection diffusion;
  ClipSection clip;
  det::DetectorConfig detector;
  semi::TrainConfig train;
  clip::FilterConfig filter;  ///< tau_0 and lambda_decay; the rest is set per run
  ArmFlags flags;             ///< used by `train`
  std::vector<std::string> arms = {"baseline", "mamba", "semisup", "dsym"};
  std::vector<std::uint64_t> seeds = {0, 1, 2};
};

/// Section-qualified keys ("train.lr") accepted in config files, in the
/// order to_ini() writes them.
std::vector<std::string> config_keys();

/// Parses INI text over the defaults. Throws ConfigError on syntax errors,
/// unknown sections or keys, malformed values, or failed validation.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Canonical INI with every key, so parse_config(to_ini(c)) == c.
std::string to_ini(const ExperimentConfig& cfg);
/// FNV-1a of to_ini().
std::uint64_t config_hash(const ExperimentConfig& cfg);

/// Throws ConfigError naming the offending key.
void validate(const ExperimentConfig& cfg);

struct Arm {
  std::string name;
  std::string label;  ///< table row label
  ArmFlags flags;
};

/// Named flag combinations: baseline (plain head), mamba (state-space
/// head, supervised only), semisup, diffusion, dsym (everything), and the
/// 40% label variants mamba_40, semisup_40, dsym_40.
const std::vector<Arm>& builtin_arms();
/// Throws ConfigError for an unknown name.
const Arm& find_arm(std::string_view name);

/// Synthesized set and filter encoder depend only on (seed, labeled
/// fraction), so arms of one ablation share them.
class ArtifactCache {
 public:
  struct Synthesis {
    std::vector<synth::ImageSample> samples;
    double fidelity = 0.0;
    std::shared_ptr<diff::Denoiser> denoiser;
    diff::NoiseSchedule schedule;
  };
  struct Filter {
    std::shared_ptr<clip::ContrastiveEncoder> encoder;
    double retrieval = 0.0;  ///< held-out top-1 over prompts
    bool trusted = false;    ///< retrieval > kRetrievalGate
  };

  const Synthesis* find_synthesis(std::uint64_t seed, double fraction) const;
  const Filter* find_filter(std::uint64_t seed, double fraction) const;
  const Synthesis& put(std::uint64_t seed, double fraction, Synthesis s);
  const Filter& put(std::uint64_t seed, double fraction, Filter f);

 private:
  std::map<std::pair<std::uint64_t, long>, Synthesis> synth_;
  std::map<std::pair<std::uint64_t, long>, Filter> filter_;
};

using Progress = std::function<void(const std::string&)>;

/// Trains a denoiser on `labeled` and synthesizes per_class samples.
ArtifactCache::Synthesis build_synthesis(const ExperimentConfig& cfg, const std::vector<synth::ImageSample>& labeled,
                                         std::uint64_t seed, const Progress& progress = {});
/// Trains the contrastive encoder on `labeled` crops and measures retrieval
/// on crops of `held_out`.
ArtifactCache::Filter build_filter(const ExperimentConfig& cfg, const std::vector<synth::ImageSample>& labeled,
                                   const std::vector<synth::ImageSample>& held_out, std::uint64_t seed,
                                   const Progress& progress = {});

struct ArmResult {
  std::string arm;
  std::uint64_t seed = 0;
  std::string status = "ok";  ///< "ok" or "diverged"
  std::string error;
  std::vector<semi::EpochLog> log;
  /// Reported model: the teacher when phase 2 ran, else the student.
  semi::ValMetrics val;
  eval::EvalReport test;
  /// Class-averaged interpolated precision on the test split at recall
  /// 0, 0.01, ..., 1.
  std::vector<double> pr_precision;
  std::size_t n_synthetic = 0;
  double fidelity = -1.0;   ///< -1 when synthesis is off
  double retrieval = -1.0;  ///< -1 when the filter is off
  bool filter_flagged = false;
  long accepted_total = 0;
  bool filter_audit_ok = true;
};

struct RunOptions {
  ArtifactCache* cache = nullptr;
  /// When set, checkpoints of every trained component are written here.
  std::filesystem::path save_dir;
  Progress progress;
};

/// One full run of `flags` at training seed `seed`. Divergence is caught and
/// reported through status; other errors propagate.
ArmResult run_arm(const ExperimentConfig& cfg, const synth::DatasetSplit& data, const ArmFlags& flags,
                  std::uint64_t seed, const RunOptions& opt = {});

struct ArmSummary {
  std::string arm;
  std::string label;
  int runs = 0;  ///< seeds that finished
  double recall = 0.0;
  double precision = 0.0;
  double map50 = 0.0;     ///< mean val mAP@0.5 over finished seeds
  double map50_sd = 0.0;  ///< sample standard deviation
  double test_map50 = 0.0;
  double retrieval = -1.0;
  bool filter_flagged = false;
  std::string status;  ///< "ok", "partial" or "diverged"
};

struct AblationResult {
  std::vector<ArmResult> runs;  ///< arm-major, seeds in config order
  std::vector<ArmSummary> summary;
};

/// Every arm of cfg.arms at every seed of cfg.seeds on one dataset.
AblationResult run_ablation(const ExperimentConfig& cfg, const synth::DatasetSplit& data,
                            const Progress& progress = {});
std::vector<ArmSummary> summarize(const ExperimentConfig& cfg, const std::vector<ArmResult>& runs);

/// Per-epoch rows: arm,seed,epoch,phase,model,split,map50,precision,recall,
/// accepted_pseudo. Contains no timing data, so reruns are byte-identical.
std::string metrics_csv(const std::vector<ArmResult>& runs);
std::string summary_csv(const std::vector<ArmSummary>& summary);
/// (arm, recall, precision, mAP@0.5) table.
std::string summary_markdown(const std::vector<ArmSummary>& summary);

/// Writes metrics.csv, summary.csv, table.md, map_vs_epoch.svg and
/// pr_curve.svg into `dir`.
void write_ablation(const AblationResult& result, const std::filesystem::path& dir);

/// Per-class P/R/AP, mAP@0.5 and mAP@[0.5:0.95] as JSON text.
std::string eval_json(const eval::EvalReport& report, const std::string& split);
/// AP and mAP from detections above eval_conf; per-class counts and P/R
/// from detections above pr_conf, matching the training logs.
eval::EvalReport evaluate_split(const det::Detector& model, const std::vector<synth::ImageSample>& samples,
                                double eval_conf = 0.01, double pr_conf = 0.25);

/// Teacher output on one pool image, frozen for the audit.
struct ScoredSample {
  std::string id;
  int cls = -1;             ///< class of the top detection, -1 when none
  double similarity = 0.0;
  double confidence = 0.0;  ///< 0 when the teacher found nothing
};

std::vector<ScoredSample> score_pool(const det::Detector& teacher, const clip::ContrastiveEncoder* encoder,
                                     const std::vector<synth::ImageSample>& pool, double det_conf = 0.05);

struct AuditPoint {
  long step = 0;
  double tau_t = 0.0;
  long accepted = 0;
  long total = 0;
  double rate = 0.0;
};

/// Acceptance of a frozen pool at `points` evenly spaced steps in
/// [0, cfg.T_total]. Non-decreasing in step because tau_t decays.
std::vector<AuditPoint> acceptance_curve(const std::vector<ScoredSample>& pool, const clip::FilterConfig& cfg,
                                         int points);
std::string audit_csv(const std::vector<AuditPoint>& curve);
/// One row per pool image at `step`:
/// image_id,class,similarity,confidence,tau_t,accepted.
std::string audit_rows_csv(const std::vector<ScoredSample>& pool, long step, const clip::FilterConfig& cfg);

struct ReportResult {
  std::vector<std::string> complete;
  std::vector<std::string> incomplete;  ///< runs without metrics.csv
  std::vector<std::filesystem::path> files;
};

/// Builds mAP-vs-epoch curves from each run's metrics.csv, per-class AP bars
/// from eval.json and acceptance curves from acceptance_curve.csv, plus an
/// index.html. Missing inputs are listed, never fatal.
ReportResult write_report(const std::vector<std::filesystem::path>& runs, const std::filesystem::path& out);

/// Reads a CSV with a header row into column-name -> values rows.
std::vector<std::map<std::string, std::string>> read_csv(const std::filesystem::path& path);

/// UTC ISO-8601 timestamp for manifests.
std::string utc_now();

/// Writes `text` to `path`, creating parent directories. Throws IoError.
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace dsym::exp
