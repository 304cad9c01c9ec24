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

#include "dsym/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <set>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <json.hpp>

#include "dsym/errors.hpp"
#include "dsym/plot.hpp"

namespace dsym::exp {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

// ---------------------------------------------------------------- values

std::string fmt_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string fmt6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& v, const char* want) {
  throw ConfigError("config key '" + key + "': expected " + want + ", got '" + v + "'");
}

template <typename T>
T parse_number(const std::string& key, const std::string& raw, const char* want) {
  const std::string v = trim(raw);
  T out{};
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || r.ec != std::errc() || r.ptr != v.data() + v.size()) bad_value(key, v, want);
  return out;
}

int parse_int(const std::string& key, const std::string& v) { return parse_number<int>(key, v, "an integer"); }
double parse_double(const std::string& key, const std::string& v) {
  return parse_number<double>(key, v, "a number");
}
std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  return parse_number<std::uint64_t>(key, v, "a non-negative integer");
}

bool parse_bool(const std::string& key, const std::string& raw) {
  const std::string v = trim(raw);
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  bad_value(key, v, "a boolean");
}

std::vector<std::string> split_list(const std::string& raw) {
  std::vector<std::string> out;
  std::stringstream ss(raw);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <typename T>
std::string join(const std::vector<T>& xs) {
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) s += ", ";
    if constexpr (std::is_same_v<T, std::string>)
      s += xs[i];
    else
      s += std::to_string(xs[i]);
  }
  return s;
}

// ---------------------------------------------------------------- schema

struct Field {
  std::string section;
  std::string key;
  std::function<void(ExperimentConfig&, const std::string& full, const std::string& v)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

#define DSYM_INT(sec, name, member)                                                                           \
  Field {                                                                                                     \
    sec, name, [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.member = parse_int(k, v); }, \
        [](const ExperimentConfig& c) { return std::to_string(c.member); }                                    \
  }
#define DSYM_DBL(sec, name, member)                                                                        \
  Field {                                                                                                  \
    sec, name,                                                                                             \
        [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.member = parse_double(k, v); }, \
        [](const ExperimentConfig& c) { return fmt_double(c.member); }                                     \
  }
#define DSYM_U64(sec, name, member)                                                                     \
  Field {                                                                                               \
    sec, name,                                                                                          \
        [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.member = parse_u64(k, v); }, \
        [](const ExperimentConfig& c) { return std::to_string(c.member); }                              \
  }
#define DSYM_BOOL(sec, name, member)                                                                     \
  Field {                                                                                                \
    sec, name,                                                                                           \
        [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.member = parse_bool(k, v); }, \
        [](const ExperimentConfig& c) { return std::string(c.member ? "true" : "false"); }               \
  }
#define DSYM_STR(sec, name, member)                                                                    \
  Field {                                                                                              \
    sec, name, [](ExperimentConfig& c, const std::string&, const std::string& v) { c.member = trim(v); }, \
        [](const ExperimentConfig& c) { return c.member; }                                             \
  }

const std::vector<Field>& schema() {
  static const std::vector<Field> fields = {
      DSYM_INT("dataset", "test", dataset.counts.test),
      DSYM_INT("dataset", "labeled", dataset.counts.labeled),
      DSYM_INT("dataset", "unlabeled", dataset.counts.unlabeled),
      DSYM_INT("dataset", "val", dataset.counts.val),
      DSYM_U64("dataset", "seed", dataset.seed),
      DSYM_INT("dataset", "image_size", dataset.image_size),

      DSYM_INT("diffusion", "T", diffusion.T),
      DSYM_DBL("diffusion", "beta_start", diffusion.beta_start),
      DSYM_DBL("diffusion", "beta_end", diffusion.beta_end),
      DSYM_STR("diffusion", "schedule", diffusion.schedule),
      DSYM_INT("diffusion", "epochs", diffusion.epochs),
      DSYM_INT("diffusion", "batch_size", diffusion.batch_size),
      DSYM_DBL("diffusion", "lr", diffusion.lr),
      DSYM_INT("diffusion", "base_channels", diffusion.base_channels),
      DSYM_INT("diffusion", "cond_dim", diffusion.cond_dim),
      DSYM_INT("diffusion", "per_class", diffusion.per_class),
      DSYM_INT("diffusion", "sample_steps", diffusion.sample_steps),

      DSYM_INT("clip", "epochs", clip.epochs),
      DSYM_INT("clip", "batch_size", clip.batch_size),
      DSYM_DBL("clip", "lr", clip.lr),
      DSYM_INT("clip", "dim", clip.dim),
      DSYM_INT("clip", "background_per_image", clip.background_per_image),

      DSYM_INT("detector", "bins", detector.bins),
      DSYM_INT("detector", "width", detector.width),
      DSYM_INT("detector", "state_dim", detector.state_dim),

      DSYM_INT("train", "epochs_sup", train.epochs_sup),
      DSYM_INT("train", "epochs_total", train.epochs_total),
      DSYM_DBL("train", "alpha", train.alpha),
      DSYM_DBL("train", "tau_conf", train.tau_conf),
      DSYM_DBL("train", "lambda_unsup_max", train.lambda_unsup_max),
      DSYM_INT("train", "ramp_epochs", train.ramp_epochs),
      DSYM_INT("train", "batch_size", train.batch_size),
      DSYM_DBL("train", "lr", train.lr),
      DSYM_DBL("train", "momentum", train.momentum),
      DSYM_DBL("train", "weight_decay", train.weight_decay),
      DSYM_STR("train", "optimizer", train.optimizer),
      DSYM_DBL("train", "grad_clip", train.grad_clip),
      DSYM_DBL("train", "eval_conf", train.eval_conf),
      DSYM_DBL("train", "pr_conf", train.pr_conf),
      DSYM_U64("train", "seed", train.seed),

      DSYM_DBL("filter", "tau_0", filter.tau_0),
      DSYM_DBL("filter", "lambda_decay", filter.lambda_decay),

      DSYM_BOOL("ablation", "use_mamba_head", flags.use_mamba_head),
      DSYM_BOOL("ablation", "use_semisup", flags.use_semisup),
      DSYM_BOOL("ablation", "use_diffusion_synth", flags.use_diffusion_synth),
      DSYM_BOOL("ablation", "use_clip_filter", flags.use_clip_filter),
      DSYM_DBL("ablation", "labeled_fraction", flags.labeled_fraction),
      Field{"ablation", "arms",
            [](ExperimentConfig& c, const std::string&, const std::string& v) { c.arms = split_list(v); },
            [](const ExperimentConfig& c) { return join(c.arms); }},
      Field{"ablation", "seeds",
            [](ExperimentConfig& c, const std::string& k, const std::string& v) {
              c.seeds.clear();
              for (const auto& s : split_list(v)) c.seeds.push_back(parse_u64(k, s));
            },
            [](const ExperimentConfig& c) { return join(c.seeds); }},
  };
  return fields;
}

#undef DSYM_INT
#undef DSYM_DBL
#undef DSYM_U64
#undef DSYM_BOOL
#undef DSYM_STR

long fraction_key(double f) { return std::lround(f * 1e6); }

}  // namespace

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : schema()) keys.push_back(f.section + "." + f.key);
  return keys;
}

ExperimentConfig parse_config(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream is(text);
  try {
    pt::read_ini(is, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("config syntax error at line " + std::to_string(e.line()) + ": " + e.message());
  }
  ExperimentConfig cfg;
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty())
      throw ConfigError("config key '" + section + "' must be inside a section");
    for (const auto& [key, value] : body) {
      const auto it = std::find_if(schema().begin(), schema().end(),
                                   [&](const Field& f) { return f.section == section && f.key == key; });
      if (it == schema().end()) throw ConfigError("unknown config key '" + section + "." + key + "'");
      it->set(cfg, section + "." + key, value.data());
    }
  }
  validate(cfg);
  return cfg;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError(path.string(), "cannot open config");
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

std::string to_ini(const ExperimentConfig& cfg) {
  std::string out, section;
  for (const auto& f : schema()) {
    if (f.section != section) {
      if (!section.empty()) out += '\n';
      section = f.section;
      out += "[" + section + "]\n";
    }
    out += f.key + " = " + f.get(cfg) + "\n";
  }
  return out;
}

std::uint64_t config_hash(const ExperimentConfig& cfg) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char b : to_ini(cfg)) {
    h ^= b;
    h *= 1099511628211ULL;
  }
  return h;
}

void validate(const ExperimentConfig& cfg) {
  auto need = [](bool ok, const std::string& key, const std::string& what) {
    if (!ok) throw ConfigError("config key '" + key + "': " + what);
  };
  const auto& d = cfg.dataset;
  need(d.counts.test >= 0, "dataset.test", "must be >= 0");
  need(d.counts.labeled >= 1, "dataset.labeled", "must be >= 1");
  need(d.counts.unlabeled >= 0, "dataset.unlabeled", "must be >= 0");
  need(d.counts.val >= 0, "dataset.val", "must be >= 0");
  need(d.image_size >= 32 && d.image_size % 16 == 0, "dataset.image_size", "must be a multiple of 16, >= 32");

  const auto& df = cfg.diffusion;
  need(df.T >= 1, "diffusion.T", "must be >= 1");
  need(df.beta_start > 0 && df.beta_start < df.beta_end && df.beta_end < 1, "diffusion.beta_end",
       "need 0 < beta_start < beta_end < 1");
  need(df.schedule == "linear" || df.schedule == "cosine", "diffusion.schedule", "must be linear or cosine");
  need(df.epochs >= 0, "diffusion.epochs", "must be >= 0");
  need(df.batch_size >= 1, "diffusion.batch_size", "must be >= 1");
  need(df.lr > 0, "diffusion.lr", "must be > 0");
  need(df.base_channels >= 1, "diffusion.base_channels", "must be >= 1");
  need(df.cond_dim >= 2 && df.cond_dim % 2 == 0, "diffusion.cond_dim", "must be even and >= 2");
  need(df.per_class >= 0, "diffusion.per_class", "must be >= 0");
  need(df.sample_steps >= 1 && df.sample_steps <= df.T, "diffusion.sample_steps", "must be in [1, T]");

  const auto& c = cfg.clip;
  need(c.epochs >= 0, "clip.epochs", "must be >= 0");
  need(c.batch_size >= 2, "clip.batch_size", "must be >= 2");
  need(c.lr > 0, "clip.lr", "must be > 0");
  need(c.dim >= 2, "clip.dim", "must be >= 2");
  need(c.background_per_image >= 0, "clip.background_per_image", "must be >= 0");

  need(cfg.detector.bins >= 1, "detector.bins", "must be >= 1");
  need(cfg.detector.width >= 1, "detector.width", "must be >= 1");
  need(cfg.detector.state_dim >= 1, "detector.state_dim", "must be >= 1");

  try {
    semi::validate(cfg.train);
  } catch (const InvalidArgument& e) {
    throw ConfigError(std::string("config section [train]: ") + e.what());
  }
  need(cfg.train.tau_conf >= 0 && cfg.train.tau_conf < 1, "train.tau_conf", "must be in [0, 1)");
  need(cfg.filter.tau_0 > 0 && cfg.filter.tau_0 < 1, "filter.tau_0", "must be in (0, 1)");
  need(cfg.filter.lambda_decay >= 0, "filter.lambda_decay", "must be >= 0");
  need(cfg.flags.labeled_fraction > 0 && cfg.flags.labeled_fraction <= 1, "ablation.labeled_fraction",
       "must be in (0, 1]");
  need(!cfg.arms.empty(), "ablation.arms", "must list at least one arm");
  std::set<std::string> seen;
  for (const auto& a : cfg.arms) {
    find_arm(a);
    need(seen.insert(a).second, "ablation.arms", "duplicate arm '" + a + "'");
  }
  need(!cfg.seeds.empty(), "ablation.seeds", "must list at least one seed");
}

// ---------------------------------------------------------------- arms

const std::vector<Arm>& builtin_arms() {
  static const std::vector<Arm> arms = {
      {"baseline", "Baseline detector (plain head), 20%", {false, false, false, false, 0.2}},
      {"mamba", "+ state-space head, 20% (supervised only)", {true, false, false, false, 0.2}},
      {"semisup", "+ semi-supervised with filter, 20%", {true, true, false, true, 0.2}},
      {"diffusion", "+ diffusion synthesis, 20%", {true, false, true, false, 0.2}},
      {"dsym", "DSYM full (synthesis + semi-supervised + filter), 20%", {true, true, true, true, 0.2}},
      {"mamba_40", "+ state-space head, 40% (supervised only)", {true, false, false, false, 0.4}},
      {"semisup_40", "+ semi-supervised with filter, 40%", {true, true, false, true, 0.4}},
      {"dsym_40", "DSYM full, 40%", {true, true, true, true, 0.4}},
  };
  return arms;
}

const Arm& find_arm(std::string_view name) {
  for (const auto& a : builtin_arms())
    if (a.name == name) return a;
  std::string known;
  for (const auto& a : builtin_arms()) known += (known.empty() ? "" : ", ") + a.name;
  throw ConfigError("unknown ablation arm '" + std::string(name) + "' (known: " + known + ")");
}

// ---------------------------------------------------------------- cache

const ArtifactCache::Synthesis* ArtifactCache::find_synthesis(std::uint64_t seed, double fraction) const {
  const auto it = synth_.find({seed, fraction_key(fraction)});
  return it == synth_.end() ? nullptr : &it->second;
}

const ArtifactCache::Filter* ArtifactCache::find_filter(std::uint64_t seed, double fraction) const {
  const auto it = filter_.find({seed, fraction_key(fraction)});
  return it == filter_.end() ? nullptr : &it->second;
}

const ArtifactCache::Synthesis& ArtifactCache::put(std::uint64_t seed, double fraction, Synthesis s) {
  return synth_[{seed, fraction_key(fraction)}] = std::move(s);
}

const ArtifactCache::Filter& ArtifactCache::put(std::uint64_t seed, double fraction, Filter f) {
  return filter_[{seed, fraction_key(fraction)}] = std::move(f);
}

// ---------------------------------------------------------------- pipeline

ArtifactCache::Synthesis build_synthesis(const ExperimentConfig& cfg, const std::vector<synth::ImageSample>& labeled,
                                         std::uint64_t seed, const Progress& progress) {
  const auto& d = cfg.diffusion;
  ArtifactCache::Synthesis out;
  out.schedule = diff::make_schedule(d.T, d.beta_start, d.beta_end, diff::schedule_kind_from_name(d.schedule));
  diff::DenoiserConfig dc;
  dc.image_size = cfg.dataset.image_size;
  dc.cond_dim = d.cond_dim;
  dc.base_channels = d.base_channels;
  out.denoiser = std::make_shared<diff::Denoiser>(dc, derive_seed(seed, {0xd1}));
  diff::DiffusionTrainConfig tc;
  tc.epochs = d.epochs;
  tc.batch_size = d.batch_size;
  tc.lr = d.lr;
  tc.seed = derive_seed(seed, {0xd2});
  diff::train_diffusion(*out.denoiser, out.schedule, labeled, tc, [&](int epoch, double loss) {
    // on_epoch counts from 0.
    if (progress && ((epoch + 1) % 10 == 0 || epoch + 1 == d.epochs))
      progress("diffusion epoch " + std::to_string(epoch + 1) + " loss " + fmt6(loss));
  });
  if (d.per_class > 0) {
    out.samples = diff::synthesize_defect_set(*out.denoiser, out.schedule, d.per_class, derive_seed(seed, {0xd3}),
                                              d.sample_steps, cfg.dataset.image_size);
    out.fidelity = diff::fidelity_gate(out.samples).pass_rate;
  }
  if (progress)
    progress("synthesized " + std::to_string(out.samples.size()) + " samples, fidelity " + fmt6(out.fidelity));
  return out;
}

ArtifactCache::Filter build_filter(const ExperimentConfig& cfg, const std::vector<synth::ImageSample>& labeled,
                                   const std::vector<synth::ImageSample>& held_out, std::uint64_t seed,
                                   const Progress& progress) {
  clip::EncoderConfig ec;
  ec.dim = cfg.clip.dim;
  ArtifactCache::Filter out;
  out.encoder = std::make_shared<clip::ContrastiveEncoder>(ec, derive_seed(seed, {0xc1}));
  clip::ContrastiveTrainConfig tc;
  tc.epochs = cfg.clip.epochs;
  tc.batch_size = cfg.clip.batch_size;
  tc.lr = cfg.clip.lr;
  tc.background_per_image = cfg.clip.background_per_image;
  tc.seed = derive_seed(seed, {0xc2});
  clip::train_contrastive(*out.encoder, labeled, tc);
  const auto crops = clip::build_crop_set(*out.encoder, held_out, 1, derive_seed(seed, {0xc3}));
  out.retrieval = crops.crops.empty() ? 0.0 : clip::retrieval_accuracy(*out.encoder, crops);
  out.trusted = out.retrieval > clip::kRetrievalGate;
  if (progress)
    progress("filter encoder retrieval " + fmt6(out.retrieval) + (out.trusted ? " (trusted)" : " (pass-through)"));
  return out;
}

eval::EvalReport evaluate_split(const det::Detector& model, const std::vector<synth::ImageSample>& samples,
                                double eval_conf, double pr_conf) {
  std::vector<eval::EvalImage> low, high;
  constexpr std::size_t kChunk = 32;
  for (std::size_t begin = 0; begin < samples.size(); begin += kChunk) {
    std::vector<const Image*> ims;
    for (std::size_t j = begin; j < std::min(samples.size(), begin + kChunk); ++j) ims.push_back(&samples[j].image);
    const auto dets = model.detect(ims, eval_conf);
    for (std::size_t j = 0; j < dets.size(); ++j) {
      const auto& gts = samples[begin + j].annotations;
      low.push_back({dets[j], gts});
      std::vector<det::Detection> kept;
      for (const auto& d : dets[j])
        if (d.score >= pr_conf) kept.push_back(d);
      high.push_back({std::move(kept), gts});
    }
  }
  eval::EvalReport out = eval::evaluate(high);
  const eval::EvalReport ap = eval::evaluate(low);
  out.map50 = ap.map50;
  out.map50_95 = ap.map50_95;
  for (std::size_t c = 0; c < out.classes.size(); ++c) out.classes[c].ap50 = ap.classes[c].ap50;
  return out;
}

namespace {

std::vector<double> interpolated_pr(const det::Detector& model, const std::vector<synth::ImageSample>& samples,
                                    double conf) {
  std::vector<eval::EvalImage> all;
  for (const auto& s : samples) all.push_back({model.detect(s.image, conf), s.annotations});
  std::vector<double> mean(101, 0.0);
  int classes = 0;
  for (auto c : synth::all_classes()) {
    bool has_gt = false;
    for (const auto& im : all)
      for (const auto& g : im.gts) has_gt = has_gt || g.cls == c;
    if (!has_gt) continue;
    ++classes;
    const auto curve = eval::pr_curve(all, c);
    for (int k = 0; k <= 100; ++k) {
      double best = 0.0;
      for (const auto& p : curve)
        if (p.recall >= k / 100.0 - 1e-12) best = std::max(best, p.precision);
      mean[static_cast<std::size_t>(k)] += best;
    }
  }
  if (classes > 0)
    for (double& v : mean) v /= classes;
  return mean;
}

}  // namespace

ArmResult run_arm(const ExperimentConfig& cfg, const synth::DatasetSplit& data, const ArmFlags& flags,
                  std::uint64_t seed, const RunOptions& opt) {
  ArmResult r;
  r.seed = seed;
  const auto split = synth::with_labeled_fraction(data, flags.labeled_fraction);
  auto say = [&](const std::string& m) {
    if (opt.progress) opt.progress(m);
  };

  ArtifactCache local;
  ArtifactCache& cache = opt.cache ? *opt.cache : local;
  const ArtifactCache::Synthesis* syn = nullptr;
  if (flags.use_diffusion_synth) {
    syn = cache.find_synthesis(seed, flags.labeled_fraction);
    if (!syn) syn = &cache.put(seed, flags.labeled_fraction, build_synthesis(cfg, split.labeled_train, seed, say));
    r.n_synthetic = syn->samples.size();
    r.fidelity = syn->fidelity;
  }
  const ArtifactCache::Filter* filt = nullptr;
  if (flags.use_semisup && flags.use_clip_filter) {
    filt = cache.find_filter(seed, flags.labeled_fraction);
    if (!filt) filt = &cache.put(seed, flags.labeled_fraction, build_filter(cfg, split.labeled_train, split.test, seed, say));
    r.retrieval = filt->retrieval;
    r.filter_flagged = !filt->trusted;
  }

  semi::TrainConfig tc = cfg.train;
  tc.seed = seed;
  tc.use_semisup = flags.use_semisup;
  det::DetectorConfig dc = cfg.detector;
  dc.image_size = cfg.dataset.image_size;
  dc.use_mamba = flags.use_mamba_head;

  semi::RunInputs in;
  in.labeled = &split.labeled_train;
  in.unlabeled = &split.unlabeled_train;
  in.val = &split.val;
  if (syn && !syn->samples.empty()) in.synthetic = &syn->samples;
  in.filter.config = cfg.filter;
  if (filt) {
    in.filter.encoder = filt->encoder.get();
    in.filter.passthrough = !filt->trusted;
  }

  try {
    auto res = semi::run_dsym(in, dc, tc, [&](const semi::EpochLog& l) {
      if (l.epoch % 5 == 0 || l.epoch == tc.epochs_total)
        say("epoch " + std::to_string(l.epoch) + " " + l.phase + " " + l.model + " val mAP@0.5 " +
            fmt6(l.val.map50) + (l.phase == "semi" ? " accepted " + std::to_string(l.accepted_pseudo) : ""));
    });
    r.log = res.log;
    r.accepted_total = res.accepted_total;
    r.filter_audit_ok = res.filter_audit_ok;
    const bool phase2 = tc.epochs_total > tc.epochs_sup;
    const det::Detector& reported = phase2 ? res.state.teacher : res.state.student;
    r.val = r.log.empty() ? semi::ValMetrics{} : r.log.back().val;
    r.test = evaluate_split(reported, split.test, tc.eval_conf, tc.pr_conf);
    r.pr_precision = interpolated_pr(reported, split.test, tc.eval_conf);
    if (!opt.save_dir.empty()) {
      fs::create_directories(opt.save_dir);
      res.state.student.save(opt.save_dir / "student.ckpt");
      res.state.teacher.save(opt.save_dir / "teacher.ckpt");
      if (syn) syn->denoiser->save(opt.save_dir / "denoiser.ckpt", syn->schedule);
      if (filt) filt->encoder->save(opt.save_dir / "clip.ckpt");
    }
  } catch (const TrainingDivergence& e) {
    r.status = "diverged";
    r.error = e.what();
    say(std::string("diverged: ") + e.what());
  }
  return r;
}

AblationResult run_ablation(const ExperimentConfig& cfg, const synth::DatasetSplit& data, const Progress& progress) {
  AblationResult out;
  ArtifactCache cache;
  for (const auto& name : cfg.arms) {
    const Arm& arm = find_arm(name);
    for (auto seed : cfg.seeds) {
      RunOptions opt;
      opt.cache = &cache;
      if (progress) opt.progress = [&](const std::string& m) { progress(name + " seed " + std::to_string(seed) + ": " + m); };
      auto r = run_arm(cfg, data, arm.flags, seed, opt);
      r.arm = name;
      out.runs.push_back(std::move(r));
    }
  }
  out.summary = summarize(cfg, out.runs);
  return out;
}

std::vector<ArmSummary> summarize(const ExperimentConfig& cfg, const std::vector<ArmResult>& runs) {
  std::vector<ArmSummary> out;
  for (const auto& name : cfg.arms) {
    ArmSummary s;
    s.arm = name;
    s.label = find_arm(name).label;
    std::vector<double> maps;
    double retr = 0.0;
    int n_retr = 0, total = 0;
    for (const auto& r : runs) {
      if (r.arm != name) continue;
      ++total;
      if (r.retrieval >= 0) {
        retr += r.retrieval;
        ++n_retr;
      }
      s.filter_flagged = s.filter_flagged || r.filter_flagged;
      if (r.status != "ok") continue;
      ++s.runs;
      s.recall += r.val.recall;
      s.precision += r.val.precision;
      s.test_map50 += r.test.map50;
      maps.push_back(r.val.map50);
    }
    if (s.runs > 0) {
      s.recall /= s.runs;
      s.precision /= s.runs;
      s.test_map50 /= s.runs;
      for (double m : maps) s.map50 += m;
      s.map50 /= s.runs;
      if (s.runs > 1) {
        double ss = 0.0;
        for (double m : maps) ss += (m - s.map50) * (m - s.map50);
        s.map50_sd = std::sqrt(ss / (s.runs - 1));
      }
    }
    if (n_retr > 0) s.retrieval = retr / n_retr;
    s.status = s.runs == total ? "ok" : (s.runs == 0 ? "diverged" : "partial");
    out.push_back(s);
  }
  return out;
}

std::string metrics_csv(const std::vector<ArmResult>& runs) {
  std::string s = "arm,seed,epoch,phase,model,split,map50,precision,recall,accepted_pseudo\n";
  for (const auto& r : runs)
    for (const auto& l : r.log)
      s += r.arm + "," + std::to_string(r.seed) + "," + std::to_string(l.epoch) + "," + l.phase + "," + l.model +
           ",val," + fmt6(l.val.map50) + "," + fmt6(l.val.precision) + "," + fmt6(l.val.recall) + "," +
           std::to_string(l.accepted_pseudo) + "\n";
  return s;
}

std::string summary_csv(const std::vector<ArmSummary>& summary) {
  std::string s = "arm,runs,recall,precision,map50,map50_sd,test_map50,retrieval,filter_flagged,status\n";
  for (const auto& a : summary)
    s += a.arm + "," + std::to_string(a.runs) + "," + fmt6(a.recall) + "," + fmt6(a.precision) + "," +
         fmt6(a.map50) + "," + fmt6(a.map50_sd) + "," + fmt6(a.test_map50) + "," +
         (a.retrieval < 0 ? std::string("") : fmt6(a.retrieval)) + "," + (a.filter_flagged ? "true" : "false") +
         "," + a.status + "\n";
  return s;
}

std::string summary_markdown(const std::vector<ArmSummary>& summary) {
  auto pct = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f", 100.0 * v);
    return std::string(buf);
  };
  std::string s = "| Arm | Recall (%) | Precision (%) | mAP@0.5 (%) |\n|---|---:|---:|---:|\n";
  for (const auto& a : summary) {
    std::string label = a.label;
    if (a.status != "ok") label += " (" + a.status + ")";
    if (a.filter_flagged) label += " [filter pass-through]";
    s += "| " + label + " | " + pct(a.recall) + " | " + pct(a.precision) + " | " + pct(a.map50);
    if (a.runs > 1) s += " ± " + pct(a.map50_sd);
    s += " |\n";
  }
  return s;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError(path.string(), "cannot open for writing");
  os << text;
  if (!os) throw IoError(path.string(), "write failed");
}

void write_ablation(const AblationResult& result, const fs::path& dir) {
  fs::create_directories(dir);
  write_text(dir / "metrics.csv", metrics_csv(result.runs));
  write_text(dir / "summary.csv", summary_csv(result.summary));
  write_text(dir / "table.md", summary_markdown(result.summary));

  std::vector<plot::Series> curves, prs;
  for (const auto& a : result.summary) {
    // Mean over finished seeds of the reported model: teacher once it exists.
    std::map<int, std::pair<double, int>> by_epoch;
    std::vector<double> pr(101, 0.0);
    int n = 0;
    for (const auto& r : result.runs) {
      if (r.arm != a.arm || r.status != "ok") continue;
      std::map<int, double> best;
      for (const auto& l : r.log)
        if (l.model == "teacher" || !best.count(l.epoch)) best[l.epoch] = l.val.map50;
      for (const auto& [e, v] : best) {
        by_epoch[e].first += v;
        by_epoch[e].second += 1;
      }
      for (std::size_t k = 0; k < pr.size() && k < r.pr_precision.size(); ++k) pr[k] += r.pr_precision[k];
      ++n;
    }
    if (n == 0) continue;
    plot::Series c{a.arm, {}, {}};
    for (const auto& [e, v] : by_epoch) {
      c.x.push_back(e);
      c.y.push_back(v.first / v.second);
    }
    curves.push_back(std::move(c));
    plot::Series p{a.arm, {}, {}};
    for (int k = 0; k <= 100; ++k) {
      p.x.push_back(k / 100.0);
      p.y.push_back(pr[static_cast<std::size_t>(k)] / n);
    }
    prs.push_back(std::move(p));
  }
  write_text(dir / "map_vs_epoch.svg",
             plot::line_chart({"Validation mAP@0.5 by epoch (mean over seeds)", "epoch", "mAP@0.5", 0.0, 1.0}, curves));
  write_text(dir / "pr_curve.svg",
             plot::line_chart({"Test precision-recall (class-averaged, interpolated)", "recall", "precision", 0.0, 1.0},
                              prs));
}

std::string eval_json(const eval::EvalReport& report, const std::string& split) {
  json classes = json::array();
  for (auto c : synth::all_classes()) {
    const auto& cr = report.classes[static_cast<std::size_t>(synth::class_id(c))];
    classes.push_back({{"id", synth::class_id(c)},
                       {"name", std::string(synth::class_name(c))},
                       {"gt", cr.gt},
                       {"tp", cr.tp},
                       {"fp", cr.fp},
                       {"fn", cr.fn},
                       {"precision", cr.pr.precision},
                       {"recall", cr.pr.recall},
                       {"ap50", cr.ap50 ? json(*cr.ap50) : json(nullptr)}});
  }
  json j = {{"split", split},
            {"map50", report.map50},
            {"map50_95", report.map50_95},
            {"precision", report.overall.precision},
            {"recall", report.overall.recall},
            {"classes", classes}};
  return j.dump(2) + "\n";
}

// ---------------------------------------------------------------- audit

std::vector<ScoredSample> score_pool(const det::Detector& teacher, const clip::ContrastiveEncoder* encoder,
                                     const std::vector<synth::ImageSample>& pool, double det_conf) {
  std::vector<ScoredSample> out;
  for (const auto& s : pool) {
    ScoredSample x;
    x.id = s.id;
    const auto dets = teacher.detect(s.image, det_conf);
    if (!dets.empty()) {
      x.cls = synth::class_id(dets.front().cls);
      x.confidence = dets.front().score;
      x.similarity = encoder ? encoder->score(s.image, dets.front().box, dets.front().cls) : 1.0;
    }
    out.push_back(std::move(x));
  }
  return out;
}

std::vector<AuditPoint> acceptance_curve(const std::vector<ScoredSample>& pool, const clip::FilterConfig& cfg,
                                         int points) {
  clip::validate(cfg);
  if (points < 2) throw InvalidArgument("acceptance_curve: need at least 2 points");
  std::vector<AuditPoint> out;
  long prev = -1;
  for (int i = 0; i < points; ++i) {
    const long step = std::lround(static_cast<double>(i) * static_cast<double>(cfg.T_total) / (points - 1));
    if (step == prev) continue;
    prev = step;
    AuditPoint p;
    p.step = step;
    p.tau_t = clip::threshold_at(step, cfg);
    p.total = static_cast<long>(pool.size());
    for (const auto& s : pool)
      if (clip::keep_sample(s.similarity, s.confidence, step, cfg)) ++p.accepted;
    p.rate = p.total ? static_cast<double>(p.accepted) / static_cast<double>(p.total) : 0.0;
    out.push_back(p);
  }
  return out;
}

std::string audit_csv(const std::vector<AuditPoint>& curve) {
  std::string s = "step,tau_t,accepted,total,rate\n";
  for (const auto& p : curve)
    s += std::to_string(p.step) + "," + fmt6(p.tau_t) + "," + std::to_string(p.accepted) + "," +
         std::to_string(p.total) + "," + fmt6(p.rate) + "\n";
  return s;
}

std::string audit_rows_csv(const std::vector<ScoredSample>& pool, long step, const clip::FilterConfig& cfg) {
  const double tau = clip::threshold_at(step, cfg);
  std::string s = "image_id,class,similarity,confidence,tau_t,accepted\n";
  for (const auto& p : pool) {
    const std::string cls = p.cls < 0 ? "" : std::string(synth::class_name(synth::class_from_id(p.cls)));
    const bool keep = clip::keep_sample(p.similarity, p.confidence, step, cfg);
    s += p.id + "," + cls + "," + fmt6(p.similarity) + "," + fmt6(p.confidence) + "," + fmt6(tau) + "," +
         (keep ? "true" : "false") + "\n";
  }
  return s;
}

// ---------------------------------------------------------------- report

std::vector<std::map<std::string, std::string>> read_csv(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError(path.string(), "cannot open");
  std::string line;
  if (!std::getline(is, line)) throw IoError(path.string(), "empty csv");
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) header.push_back(trim(cell));
  }
  std::vector<std::map<std::string, std::string>> rows;
  while (std::getline(is, line)) {
    if (trim(line).empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::map<std::string, std::string> row;
    for (const auto& h : header) {
      if (!std::getline(ss, cell, ',')) cell.clear();
      row[h] = trim(cell);
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

ReportResult write_report(const std::vector<fs::path>& runs, const fs::path& out) {
  fs::create_directories(out);
  ReportResult res;
  std::string body;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const fs::path& dir = runs[i];
    const std::string name = dir.filename().empty() ? dir.parent_path().filename().string() : dir.filename().string();
    char prefix[16];
    std::snprintf(prefix, sizeof prefix, "%02zu_", i);
    body += "<h2>" + plot::xml_escape(name) + "</h2>\n<p>" + plot::xml_escape(dir.string()) + "</p>\n";
    auto emit = [&](const std::string& file, const std::string& svg) {
      const fs::path p = out / (prefix + file);
      write_text(p, svg);
      res.files.push_back(p);
      body += "<img src=\"" + plot::xml_escape(p.filename().string()) + "\"/>\n";
    };

    if (!fs::exists(dir / "metrics.csv")) {
      res.incomplete.push_back(dir.string());
      body += "<p><b>incomplete:</b> metrics.csv missing</p>\n";
    } else {
      res.complete.push_back(dir.string());
      const auto rows = read_csv(dir / "metrics.csv");
      for (const char* metric : {"map50", "precision", "recall"}) {
        // key -> epoch -> (sum, count); averaged over seeds when present.
        std::map<std::string, std::map<int, std::pair<double, int>>> acc;
        for (const auto& r : rows) {
          const auto it = r.find(metric);
          if (it == r.end() || it->second.empty()) continue;
          const auto arm = r.count("arm") ? r.at("arm") + " " : std::string();
          const std::string key = arm + (r.count("model") ? r.at("model") : std::string("model"));
          auto& cell = acc[key][std::stoi(r.at("epoch"))];
          cell.first += std::stod(it->second);
          cell.second += 1;
        }
        std::vector<plot::Series> series;
        for (const auto& [key, by_epoch] : acc) {
          plot::Series s{key, {}, {}};
          for (const auto& [e, v] : by_epoch) {
            s.x.push_back(e);
            s.y.push_back(v.first / v.second);
          }
          series.push_back(std::move(s));
        }
        emit(std::string(metric) + "_vs_epoch.svg",
             plot::line_chart({name + ": validation " + metric + " by epoch", "epoch", metric, 0.0, 1.0}, series));
      }
    }

    if (fs::exists(dir / "eval.json")) {
      std::ifstream is(dir / "eval.json");
      json j;
      try {
        is >> j;
        std::vector<std::pair<int, std::pair<std::string, std::optional<double>>>> bars;
        for (const auto& c : j.at("classes")) {
          std::optional<double> ap;
          if (!c.at("ap50").is_null()) ap = c.at("ap50").get<double>();
          bars.push_back({c.at("id").get<int>(), {c.at("name").get<std::string>(), ap}});
        }
        std::sort(bars.begin(), bars.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
        std::vector<std::string> labels;
        std::vector<std::optional<double>> values;
        for (const auto& b : bars) {
          labels.push_back(b.second.first);
          values.push_back(b.second.second);
        }
        emit("per_class_ap.svg", plot::bar_chart({name + ": per-class AP@0.5 (" + j.value("split", std::string("?")) +
                                                      ")",
                                                  "class", "AP@0.5", 0.0, 1.0},
                                                 labels, values));
      } catch (const json::exception& e) {
        body += "<p><b>unreadable eval.json:</b> " + plot::xml_escape(e.what()) + "</p>\n";
      }
    } else {
      body += "<p>no eval.json</p>\n";
    }

    if (fs::exists(dir / "acceptance_curve.csv")) {
      plot::Series s{"acceptance rate", {}, {}};
      for (const auto& r : read_csv(dir / "acceptance_curve.csv")) {
        s.x.push_back(std::stod(r.at("step")));
        s.y.push_back(std::stod(r.at("rate")));
      }
      emit("filter_acceptance.svg",
           plot::line_chart({name + ": filter acceptance on a frozen pool", "step", "accepted fraction", 0.0, 1.0},
                            {s}));
    } else {
      body += "<p>no acceptance_curve.csv</p>\n";
    }
  }
  std::string html = "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>DSYM report</title></head><body>\n";
  html += "<h1>DSYM report</h1>\n<p>" + std::to_string(res.complete.size()) + " complete, " +
          std::to_string(res.incomplete.size()) + " incomplete</p>\n";
  if (!res.incomplete.empty()) {
    html += "<ul>\n";
    for (const auto& d : res.incomplete) html += "<li>incomplete: " + plot::xml_escape(d) + "</li>\n";
    html += "</ul>\n";
  }
  html += body + "</body></html>\n";
  write_text(out / "index.html", html);
  res.files.push_back(out / "index.html");
  return res;
}

}  // namespace dsym::exp
