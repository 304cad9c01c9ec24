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

#include "dsym/clipfilter.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dsym/errors.hpp"

namespace dsym::clip {

using ag::Var;

std::string prompt_text(int prompt) {
  if (prompt < 0 || prompt >= kNumPrompts) throw InvalidArgument("prompt index " + std::to_string(prompt));
  if (prompt == kBackgroundPrompt) return "A photo with no defect";
  return "A photo with " + std::string(synth::class_name(synth::class_from_id(prompt))) + " defect";
}

double similarity(const Embedding& a, const Embedding& b) {
  if (a.size() != b.size()) throw InvalidArgument("similarity: length mismatch");
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) throw InvalidArgument("similarity: zero vector");
  return std::clamp(ab / (std::sqrt(aa) * std::sqrt(bb)), -1.0, 1.0);
}

void validate(const FilterConfig& cfg) {
  if (!(cfg.tau_0 > 0.0 && cfg.tau_0 < 1.0)) throw InvalidArgument("filter: tau_0 must be in (0, 1)");
  if (!(cfg.lambda_decay >= 0.0)) throw InvalidArgument("filter: lambda_decay must be >= 0");
  if (cfg.T_total < 1) throw InvalidArgument("filter: T_total must be >= 1");
}

double threshold_at(long t, const FilterConfig& cfg) {
  validate(cfg);
  if (t < 0 || t > cfg.T_total)
    throw InvalidArgument("threshold_at: step " + std::to_string(t) + " outside [0, " + std::to_string(cfg.T_total) +
                          "]");
  return cfg.tau_0 * std::exp(-(static_cast<double>(t) / static_cast<double>(cfg.T_total)) * cfg.lambda_decay);
}

bool keep_sample(double s, double teacher_conf, long t, const FilterConfig& cfg) {
  return s > threshold_at(t, cfg) && teacher_conf > cfg.tau_conf;
}

Var contrastive_loss(const Var& image_features, const Var& text_features, const std::vector<int>& labels,
                     double temperature) {
  const int B = image_features.dim(0), P = text_features.dim(0);
  if (static_cast<int>(labels.size()) != B) throw InvalidArgument("contrastive_loss: one label per image");
  if (image_features.dim(1) != text_features.dim(1)) throw InvalidArgument("contrastive_loss: feature dims differ");
  if (!(temperature > 0)) throw InvalidArgument("contrastive_loss: temperature must be > 0");
  const Var zi = ag::l2_normalize_rows(image_features);
  const Var zt = ag::l2_normalize_rows(text_features);
  const Var logits = ag::scale(ag::matmul(zi, ag::transpose(zt)), 1.0 / temperature);  // (B, P)

  Tensor onehot({B, P});
  std::vector<int> count(static_cast<std::size_t>(P), 0);
  for (int b = 0; b < B; ++b) {
    const int l = labels[static_cast<std::size_t>(b)];
    if (l < 0 || l >= P) throw InvalidArgument("contrastive_loss: label out of range");
    onehot.at(b, l) = 1.0;
    ++count[static_cast<std::size_t>(l)];
  }
  const Var i2t = ag::scale(ag::sum(ag::mul(ag::log_softmax_rows(logits), ag::constant(onehot))), -1.0 / B);

  // Column p averages over its positives; absent prompts get zero weight.
  int present = 0;
  for (int c : count) present += c > 0 ? 1 : 0;
  Tensor w({P, B});
  for (int b = 0; b < B; ++b) {
    const int l = labels[static_cast<std::size_t>(b)];
    w.at(l, b) = 1.0 / (count[static_cast<std::size_t>(l)] * present);
  }
  const Var t2i = ag::scale(ag::sum(ag::mul(ag::log_softmax_rows(ag::transpose(logits)), ag::constant(w))), -1.0);
  return ag::scale(ag::add(i2t, t2i), 0.5);
}

ContrastiveEncoder::ContrastiveEncoder(EncoderConfig cfg, std::uint64_t seed) : cfg_(cfg) {
  if (cfg_.dim < 2 || cfg_.crop_size < 8 || cfg_.channels < 1 || !(cfg_.temperature > 0) || cfg_.pad < 0)
    throw InvalidArgument("contrastive encoder: invalid configuration");
  Rng rng(derive_seed(seed, {0xc11}));
  const int C = cfg_.channels;
  c1_ = nn::Conv2d(params_, "clip.c1", 1, C, 3, 2, 1, rng);
  c2_ = nn::Conv2d(params_, "clip.c2", C, C, 3, 1, 1, rng);
  c3_ = nn::Conv2d(params_, "clip.c3", C, 2 * C, 3, 2, 1, rng);
  proj_ = nn::Linear(params_, "clip.proj", 2 * C, cfg_.dim, rng);
  Tensor table({kNumPrompts, cfg_.dim});
  for (double& v : table.values()) v = normal(rng);
  text_ = params_.add("clip.text", std::move(table));
}

Image ContrastiveEncoder::region(const Image& image, const synth::BBox& box) const {
  const int W = image.width, H = image.height;
  const double pw = box.w * W * cfg_.pad, ph = box.h * H * cfg_.pad;
  int x0 = static_cast<int>(std::floor(box.x1(W) - pw)), x1 = static_cast<int>(std::ceil(box.x2(W) + pw));
  int y0 = static_cast<int>(std::floor(box.y1(H) - ph)), y1 = static_cast<int>(std::ceil(box.y2(H) + ph));
  if (x1 <= x0) x1 = x0 + 1;
  if (y1 <= y0) y1 = y0 + 1;
  return resize_bilinear(crop(image, x0, y0, x1, y1), cfg_.crop_size, cfg_.crop_size);
}

Var ContrastiveEncoder::image_features(const std::vector<Image>& crops) const {
  if (crops.empty()) throw InvalidArgument("image_features: empty batch");
  const int S = cfg_.crop_size, B = static_cast<int>(crops.size());
  Tensor x({B, 1, S, S});
  std::size_t k = 0;
  for (const auto& c : crops) {
    if (c.height != S || c.width != S) throw InvalidArgument("image_features: crops must be crop_size squares");
    for (double v : c.pixels) x[k++] = (v - 0.5) * 4.0;
  }
  Var h = ag::silu(c1_(ag::constant(std::move(x))));
  h = ag::silu(c2_(h));
  h = ag::silu(c3_(h));
  return proj_(ag::global_avg_pool(h));
}

Embedding ContrastiveEncoder::encode_image(const Image& image) const {
  ag::NoGradGuard g;
  const Image c = (image.height == cfg_.crop_size && image.width == cfg_.crop_size)
                      ? image
                      : resize_bilinear(image, cfg_.crop_size, cfg_.crop_size);
  const ag::Var f = image_features({c});
  return Embedding(f.value().storage().begin(), f.value().storage().end());
}

Embedding ContrastiveEncoder::encode_region(const Image& image, const synth::BBox& box) const {
  return encode_image(region(image, box));
}

Embedding ContrastiveEncoder::encode_prompt(int prompt) const {
  if (prompt < 0 || prompt >= kNumPrompts) throw InvalidArgument("encode_prompt: index " + std::to_string(prompt));
  const auto& t = text_.value();
  return Embedding(t.data() + static_cast<std::size_t>(prompt) * cfg_.dim,
                   t.data() + static_cast<std::size_t>(prompt + 1) * cfg_.dim);
}

Embedding ContrastiveEncoder::encode_text(synth::DefectClass cls) const {
  const int id = synth::class_id(cls);
  if (id < 0 || id >= synth::kNumClasses) throw InvalidArgument("encode_text: unknown class");
  return encode_prompt(id);
}

double ContrastiveEncoder::score(const Image& image, const synth::BBox& box, synth::DefectClass cls) const {
  return similarity(encode_region(image, box), encode_text(cls));
}

std::vector<int> ContrastiveEncoder::retrieve(const std::vector<Image>& crops) const {
  ag::NoGradGuard g;
  std::vector<int> out;
  constexpr std::size_t kChunk = 64;
  std::vector<Embedding> prompts;
  for (int p = 0; p < kNumPrompts; ++p) prompts.push_back(encode_prompt(p));
  for (std::size_t begin = 0; begin < crops.size(); begin += kChunk) {
    const std::vector<Image> chunk(crops.begin() + static_cast<long>(begin),
                                   crops.begin() + static_cast<long>(std::min(crops.size(), begin + kChunk)));
    const Tensor f = image_features(chunk).value();
    for (int b = 0; b < f.dim(0); ++b) {
      const Embedding e(f.data() + static_cast<std::size_t>(b) * cfg_.dim,
                        f.data() + static_cast<std::size_t>(b + 1) * cfg_.dim);
      int best = 0;
      double best_s = -2.0;
      for (int p = 0; p < kNumPrompts; ++p) {
        const double s = similarity(e, prompts[static_cast<std::size_t>(p)]);
        if (s > best_s) {
          best_s = s;
          best = p;
        }
      }
      out.push_back(best);
    }
  }
  return out;
}

void ContrastiveEncoder::save(const std::filesystem::path& path, const std::map<std::string, std::string>& meta) const {
  nn::Checkpoint ck;
  ck.meta = meta;
  ck.meta["kind"] = "clip";
  ck.meta["dim"] = std::to_string(cfg_.dim);
  ck.meta["crop_size"] = std::to_string(cfg_.crop_size);
  ck.meta["channels"] = std::to_string(cfg_.channels);
  ck.meta["temperature"] = std::to_string(cfg_.temperature);
  ck.meta["pad"] = std::to_string(cfg_.pad);
  ck.add_store("clip.", params_);
  ck.save(path.string());
}

ContrastiveEncoder ContrastiveEncoder::load(const std::filesystem::path& path) {
  const auto ck = nn::Checkpoint::load(path.string());
  if (ck.meta.count("kind") == 0 || ck.get("kind") != "clip")
    throw InvalidState(path.string() + ": not a contrastive encoder checkpoint");
  EncoderConfig cfg;
  try {
    cfg.dim = std::stoi(ck.get("dim"));
    cfg.crop_size = std::stoi(ck.get("crop_size"));
    cfg.channels = std::stoi(ck.get("channels"));
    cfg.temperature = std::stod(ck.get("temperature"));
    cfg.pad = std::stod(ck.get("pad"));
  } catch (const std::logic_error& e) {
    throw InvalidState(path.string() + ": bad encoder metadata: " + e.what());
  }
  ContrastiveEncoder enc(cfg, 0);
  ck.load_store("clip.", enc.params_);
  return enc;
}

CropSet build_crop_set(const ContrastiveEncoder& enc, const std::vector<synth::ImageSample>& samples,
                       int background_per_image, std::uint64_t seed) {
  CropSet set;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    const int W = s.image.width, H = s.image.height;
    for (const auto& a : s.annotations) {
      set.crops.push_back(enc.region(s.image, a.box));
      set.labels.push_back(synth::class_id(a.cls));
    }
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(i)}));
    int made = 0;
    for (int attempt = 0; attempt < 50 && made < background_per_image; ++attempt) {
      const int side = uniform_int(rng, std::max(6, W / 8), std::max(7, W * 3 / 8));
      if (side >= W || side >= H) break;
      const int x0 = uniform_int(rng, 0, W - side), y0 = uniform_int(rng, 0, H - side);
      bool clear = true;
      for (const auto& a : s.annotations)
        if (x0 < a.box.x2(W) && a.box.x1(W) < x0 + side && y0 < a.box.y2(H) && a.box.y1(H) < y0 + side) clear = false;
      if (!clear) continue;
      set.crops.push_back(resize_bilinear(crop(s.image, x0, y0, x0 + side, y0 + side), enc.config().crop_size,
                                          enc.config().crop_size));
      set.labels.push_back(kBackgroundPrompt);
      ++made;
    }
  }
  return set;
}

double retrieval_accuracy(const ContrastiveEncoder& enc, const CropSet& set) {
  if (set.crops.empty()) throw InvalidArgument("retrieval_accuracy: empty crop set");
  const auto pred = enc.retrieve(set.crops);
  int hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == set.labels[i] ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

std::vector<double> train_contrastive(ContrastiveEncoder& enc, const std::vector<synth::ImageSample>& samples,
                                      const ContrastiveTrainConfig& cfg,
                                      const std::function<void(int, double)>& on_epoch) {
  if (cfg.epochs < 0 || cfg.batch_size < 2 || !(cfg.lr > 0))
    throw InvalidArgument("train_contrastive: invalid epochs, batch size or learning rate");
  const CropSet set = build_crop_set(enc, samples, cfg.background_per_image, derive_seed(cfg.seed, {0xb9}));
  if (set.crops.size() < 2) throw InvalidArgument("train_contrastive: need at least two crops");
  nn::Adam opt(enc.params(), {.lr = cfg.lr});
  Rng rng(derive_seed(cfg.seed, {0xc7}));
  std::vector<std::size_t> order(set.crops.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> history;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    int batches = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(cfg.batch_size));
      if (end - begin < 2) continue;
      std::vector<Image> crops;
      std::vector<int> labels;
      for (std::size_t j = begin; j < end; ++j) {
        crops.push_back(set.crops[order[j]]);
        labels.push_back(set.labels[order[j]]);
      }
      enc.params().zero_grad();
      Var loss = contrastive_loss(enc.image_features(crops), enc.text_features(), labels, enc.config().temperature);
      if (!std::isfinite(loss.item())) throw TrainingDivergence("contrastive loss is not finite at epoch " +
                                                                std::to_string(epoch));
      loss.backward();
      opt.step();
      if (!enc.params().all_finite()) throw TrainingDivergence("contrastive encoder parameters became non-finite");
      total += loss.item();
      ++batches;
    }
    history.push_back(batches ? total / batches : 0.0);
    if (on_epoch) on_epoch(epoch, history.back());
  }
  return history;
}

}  // namespace dsym::clip
