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

#include "dsym/nn.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "dsym/errors.hpp"
#include "dsym/ops.hpp"

namespace dsym::nn {

ag::Var ParamStore::add(const std::string& name, Tensor init) {
  for (const auto& [n, _] : params_)
    if (n == name) throw InvalidState("duplicate parameter name " + name);
  ag::Var v(std::move(init), true);
  params_.emplace_back(name, v);
  return v;
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, v] : params_) n += v.size();
  return n;
}

ag::Var ParamStore::find(const std::string& name) const {
  for (const auto& [n, v] : params_)
    if (n == name) return v;
  throw InvalidState("no parameter named " + name);
}

void ParamStore::zero_grad() {
  for (auto& [_, v] : params_) v.zero_grad();
}

std::vector<double> ParamStore::flatten() const {
  std::vector<double> flat;
  flat.reserve(scalar_count());
  for (const auto& [_, v] : params_) flat.insert(flat.end(), v.value().storage().begin(), v.value().storage().end());
  return flat;
}

void ParamStore::assign(const std::vector<double>& flat) {
  if (flat.size() != scalar_count()) throw InvalidState("assign: flat parameter vector has wrong length");
  std::size_t off = 0;
  for (auto& [_, v] : params_) {
    auto& dst = v.mutable_value().storage();
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), dst.size(), dst.begin());
    off += dst.size();
  }
}

void ParamStore::copy_from(const ParamStore& other) {
  if (other.params_.size() != params_.size()) throw InvalidState("copy_from: parameter count mismatch");
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].first != other.params_[i].first || params_[i].second.shape() != other.params_[i].second.shape())
      throw InvalidState("copy_from: parameter layout mismatch at " + params_[i].first);
    params_[i].second.mutable_value() = other.params_[i].second.value();
  }
}

bool ParamStore::all_finite() const {
  for (const auto& [_, v] : params_)
    if (!v.value().all_finite()) return false;
  return true;
}

Tensor he_normal(Shape shape, int fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double sd = std::sqrt(2.0 / std::max(fan_in, 1));
  for (double& v : t.values()) v = normal(rng, 0.0, sd);
  return t;
}

Linear::Linear(ParamStore& ps, const std::string& name, int in, int out, Rng& rng, bool bias) {
  w = ps.add(name + ".w", he_normal({in, out}, in, rng));
  if (bias) b = ps.add(name + ".b", Tensor({out}, 0.0));
}

ag::Var Linear::operator()(const ag::Var& x) const { return ag::linear(x, w, b); }

Conv2d::Conv2d(ParamStore& ps, const std::string& name, int in, int out, int k, int s, int p, Rng& rng)
    : stride(s), pad(p) {
  w = ps.add(name + ".w", he_normal({out, in, k, k}, in * k * k, rng));
  b = ps.add(name + ".b", Tensor({out}, 0.0));
}

ag::Var Conv2d::operator()(const ag::Var& x) const { return ag::conv2d(x, w, b, stride, pad); }

std::vector<double> sinusoidal_encoding(double position, int dim) {
  std::vector<double> e(static_cast<std::size_t>(dim));
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / std::max(half, 1));
    e[2 * i] = std::sin(position * freq);
    e[2 * i + 1] = std::cos(position * freq);
  }
  return e;
}

Sgd::Sgd(ParamStore& params, SgdConfig cfg) : params_(params), cfg_(cfg) {
  for (const auto& [_, v] : params_.items()) velocity_.emplace_back(v.shape(), 0.0);
}

void Sgd::step() {
  std::size_t i = 0;
  for (const auto& [_, v] : params_.items()) {
    Tensor& vel = velocity_[i++];
    if (!v.has_grad()) continue;
    Tensor& w = v.mutable_value();
    const Tensor& g = v.grad();
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double gk = g[k] + cfg_.weight_decay * w[k];
      vel[k] = cfg_.momentum * vel[k] + gk;
      w[k] -= cfg_.lr * vel[k];
    }
  }
}

Adam::Adam(ParamStore& params, AdamConfig cfg) : params_(params), cfg_(cfg) {
  for (const auto& [_, v] : params_.items()) {
    m_.emplace_back(v.shape(), 0.0);
    v_.emplace_back(v.shape(), 0.0);
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  std::size_t i = 0;
  for (const auto& [_, p] : params_.items()) {
    Tensor& m = m_[i];
    Tensor& v = v_[i];
    ++i;
    if (!p.has_grad()) continue;
    Tensor& w = p.mutable_value();
    const Tensor& g = p.grad();
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * g[k];
      v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * g[k] * g[k];
      const double upd = (m[k] / bc1) / (std::sqrt(v[k] / bc2) + cfg_.eps);
      w[k] -= cfg_.lr * (upd + cfg_.weight_decay * w[k]);
    }
  }
}

Optimizer::Optimizer(ParamStore& params, const std::string& kind, double lr, double momentum, double weight_decay) {
  if (kind == "sgd") {
    sgd_ = std::make_unique<Sgd>(params, SgdConfig{lr, momentum, weight_decay});
  } else if (kind == "adam") {
    adam_ = std::make_unique<Adam>(params, AdamConfig{lr, 0.9, 0.999, 1e-8, weight_decay});
  } else {
    throw InvalidArgument("unknown optimizer '" + kind + "' (expected sgd or adam)");
  }
}

void Optimizer::step() { sgd_ ? sgd_->step() : adam_->step(); }

void Optimizer::set_lr(double lr) { sgd_ ? sgd_->set_lr(lr) : adam_->set_lr(lr); }

double clip_grad_norm(ParamStore& params, double max_norm) {
  double sq = 0.0;
  for (const auto& [_, v] : params.items())
    if (v.has_grad())
      for (double g : v.grad().values()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double s = max_norm / norm;
    for (const auto& [_, v] : params.items())
      if (v.has_grad()) v.mutable_grad() *= s;
  }
  return norm;
}

void Checkpoint::add_store(const std::string& prefix, const ParamStore& ps) {
  for (const auto& [name, v] : ps.items()) tensors.emplace_back(prefix + name, v.value());
}

void Checkpoint::load_store(const std::string& prefix, ParamStore& ps) const {
  for (const auto& [name, v] : ps.items()) {
    const Tensor& t = tensor(prefix + name);
    if (t.shape() != v.shape()) {
      throw InvalidState("checkpoint tensor " + prefix + name + " has shape " + shape_str(t.shape()) +
                         ", model expects " + shape_str(v.shape()));
    }
    v.mutable_value() = t;
  }
}

const std::string& Checkpoint::get(const std::string& key) const {
  auto it = meta.find(key);
  if (it == meta.end()) throw InvalidState("checkpoint has no metadata key " + key);
  return it->second;
}

const Tensor& Checkpoint::tensor(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  throw InvalidState("checkpoint has no tensor " + name);
}

namespace {

constexpr char kMagic[8] = {'D', 'S', 'Y', 'M', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), sizeof v); }
void put_str(std::ostream& os, const std::string& s) {
  put_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::uint32_t get_u32(std::istream& is, const std::string& path) {
  std::uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw IoError(path, "truncated checkpoint");
  return v;
}
std::string get_str(std::istream& is, const std::string& path) {
  const auto n = get_u32(is, path);
  if (n > (1u << 24)) throw IoError(path, "corrupt string length in checkpoint");
  std::string s(n, '\0');
  if (!is.read(s.data(), n)) throw IoError(path, "truncated checkpoint");
  return s;
}

}  // namespace

void Checkpoint::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError(path, "cannot open for writing");
  os.write(kMagic, sizeof kMagic);
  put_u32(os, kVersion);
  put_u32(os, static_cast<std::uint32_t>(meta.size()));
  for (const auto& [k, v] : meta) {
    put_str(os, k);
    put_str(os, v);
  }
  put_u32(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    put_str(os, name);
    put_u32(os, static_cast<std::uint32_t>(t.ndim()));
    for (int d : t.shape()) put_u32(os, static_cast<std::uint32_t>(d));
    os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  if (!os) throw IoError(path, "write failed");
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError(path, "cannot open checkpoint");
  char magic[8];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof magic) != 0)
    throw IoError(path, "not a DSYM checkpoint");
  if (get_u32(is, path) != kVersion) throw IoError(path, "unsupported checkpoint version");
  Checkpoint ck;
  const auto nmeta = get_u32(is, path);
  for (std::uint32_t i = 0; i < nmeta; ++i) {
    auto k = get_str(is, path);
    ck.meta[k] = get_str(is, path);
  }
  const auto nt = get_u32(is, path);
  for (std::uint32_t i = 0; i < nt; ++i) {
    auto name = get_str(is, path);
    const auto nd = get_u32(is, path);
    if (nd > 8) throw IoError(path, "corrupt tensor rank");
    Shape shape;
    for (std::uint32_t d = 0; d < nd; ++d) shape.push_back(static_cast<int>(get_u32(is, path)));
    Tensor t(shape);
    if (!is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double))))
      throw IoError(path, "truncated tensor " + name);
    ck.tensors.emplace_back(std::move(name), std::move(t));
  }
  return ck;
}

}  // namespace dsym::nn
