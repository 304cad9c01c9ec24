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

// Micro benchmarks of the hot paths: convolution, state-space scans,
// detector forward, one DDIM sample, AP evaluation and crop embedding.

#include <benchmark/benchmark.h>

#include "dsym/clipfilter.hpp"
#include "dsym/detector.hpp"
#include "dsym/diffusion.hpp"
#include "dsym/eval.hpp"
#include "dsym/ops.hpp"

using namespace dsym;

namespace {

Tensor randn(Shape shape, Rng& rng, double sd = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = normal(rng, 0.0, sd);
  return t;
}

std::vector<synth::ImageSample> samples(int n) {
  std::vector<synth::ImageSample> out;
  for (int i = 0; i < n; ++i)
    out.push_back(synth::generate_sample(synth::class_from_id(i % synth::kNumClasses),
                                         derive_seed(7, {static_cast<std::uint64_t>(i)})));
  return out;
}

void BM_Conv2dForwardBackward(benchmark::State& state) {
  const int C = static_cast<int>(state.range(0));
  Rng rng(1);
  const ag::Var x(randn({8, C, 32, 32}, rng), true);
  const ag::Var w(randn({C, C, 3, 3}, rng, 0.1), true);
  const ag::Var b(randn({C}, rng), true);
  for (auto _ : state) {
    auto y = ag::sum(ag::conv2d(x, w, b, 1, 1));
    y.backward();
    benchmark::DoNotOptimize(w.grad());
  }
}
BENCHMARK(BM_Conv2dForwardBackward)->Arg(8)->Arg(32)->Unit(benchmark::kMillisecond);

det::SSMParams ssm(int N, int D, Rng& rng) {
  det::SSMParams p{randn({N, N}, rng, 0.3 / N), randn({N, D}, rng, 0.3), randn({D, N}, rng, 0.3),
                   randn({D, D}, rng, 0.1)};
  return p;
}

void BM_SsmScanSequential(benchmark::State& state) {
  Rng rng(2);
  const auto p = ssm(16, 32, rng);
  const Tensor x = randn({static_cast<int>(state.range(0)), 32}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(det::ssm_scan(x, p));
}
BENCHMARK(BM_SsmScanSequential)->Arg(64)->Arg(256);

void BM_SsmScanParallel(benchmark::State& state) {
  Rng rng(2);
  const auto p = ssm(16, 32, rng);
  const Tensor x = randn({static_cast<int>(state.range(0)), 32}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(det::ssm_scan_parallel(x, p));
}
BENCHMARK(BM_SsmScanParallel)->Arg(64)->Arg(256);

void BM_DetectorDetect(benchmark::State& state) {
  det::DetectorConfig cfg;
  const det::Detector model(cfg, 3);
  const auto xs = samples(static_cast<int>(state.range(0)));
  std::vector<const Image*> ims;
  for (const auto& s : xs) ims.push_back(&s.image);
  for (auto _ : state) benchmark::DoNotOptimize(model.detect(ims, 0.01));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_DetectorDetect)->Arg(1)->Arg(16)->Unit(benchmark::kMillisecond);

void BM_DdimSample(benchmark::State& state) {
  const auto sched = diff::make_schedule();
  const diff::Denoiser net(diff::DenoiserConfig{}, 4);
  const auto xs = samples(1);
  const std::vector<diff::ConditionInput> cond{diff::condition_from_sample(xs.front())};
  for (auto _ : state) benchmark::DoNotOptimize(diff::ddim_sample(net, cond, sched, static_cast<int>(state.range(0)), 5));
}
BENCHMARK(BM_DdimSample)->Arg(20)->Unit(benchmark::kMillisecond);

void BM_AveragePrecision(benchmark::State& state) {
  Rng rng(9);
  std::vector<eval::EvalImage> images;
  for (int i = 0; i < 100; ++i) {
    eval::EvalImage im;
    for (int g = 0; g < 3; ++g)
      im.gts.push_back({synth::class_from_id(g % 2), {uniform(rng, 0.2, 0.8), uniform(rng, 0.2, 0.8), 0.2, 0.2}});
    for (int d = 0; d < static_cast<int>(state.range(0)); ++d)
      im.dets.push_back({{uniform(rng, 0.2, 0.8), uniform(rng, 0.2, 0.8), 0.2, 0.2},
                         synth::class_from_id(d % 2),
                         uniform(rng, 0, 1),
                         i * 1000 + d});
    images.push_back(std::move(im));
  }
  for (auto _ : state) benchmark::DoNotOptimize(eval::average_precision(images, synth::DefectClass::kCrazing));
}
BENCHMARK(BM_AveragePrecision)->Arg(10)->Arg(100);

void BM_EncoderScore(benchmark::State& state) {
  const clip::ContrastiveEncoder enc(clip::EncoderConfig{}, 2);
  const auto xs = samples(8);
  for (auto _ : state)
    for (const auto& s : xs) benchmark::DoNotOptimize(enc.score(s.image, s.annotations.front().box, s.annotations.front().cls));
  state.SetItemsProcessed(state.iterations() * 8);
}
BENCHMARK(BM_EncoderScore)->Unit(benchmark::kMicrosecond);

}  // namespace

BENCHMARK_MAIN();
