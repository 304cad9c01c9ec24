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

#include <cmath>
#include <filesystem>
#include <limits>

#include "dsym/detector.hpp"
#include "dsym/errors.hpp"
#include "eval_oracle.hpp"
#include "gradcheck.hpp"
#include "ssm_oracle.hpp"

using namespace dsym;
using namespace dsym::det;
using dsym::testing::check_gradients;

namespace {

Tensor randn(Shape shape, Rng& rng, double sd = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = normal(rng, 0.0, sd);
  return t;
}

ag::Var leaf(Shape shape, Rng& rng, double sd = 1.0) { return ag::Var(randn(std::move(shape), rng, sd), true); }

ag::Var probe(const ag::Var& y, std::uint64_t seed) {
  Rng rng(seed);
  return ag::sum(ag::mul(y, ag::constant(randn(y.shape(), rng))));
}

DetectorConfig stub_config() {
  DetectorConfig c;
  c.width = 4;
  c.state_dim = 3;
  c.bins = 2;
  c.num_classes = 2;
  return c;
}

}  // namespace

TEST_CASE("scalar scan is a cumulative sum") {
  SSMParams p{Tensor({1, 1}, 1.0), Tensor({1, 1}, 1.0), Tensor({1, 1}, 1.0), Tensor({1, 1}, 0.0)};
  Tensor x({3, 1}, 1.0);
  for (const auto& y : {ssm_scan(x, p), ssm_scan_parallel(x, p)}) {
    CHECK(y[0] == doctest::Approx(1.0));
    CHECK(y[1] == doctest::Approx(2.0));
    CHECK(y[2] == doctest::Approx(3.0));
  }
  auto with_h0 = ssm_scan(x, p, {10.0});
  CHECK(with_h0[0] == doctest::Approx(11.0));
}

TEST_CASE("zero state matrix gives a memoryless map") {
  Rng rng(1);
  SSMParams p{Tensor({3, 3}), randn({3, 4}, rng), randn({4, 3}, rng), randn({4, 4}, rng)};
  Tensor x = randn({5, 4}, rng);
  auto y = ssm_scan(x, p);
  for (int t = 0; t < 5; ++t)
    for (int i = 0; i < 4; ++i) {
      double want = 0.0;
      for (int j = 0; j < 4; ++j) {
        double cb = p.D_skip.at(i, j);
        for (int k = 0; k < 3; ++k) cb += p.C.at(i, k) * p.B.at(k, j);
        want += cb * x.at(t, j);
      }
      CHECK(y.at(t, i) == doctest::Approx(want).epsilon(1e-12));
    }
}

TEST_CASE("sequential scan matches the direct recurrence oracle") {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    auto inst = testing::random_ssm(rng, 6, 10, 30);
    CHECK(max_abs_diff(ssm_scan(inst.x, inst.p, inst.h0), testing::direct_scan(inst.x, inst.p, inst.h0)) < 1e-10);
  }
}

TEST_CASE("parallel scan agrees with the sequential scan") {
  Rng rng(3);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    auto inst = testing::random_ssm(rng, 8, 16, 64);
    worst = std::max(worst, max_abs_diff(ssm_scan(inst.x, inst.p, inst.h0), ssm_scan_parallel(inst.x, inst.p, inst.h0)));
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("scan input validation") {
  SSMParams p{Tensor({2, 2}), Tensor({2, 3}), Tensor({3, 2}), Tensor({3, 3})};
  Tensor x({4, 3});
  x[5] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(ssm_scan(x, p), InvalidArgument);
  CHECK_THROWS_AS(ssm_scan(Tensor({4, 2}), p), InvalidArgument);
  CHECK_THROWS_AS(ssm_scan(Tensor({2, 3}), p, {1.0}), InvalidArgument);
}

TEST_CASE("differentiable scan: values and gradients") {
  Rng rng(4);
  auto u = leaf({10, 3}, rng);
  auto A = leaf({2, 2}, rng, 0.4);
  auto B = leaf({2, 3}, rng);
  auto C = leaf({3, 2}, rng);
  auto D = leaf({3, 3}, rng);
  auto y = ops::ssm_scan(u, A, B, C, D, 5);
  SSMParams p{A.value(), B.value(), C.value(), D.value()};
  for (int s = 0; s < 2; ++s) {
    Tensor xs({5, 3});
    std::copy_n(u.value().data() + s * 15, 15, xs.data());
    Tensor ys = ssm_scan(xs, p);
    for (int i = 0; i < 15; ++i) CHECK(y.value()[static_cast<std::size_t>(s * 15 + i)] == doctest::Approx(ys[static_cast<std::size_t>(i)]));
  }
  auto r = check_gradients([&] { return probe(ops::ssm_scan(u, A, B, C, D, 5), 11); }, {u, A, B, C, D});
  CHECK(r.rel_error < 1e-7);
}

TEST_CASE("dfl decode examples") {
  Tensor onehot({1, 36}, 0.0);
  for (int side = 0; side < 4; ++side) onehot.at(0, side * 9 + 2) = 1000.0;
  auto b = dfl_decode(onehot, {{32.0, 32.0}}, 8, 8, 64);
  CHECK(b[0].x1 == doctest::Approx(16.0));
  CHECK(b[0].y1 == doctest::Approx(16.0));
  CHECK(b[0].x2 == doctest::Approx(48.0));
  CHECK(b[0].y2 == doctest::Approx(48.0));

  auto u = dfl_decode(Tensor({1, 36}, 0.3), {{100.0, 100.0}}, 1, 8, 1000);
  CHECK(u[0].x1 == doctest::Approx(96.0));
  CHECK(u[0].x2 == doctest::Approx(104.0));

  auto e = ops::expected_distance(ag::constant(Tensor({2, 36}, 0.0)), 8);
  for (double v : e.value().values()) CHECK(v == doctest::Approx(4.0));
}

TEST_CASE("dfl decode against direct expectation sums") {
  Rng rng(5);
  const int m = 8, s = 8;
  Tensor logits = randn({20, 4 * (m + 1)}, rng, 2.0);
  std::vector<std::array<double, 2>> anchors;
  for (int i = 0; i < 20; ++i) anchors.push_back({uniform(rng, 100, 900), uniform(rng, 100, 900)});
  auto boxes = dfl_decode(logits, anchors, s, m, 100000);
  for (int r = 0; r < 20; ++r) {
    std::array<double, 4> d{};
    for (int side = 0; side < 4; ++side) {
      double z = 0.0, acc = 0.0;
      for (int k = 0; k <= m; ++k) z += std::exp(logits.at(r, side * (m + 1) + k));
      for (int k = 0; k <= m; ++k) acc += k * std::exp(logits.at(r, side * (m + 1) + k)) / z;
      d[static_cast<std::size_t>(side)] = acc;
      CHECK(acc >= 0.0);
      CHECK(acc <= m);
    }
    const auto& b = boxes[static_cast<std::size_t>(r)];
    const auto& a = anchors[static_cast<std::size_t>(r)];
    CHECK(std::abs(b.x1 - (a[0] - d[0] * s)) < 1e-9);
    CHECK(std::abs(b.y1 - (a[1] - d[1] * s)) < 1e-9);
    CHECK(std::abs(b.x2 - (a[0] + d[2] * s)) < 1e-9);
    CHECK(std::abs(b.y2 - (a[1] + d[3] * s)) < 1e-9);
  }
  auto clamped = dfl_decode(Tensor({1, 36}, 0.0), {{2.0, 62.0}}, 8, 8, 64);
  CHECK(clamped[0].x1 == 0.0);
  CHECK(clamped[0].y2 == 64.0);
}

TEST_CASE("classification probabilities") {
  Tensor c({3}, 0.0);
  c[1] = 800.0;
  c[2] = -800.0;
  auto p = classify(c);
  CHECK(p[0] == 0.5);
  CHECK(p[1] == 1.0);
  CHECK(p[2] >= 0.0);
  Rng rng(6);
  Tensor r = randn({100}, rng, 5.0);
  Tensor neg = r;
  neg *= -1.0;
  auto pr = classify(r), pn = classify(neg);
  for (std::size_t i = 0; i < 100; ++i) CHECK(std::abs(pr[i] + pn[i] - 1.0) < 1e-12);
}

TEST_CASE("head bias initialization") {
  CHECK(init_head_bias(6, 8) == doctest::Approx(-0.2877).epsilon(1e-4));
  CHECK(init_head_bias(6, 16) == doctest::Approx(-0.9808).epsilon(1e-4));
  CHECK(init_head_bias(7, 7) == 0.0);
  CHECK_THROWS_AS(init_head_bias(0, 8), InvalidArgument);
  CHECK_THROWS_AS(init_head_bias(6, 0), InvalidArgument);

  Detector det(DetectorConfig{}, 1);
  Rng rng(7);
  auto img = synth::generate_sample(synth::DefectClass::kPatches, 3);
  ag::NoGradGuard g;
  auto out = det.forward(ag::constant(images_to_tensor({&img.image})));
  const Tensor p = classify(out.levels[0].cls.value());
  double mean = 0.0;
  for (double v : p.values()) mean += v;
  mean /= static_cast<double>(p.size());
  CHECK(mean == doctest::Approx(0.75 / 1.75).epsilon(1e-9));
}

TEST_CASE("head shapes and zero-input response") {
  for (bool mamba : {true, false}) {
    DetectorConfig cfg;
    cfg.use_mamba = mamba;
    Detector det(cfg, 2);
    Rng rng(8);
    auto feats = det.features(ag::constant(randn({2, 1, 64, 64}, rng)));
    REQUIRE(feats.size() == 2);
    CHECK(feats[0].shape() == Shape{2, 32, 8, 8});
    CHECK(feats[1].shape() == Shape{2, 32, 4, 4});
    auto out = det.head(feats);
    CHECK(out.levels[0].h == 8);
    CHECK(out.levels[1].w == 4);
    CHECK(out.levels[0].box.shape() == Shape{128, 36});
    CHECK(out.levels[1].cls.shape() == Shape{32, 6});
    CHECK(out.levels[1].obj.shape() == Shape{32, 1});

    auto zero = det.head({ag::constant(Tensor({1, 32, 8, 8})), ag::constant(Tensor({1, 32, 4, 4}))});
    for (std::size_t li = 0; li < 2; ++li) {
      const double b = init_head_bias(6, kStrides[li]);
      for (double v : zero.levels[li].cls.value().values()) CHECK(v == doctest::Approx(b));
      for (double v : zero.levels[li].obj.value().values()) CHECK(v == doctest::Approx(-2.0));
      for (double v : zero.levels[li].box.value().values()) CHECK(v == 0.0);
    }
    CHECK_THROWS_AS(det.head({ag::constant(Tensor({1, 16, 8, 8})), ag::constant(Tensor({1, 32, 4, 4}))}),
                    InvalidState);
  }
}

TEST_CASE("head gradients on a small stub") {
  Detector det(stub_config(), 3);
  Rng rng(9);
  auto f0 = leaf({1, 4, 4, 4}, rng);
  auto f1 = leaf({1, 4, 2, 2}, rng);
  for (auto& [name, v] : det.params().items())
    if (name.rfind("head", 0) == 0)
      for (double& x : v.mutable_value().values()) x += normal(rng, 0.0, 0.1);
  std::vector<ag::Var> leaves{f0, f1};
  std::size_t n_params = 0;
  for (auto& [name, v] : det.params().items())
    if (name.rfind("head", 0) == 0) {
      leaves.push_back(v);
      n_params += v.size();
    }
  CHECK(n_params <= 1000);
  auto loss = [&] {
    auto out = det.head({f0, f1});
    std::vector<ag::Var> t;
    for (std::size_t li = 0; li < 2; ++li) {
      t.push_back(probe(out.levels[li].box, 10 + li));
      t.push_back(probe(out.levels[li].cls, 20 + li));
      t.push_back(probe(out.levels[li].obj, 30 + li));
    }
    return ag::add_n(t);
  };
  auto r = check_gradients(loss, leaves);
  CHECK(r.rel_error < 1e-4);

  // Summed output w.r.t. the state matrix entries alone.
  auto A0 = det.params().find("head0.ssm.A");
  auto ra = check_gradients(
      [&] {
        auto out = det.head({f0, f1});
        return ag::add(ag::sum(out.levels[0].box), ag::sum(out.levels[0].cls));
      },
      {A0});
  CHECK(ra.rel_error < 1e-4);
}

TEST_CASE("box loss primitives") {
  Rng rng(10);
  auto logits = leaf({5, 4 * 9}, rng);
  Tensor target({5, 4});
  for (double& v : target.values()) v = uniform(rng, 0.1, 7.8);
  auto r1 = check_gradients([&] { return ops::dfl_loss(logits, target, 8); }, {logits});
  CHECK(r1.rel_error < 1e-7);
  auto r2 = check_gradients([&] { return probe(ops::expected_distance(logits, 8), 3); }, {logits});
  CHECK(r2.rel_error < 1e-7);

  auto pred = ag::Var(Tensor({5, 4}), true);
  for (double& v : pred.mutable_value().values()) v = uniform(rng, 0.5, 5.0);
  auto r3 = check_gradients([&] { return ops::ltrb_iou_loss(pred, target); }, {pred});
  CHECK(r3.rel_error < 1e-6);

  // Same anchor, so corners are anchor -/+ distances.
  const double got = ops::ltrb_iou_loss(pred, target).item();
  double want = 0.0;
  for (int r = 0; r < 5; ++r) {
    const auto& p = pred.value();
    synth::BBox a = synth::BBox::from_corners(-p.at(r, 0), -p.at(r, 1), p.at(r, 2), p.at(r, 3), 1, 1);
    synth::BBox b = synth::BBox::from_corners(-target.at(r, 0), -target.at(r, 1), target.at(r, 2), target.at(r, 3), 1, 1);
    want += 1.0 - testing::corner_iou(a, b);
  }
  CHECK(got == doctest::Approx(want).epsilon(1e-9));

  // A perfectly concentrated distribution at the two-hot target has the
  // two-point entropy as its loss; exact integers give zero.
  Tensor exact({1, 4}, 3.0);
  Tensor sharp({1, 36}, -1000.0);
  for (int side = 0; side < 4; ++side) sharp.at(0, side * 9 + 3) = 0.0;
  CHECK(ops::dfl_loss(ag::constant(sharp), exact, 8).item() == doctest::Approx(0.0));
}

TEST_CASE("center-in-box assignment") {
  Detector det(DetectorConfig{}, 4);
  HeadOutput out;
  out.batch = 1;
  out.levels = {{ag::Var(), ag::Var(), ag::Var(), 8, 8, 8}, {ag::Var(), ag::Var(), ag::Var(), 4, 4, 16}};
  using synth::Annotation;
  using synth::BBox;
  using synth::DefectClass;
  // Box [16,32) x [16,32) covers stride-8 anchors at 20 and 28 (2x2) and no
  // stride-16 anchor (centers at 8, 24, ...: 24 is inside).
  Annotation a{DefectClass::kInclusion, BBox::from_corners(16, 16, 32, 32, 64, 64)};
  auto as = det.assign(out, {{a}});
  int l0 = 0, l1 = 0;
  for (int lv : as.level) (lv == 0 ? l0 : l1)++;
  CHECK(l0 == 4);
  CHECK(l1 == 1);
  for (std::size_t k = 0; k < as.row.size(); ++k) {
    CHECK(as.cls[k] == 1);
    for (double d : as.ltrb[k]) CHECK(d >= 0.0);
  }
  // Tiny box between anchors falls back to the nearest stride-8 anchor.
  Annotation tiny{DefectClass::kScratches, BBox::from_corners(1, 1, 3, 3, 64, 64)};
  auto fb = det.assign(out, {{tiny}});
  REQUIRE(fb.row.size() == 1);
  CHECK(fb.level[0] == 0);
  CHECK(fb.row[0] == 0);
  CHECK(fb.obj_target[0][0] == 1.0);
  // Overlap: anchor goes to the nearer center.
  Annotation big{DefectClass::kPatches, BBox::from_corners(0, 0, 64, 64, 64, 64)};
  Annotation small{DefectClass::kCrazing, BBox::from_corners(16, 16, 26, 26, 64, 64)};
  auto ov = det.assign(out, {{big, small}});
  for (std::size_t k = 0; k < ov.row.size(); ++k)
    if (ov.level[k] == 0 && ov.row[k] == 2 * 8 + 2) CHECK(ov.cls[k] == 0);
}

TEST_CASE("non-maximum suppression") {
  using synth::BBox;
  Detection a{BBox{0.5, 0.5, 0.2, 0.2}, synth::DefectClass::kPatches, 0.8, 0};
  Detection b = a;
  b.score = 0.9;
  b.id = 1;
  auto kept = nms({a, b}, 0.5);
  REQUIRE(kept.size() == 1);
  CHECK(kept[0].score == 0.9);
  Detection c = a;
  c.cls = synth::DefectClass::kCrazing;
  CHECK(nms({a, b, c}, 0.5).size() == 2);

  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Detection> dets;
    for (int i = 0; i < 50; ++i) {
      Detection d;
      d.box = testing::random_box(rng);
      d.cls = synth::class_from_id(uniform_int(rng, 0, 1));
      d.score = uniform(rng, 0, 1);
      d.id = i;
      dets.push_back(d);
    }
    auto got = nms(dets, 0.3);
    // Oracle: rank all boxes, then keep i iff no kept higher-ranked box of its
    // class overlaps it above the threshold, using a full IoU matrix.
    std::vector<int> order(50);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int x, int y) { return dets[static_cast<std::size_t>(x)].score > dets[static_cast<std::size_t>(y)].score; });
    std::vector<std::vector<double>> m(50, std::vector<double>(50));
    for (int i = 0; i < 50; ++i)
      for (int j = 0; j < 50; ++j)
        m[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = testing::corner_iou(dets[static_cast<std::size_t>(i)].box, dets[static_cast<std::size_t>(j)].box);
    std::vector<bool> keep(50, false);
    std::vector<int> want;
    for (std::size_t r = 0; r < order.size(); ++r) {
      const int i = order[r];
      bool ok = true;
      for (std::size_t q = 0; q < r; ++q) {
        const int j = order[q];
        if (keep[static_cast<std::size_t>(j)] && dets[static_cast<std::size_t>(j)].cls == dets[static_cast<std::size_t>(i)].cls &&
            m[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] > 0.3)
          ok = false;
      }
      keep[static_cast<std::size_t>(i)] = ok;
      if (ok) want.push_back(i);
    }
    REQUIRE(got.size() == want.size());
    for (std::size_t k = 0; k < want.size(); ++k) CHECK(got[k].id == want[k]);
  }
}

TEST_CASE("detect thresholds, ordering and checkpoint round trip") {
  Detector det(DetectorConfig{}, 5);
  auto s = synth::generate_sample(synth::DefectClass::kScratches, 9);
  CHECK(det.detect(s.image, 1.0).empty());
  auto dets = det.detect(s.image, 0.01);
  CHECK_FALSE(dets.empty());
  CHECK(dets.size() <= 100);
  for (std::size_t i = 1; i < dets.size(); ++i) CHECK(dets[i].score <= dets[i - 1].score);
  for (const auto& d : dets) {
    CHECK(d.score > 0.01);
    CHECK(d.box.x1(64) >= -1e-9);
    CHECK(d.box.x2(64) <= 64 + 1e-9);
  }

  const auto path = std::filesystem::current_path() / "detector_test.ckpt";
  det.save(path);
  auto back = Detector::load(path);
  auto again = back.detect(s.image, 0.01);
  REQUIRE(again.size() == dets.size());
  for (std::size_t i = 0; i < dets.size(); ++i) CHECK(again[i].score == dets[i].score);
  std::filesystem::remove(path);

  auto copy = det.clone();
  copy.params().items()[0].second.mutable_value().fill(0.0);
  CHECK(det.params().items()[0].second.value().storage() != copy.params().items()[0].second.value().storage());
}

TEST_CASE("spectral projection") {
  Detector det(DetectorConfig{}, 6);
  for (int l = 0; l < 2; ++l) CHECK(spectral_radius(det.ssm_params(l).A) <= 1.0);
  det.params().find("head0.ssm.A").mutable_value() *= 3.0;
  CHECK(det.project_stable(1.0));
  CHECK(spectral_radius(det.ssm_params(0).A) == doctest::Approx(1.0));
  CHECK_FALSE(det.project_stable(1.0 + 1e-9));
}

TEST_CASE("training steps reduce the detection loss") {
  Detector det(DetectorConfig{}, 7);
  std::vector<synth::ImageSample> batch;
  for (int i = 0; i < 4; ++i) batch.push_back(synth::generate_sample(synth::class_from_id(i), 100 + i));
  std::vector<const Image*> imgs;
  std::vector<std::vector<synth::Annotation>> tg;
  for (const auto& s : batch) {
    imgs.push_back(&s.image);
    tg.push_back(s.annotations);
  }
  const Tensor x = images_to_tensor(imgs);
  nn::Optimizer opt(det.params(), "adam", 2e-3, 0.9, 0.0);
  double first = 0.0, last = 0.0;
  for (int step = 0; step < 30; ++step) {
    det.params().zero_grad();
    auto lb = det.loss(det.forward(ag::constant(x)), tg);
    if (step == 0) first = lb.total.item();
    last = lb.total.item();
    CHECK(lb.positives > 0);
    lb.total.backward();
    opt.step();
  }
  CHECK(last < 0.7 * first);
}
