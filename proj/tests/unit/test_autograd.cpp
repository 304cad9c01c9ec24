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
#include <cstdio>

#include "dsym/errors.hpp"
#include "dsym/nn.hpp"
#include "dsym/ops.hpp"
#include "gradcheck.hpp"

using namespace dsym;
using dsym::testing::check_gradients;

namespace {

ag::Var random_leaf(Shape shape, Rng& rng, double sd = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = normal(rng, 0.0, sd);
  return ag::Var(std::move(t), true);
}

Tensor random_tensor(Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = normal(rng);
  return t;
}

/// Weighted sum with fixed random weights so every output element matters.
ag::Var probe(const ag::Var& y, std::uint64_t seed) {
  Rng rng(seed);
  return ag::sum(ag::mul(y, ag::constant(random_tensor(y.shape(), rng))));
}

}  // namespace

TEST_CASE("elementwise ops match finite differences") {
  Rng rng(1);
  auto a = random_leaf({3, 4}, rng);
  auto b = random_leaf({3, 4}, rng);
  auto r = check_gradients(
      [&] {
        auto y = ag::add(ag::mul(ag::silu(a), ag::tanh(b)), ag::sub(ag::sigmoid(a), ag::scale(ag::square(b), 0.3)));
        y = ag::add(y, ag::exp(ag::scale(a, 0.2)));
        y = ag::add(y, ag::log(ag::add_scalar(ag::square(b), 1.0)));
        return probe(y, 7);
      },
      {a, b});
  CHECK(r.rel_error < 1e-7);
}

TEST_CASE("matmul, bias, transpose, softmax and normalization gradients") {
  Rng rng(2);
  auto x = random_leaf({5, 3}, rng);
  auto w = random_leaf({3, 4}, rng);
  auto b = random_leaf({4}, rng);
  auto r = check_gradients(
      [&] {
        auto h = ag::linear(x, w, b);
        auto s = ag::softmax_rows(h);
        auto l = ag::log_softmax_rows(ag::transpose(h));
        auto n = ag::l2_normalize_rows(h);
        return ag::add_n({probe(s, 1), probe(l, 2), probe(n, 3), probe(ag::mean_rows(h), 4),
                          probe(ag::broadcast_rows(ag::mean_rows(h), 2), 5)});
      },
      {x, w, b});
  CHECK(r.rel_error < 1e-7);
}

TEST_CASE("row and column plumbing gradients") {
  Rng rng(3);
  auto a = random_leaf({4, 3}, rng);
  auto b = random_leaf({2, 3}, rng);
  auto c = random_leaf({4, 2}, rng);
  auto r = check_gradients(
      [&] {
        auto rows = ag::concat_rows({a, b});
        auto cols = ag::concat_cols({a, c});
        auto g = ag::gather_rows(rows, {0, 5, 5, 2});
        return ag::add_n({probe(rows, 1), probe(ag::slice_cols(cols, 1, 4), 2), probe(g, 3),
                          probe(ag::reshape(a, {2, 6}), 4)});
      },
      {a, b, c});
  CHECK(r.rel_error < 1e-7);
}

TEST_CASE("conv2d gradients over strides and padding") {
  Rng rng(4);
  for (auto [k, stride, pad] : {std::tuple{3, 1, 1}, std::tuple{3, 2, 1}, std::tuple{1, 1, 0}, std::tuple{2, 2, 0}}) {
    auto x = random_leaf({2, 3, 6, 5}, rng);
    auto w = random_leaf({4, 3, k, k}, rng, 0.5);
    auto b = random_leaf({4}, rng);
    auto r = check_gradients([&] { return probe(ag::conv2d(x, w, b, stride, pad), 9); }, {x, w, b});
    CAPTURE(k);
    CAPTURE(stride);
    CHECK(r.rel_error < 1e-7);
  }
}

TEST_CASE("conv2d matches direct convolution") {
  Rng rng(5);
  Tensor x = random_tensor({1, 2, 5, 5}, rng);
  Tensor w = random_tensor({3, 2, 3, 3}, rng);
  auto y = ag::conv2d(ag::constant(x), ag::constant(w), ag::Var(), 2, 1).value();
  REQUIRE(y.shape() == Shape{1, 3, 3, 3});
  for (int o = 0; o < 3; ++o)
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double s = 0.0;
        for (int c = 0; c < 2; ++c)
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              const int yy = i * 2 - 1 + ky, xx = j * 2 - 1 + kx;
              if (yy >= 0 && yy < 5 && xx >= 0 && xx < 5) s += w.at(o, c, ky, kx) * x.at(0, c, yy, xx);
            }
        CHECK(y.at(0, o, i, j) == doctest::Approx(s).epsilon(1e-12));
      }
}

TEST_CASE("image plumbing gradients") {
  Rng rng(6);
  auto x = random_leaf({2, 3, 4, 4}, rng);
  auto z = random_leaf({2, 2, 4, 4}, rng);
  auto g = random_leaf({2, 3}, rng);
  auto be = random_leaf({2, 3}, rng);
  auto r = check_gradients(
      [&] {
        auto up = ag::upsample2x(x);
        auto cat = ag::concat_channels(x, z);
        auto rows = ag::nchw_to_rows(cat);
        auto back = ag::rows_to_nchw(rows, 2, 4, 4);
        return ag::add_n({probe(up, 1), probe(back, 2), probe(ag::global_avg_pool(x), 3),
                          probe(ag::film(x, g, be), 4)});
      },
      {x, z, g, be});
  CHECK(r.rel_error < 1e-7);
}

TEST_CASE("loss primitives") {
  Rng rng(7);
  auto logits = random_leaf({6, 3}, rng, 2.0);
  Tensor t({6, 3});
  for (double& v : t.values()) v = uniform(rng, 0, 1) < 0.4 ? 1.0 : 0.0;
  auto r = check_gradients([&] { return ag::bce_with_logits(logits, t); }, {logits});
  CHECK(r.rel_error < 1e-7);

  // Binary cross-entropy is categorical cross-entropy on (p, 1-p) pairs.
  auto p = ag::sigmoid(logits);
  Tensor pairs({18, 2}), tp({18, 2});
  for (std::size_t i = 0; i < 18; ++i) {
    pairs.at(static_cast<int>(i), 0) = p.value()[i];
    pairs.at(static_cast<int>(i), 1) = 1.0 - p.value()[i];
    tp.at(static_cast<int>(i), 0) = t[i];
    tp.at(static_cast<int>(i), 1) = 1.0 - t[i];
  }
  const double ce = ag::cross_entropy(ag::constant(pairs), tp).item() * 18;
  CHECK(ce == doctest::Approx(ag::bce_with_logits(logits, t).item()).epsilon(1e-10));
}

TEST_CASE("no-grad guard records nothing") {
  auto w = ag::Var(Tensor({2}, 1.0), true);
  ag::Var y;
  {
    ag::NoGradGuard guard;
    y = ag::sum(ag::square(w));
  }
  CHECK_FALSE(y.requires_grad());
  CHECK(ag::grad_enabled());
  y.backward();
  CHECK_FALSE(w.has_grad());
}

TEST_CASE("shape errors are invalid-argument") {
  auto a = ag::constant(Tensor({2, 3}));
  auto b = ag::constant(Tensor({3, 2}));
  CHECK_THROWS_AS(ag::add(a, b), InvalidArgument);
  CHECK_THROWS_AS(ag::matmul(a, a), InvalidArgument);
  CHECK_THROWS_AS(ag::conv2d(a, a, ag::Var(), 1, 0), InvalidArgument);
}

TEST_CASE("optimizers reduce a quadratic") {
  for (const char* kind : {"sgd", "adam"}) {
    nn::ParamStore ps;
    auto w = ps.add("w", Tensor({3}, 2.0));
    nn::Optimizer opt(ps, kind, 0.05, 0.9, 0.0);
    double first = 0, last = 0;
    for (int i = 0; i < 200; ++i) {
      ps.zero_grad();
      auto l = ag::sum(ag::square(w));
      if (i == 0) first = l.item();
      last = l.item();
      l.backward();
      opt.step();
    }
    CAPTURE(kind);
    CHECK(last < 1e-2 * first);
  }
}

TEST_CASE("checkpoint round trip and corruption") {
  nn::ParamStore ps;
  Rng rng(3);
  ps.add("a", random_tensor({2, 3}, rng));
  ps.add("b", random_tensor({4}, rng));
  nn::Checkpoint ck;
  ck.meta["kind"] = "test";
  ck.add_store("m.", ps);
  const std::string path = "autograd_ckpt_test.bin";
  ck.save(path);
  auto back = nn::Checkpoint::load(path);
  CHECK(back.get("kind") == "test");
  nn::ParamStore ps2;
  ps2.add("a", Tensor({2, 3}));
  ps2.add("b", Tensor({4}));
  back.load_store("m.", ps2);
  CHECK(ps2.flatten() == ps.flatten());

  nn::ParamStore wrong;
  wrong.add("a", Tensor({3, 2}));
  CHECK_THROWS_AS(back.load_store("m.", wrong), InvalidState);

  {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    std::fputs("garbage", f);
    std::fclose(f);
  }
  CHECK_THROWS_AS(nn::Checkpoint::load(path), IoError);
  std::remove(path.c_str());
}
