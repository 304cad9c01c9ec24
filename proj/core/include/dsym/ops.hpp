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

#pragma once

#include <vector>

#include "dsym/autograd.hpp"

namespace dsym::ag {

// Elementwise. Binary ops require identical shapes.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var square(const Var& a);
Var relu(const Var& a);
Var silu(const Var& a);
Var sigmoid(const Var& a);
Var tanh(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);

// Reductions to a {1}-shaped scalar.
Var sum(const Var& a);
Var mean(const Var& a);
Var add_n(const std::vector<Var>& terms);

// Shape manipulation. 2-D ops take (rows, cols).
Var reshape(const Var& a, Shape shape);
Var transpose(const Var& a);
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
Var slice_cols(const Var& a, int begin, int end);
Var gather_rows(const Var& a, const std::vector<int>& rows);
Var mean_rows(const Var& a);                ///< (M,N) -> (1,N)
Var broadcast_rows(const Var& a, int rows);  ///< (1,N) -> (rows,N)

// Dense algebra.
Var matmul(const Var& a, const Var& b);           ///< (M,K)x(K,N)
Var add_row_bias(const Var& x, const Var& bias);  ///< (M,N) + (N)
Var linear(const Var& x, const Var& w, const Var& b);
Var softmax_rows(const Var& a);
Var log_softmax_rows(const Var& a);
Var l2_normalize_rows(const Var& a, double eps = 1e-12);

// NCHW image ops.
/// `b` may be an undefined Var for a bias-free convolution.
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);
Var upsample2x(const Var& x);
Var concat_channels(const Var& a, const Var& b);
Var global_avg_pool(const Var& x);  ///< (N,C,H,W) -> (N,C)
/// Feature-wise affine modulation: x * (1 + gamma[n,c]) + beta[n,c].
Var film(const Var& x, const Var& gamma, const Var& beta);
Var nchw_to_rows(const Var& x);  ///< (N,C,H,W) -> (N*H*W, C), row index (n,h,w)
Var rows_to_nchw(const Var& x, int n, int h, int w);

// Losses.
/// Sum over all elements of the numerically stable sigmoid cross-entropy.
Var bce_with_logits(const Var& logits, const Tensor& targets);
/// Mean over rows of -sum_k t_k log p_k, where each row of `probs` is a
/// distribution and `targets` holds target distributions of the same shape.
Var cross_entropy(const Var& probs, const Tensor& targets);
Var mse(const Var& a, const Var& b);

}  // namespace dsym::ag
