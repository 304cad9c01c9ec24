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

#include "dsym/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "dsym/errors.hpp"

namespace dsym::ag {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

Tensor* grad_of(Node& self, std::size_t i) { return input_grad(self, i); }

void require_same(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw InvalidArgument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
  }
}

void require_2d(const Var& a, const char* op) {
  if (a.value().ndim() != 2) throw InvalidArgument(std::string(op) + ": expected 2-D, got " + shape_str(a.shape()));
}

void require_4d(const Var& a, const char* op) {
  if (a.value().ndim() != 4) throw InvalidArgument(std::string(op) + ": expected NCHW, got " + shape_str(a.shape()));
}

template <class F, class DF>
Var unary(const Var& a, F f, DF df) {
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return make_op(std::move(y), {a}, [df](Node& self) {
    Tensor* g = grad_of(self, 0);
    if (!g) return;
    const Tensor& xv = self.inputs[0]->value;
    for (std::size_t i = 0; i < xv.size(); ++i) (*g)[i] += self.grad[i] * df(xv[i], self.value[i]);
  });
}

double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Var add(const Var& a, const Var& b) {
  require_same(a, b, "add");
  Tensor y = a.value();
  y += b.value();
  return make_op(std::move(y), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k)
      if (Tensor* g = grad_of(self, k)) *g += self.grad;
  });
}

Var sub(const Var& a, const Var& b) {
  require_same(a, b, "sub");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= b.value()[i];
  return make_op(std::move(y), {a, b}, [](Node& self) {
    if (Tensor* g = grad_of(self, 0)) *g += self.grad;
    if (Tensor* g = grad_of(self, 1))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
  });
}

Var mul(const Var& a, const Var& b) {
  require_same(a, b, "mul");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= b.value()[i];
  return make_op(std::move(y), {a, b}, [](Node& self) {
    const Tensor& av = self.inputs[0]->value;
    const Tensor& bv = self.inputs[1]->value;
    if (Tensor* g = grad_of(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * bv[i];
    if (Tensor* g = grad_of(self, 1))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * av[i];
  });
}

Var scale(const Var& a, double s) {
  return unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Var add_scalar(const Var& a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Var square(const Var& a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var relu(const Var& a) {
  return unary(a, [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Var silu(const Var& a) {
  return unary(
      a, [](double x) { return x * sigmoid_scalar(x); },
      [](double x, double) {
        const double s = sigmoid_scalar(x);
        return s * (1.0 + x * (1.0 - s));
      });
}

Var sigmoid(const Var& a) {
  return unary(a, sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}

Var tanh(const Var& a) {
  return unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var exp(const Var& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(const Var& a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return make_op(Tensor::scalar(s), {a}, [](Node& self) {
    if (Tensor* g = grad_of(self, 0))
      for (double& v : g->values()) v += self.grad[0];
  });
}

Var mean(const Var& a) {
  const double n = static_cast<double>(a.size());
  if (n == 0) throw InvalidArgument("mean of empty tensor");
  return scale(sum(a), 1.0 / n);
}

Var add_n(const std::vector<Var>& terms) {
  if (terms.empty()) throw InvalidArgument("add_n: no terms");
  Var acc = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return acc;
}

Var reshape(const Var& a, Shape shape) {
  Tensor y = a.value().reshaped(std::move(shape));
  return make_op(std::move(y), {a}, [](Node& self) {
    if (Tensor* g = grad_of(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
  });
}

Var transpose(const Var& a) {
  require_2d(a, "transpose");
  const int m = a.dim(0), n = a.dim(1);
  Tensor y({n, m});
  MapMat(y.data(), n, m) = CMapMat(a.value().data(), m, n).transpose();
  return make_op(std::move(y), {a}, [m, n](Node& self) {
    if (Tensor* g = grad_of(self, 0)) MapMat(g->data(), m, n) += CMapMat(self.grad.data(), n, m).transpose();
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw InvalidArgument("concat_rows: no parts");
  const int cols = parts.front().dim(1);
  int rows = 0;
  for (const auto& p : parts) {
    require_2d(p, "concat_rows");
    if (p.dim(1) != cols) throw InvalidArgument("concat_rows: column mismatch");
    rows += p.dim(0);
  }
  Tensor y({rows, cols});
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().storage().begin(), p.value().storage().end(), y.storage().begin() + off);
    off += p.size();
  }
  return make_op(std::move(y), parts, [](Node& self) {
    std::size_t o = 0;
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      const std::size_t n = self.inputs[k]->value.size();
      if (Tensor* g = grad_of(self, k))
        for (std::size_t i = 0; i < n; ++i) (*g)[i] += self.grad[o + i];
      o += n;
    }
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw InvalidArgument("concat_cols: no parts");
  const int rows = parts.front().dim(0);
  int cols = 0;
  for (const auto& p : parts) {
    require_2d(p, "concat_cols");
    if (p.dim(0) != rows) throw InvalidArgument("concat_cols: row mismatch");
    cols += p.dim(1);
  }
  Tensor y({rows, cols});
  int c0 = 0;
  for (const auto& p : parts) {
    const int pc = p.dim(1);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < pc; ++c) y.at(r, c0 + c) = p.value().at(r, c);
    c0 += pc;
  }
  return make_op(std::move(y), parts, [rows, cols](Node& self) {
    int c0 = 0;
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      const int pc = self.inputs[k]->value.dim(1);
      if (Tensor* g = grad_of(self, k))
        for (int r = 0; r < rows; ++r)
          for (int c = 0; c < pc; ++c) g->at(r, c) += self.grad[static_cast<std::size_t>(r) * cols + c0 + c];
      c0 += pc;
    }
  });
}

Var slice_cols(const Var& a, int begin, int end) {
  require_2d(a, "slice_cols");
  const int rows = a.dim(0), cols = a.dim(1);
  if (begin < 0 || end > cols || begin >= end) throw InvalidArgument("slice_cols: bad range");
  const int w = end - begin;
  Tensor y({rows, w});
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < w; ++c) y.at(r, c) = a.value().at(r, begin + c);
  return make_op(std::move(y), {a}, [rows, w, begin](Node& self) {
    if (Tensor* g = grad_of(self, 0))
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < w; ++c) g->at(r, begin + c) += self.grad.at(r, c);
  });
}

Var gather_rows(const Var& a, const std::vector<int>& rows) {
  require_2d(a, "gather_rows");
  const int cols = a.dim(1);
  const int n = static_cast<int>(rows.size());
  Tensor y({n, cols});
  for (int i = 0; i < n; ++i) {
    if (rows[i] < 0 || rows[i] >= a.dim(0)) throw InvalidArgument("gather_rows: index out of range");
    for (int c = 0; c < cols; ++c) y.at(i, c) = a.value().at(rows[i], c);
  }
  return make_op(std::move(y), {a}, [rows, cols](Node& self) {
    if (Tensor* g = grad_of(self, 0))
      for (std::size_t i = 0; i < rows.size(); ++i)
        for (int c = 0; c < cols; ++c) g->at(rows[i], c) += self.grad.at(static_cast<int>(i), c);
  });
}

Var mean_rows(const Var& a) {
  require_2d(a, "mean_rows");
  const int m = a.dim(0), n = a.dim(1);
  Tensor y({1, n});
  for (int r = 0; r < m; ++r)
    for (int c = 0; c < n; ++c) y[c] += a.value().at(r, c) / m;
  return make_op(std::move(y), {a}, [m, n](Node& self) {
    if (Tensor* g = grad_of(self, 0))
      for (int r = 0; r < m; ++r)
        for (int c = 0; c < n; ++c) g->at(r, c) += self.grad[c] / m;
  });
}

Var broadcast_rows(const Var& a, int rows) {
  require_2d(a, "broadcast_rows");
  if (a.dim(0) != 1) throw InvalidArgument("broadcast_rows: expected a single row");
  const int n = a.dim(1);
  Tensor y({rows, n});
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < n; ++c) y.at(r, c) = a.value()[c];
  return make_op(std::move(y), {a}, [rows, n](Node& self) {
    if (Tensor* g = grad_of(self, 0))
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < n; ++c) (*g)[c] += self.grad.at(r, c);
  });
}

Var matmul(const Var& a, const Var& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw InvalidArgument("matmul: inner dimension mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Tensor y({m, n});
  MapMat(y.data(), m, n).noalias() = CMapMat(a.value().data(), m, k) * CMapMat(b.value().data(), k, n);
  return make_op(std::move(y), {a, b}, [m, k, n](Node& self) {
    CMapMat gy(self.grad.data(), m, n);
    if (Tensor* g = grad_of(self, 0))
      MapMat(g->data(), m, k).noalias() += gy * CMapMat(self.inputs[1]->value.data(), k, n).transpose();
    if (Tensor* g = grad_of(self, 1))
      MapMat(g->data(), k, n).noalias() += CMapMat(self.inputs[0]->value.data(), m, k).transpose() * gy;
  });
}

Var add_row_bias(const Var& x, const Var& bias) {
  require_2d(x, "add_row_bias");
  const int m = x.dim(0), n = x.dim(1);
  if (static_cast<int>(bias.size()) != n) throw InvalidArgument("add_row_bias: bias length mismatch");
  Tensor y = x.value();
  for (int r = 0; r < m; ++r)
    for (int c = 0; c < n; ++c) y.at(r, c) += bias.value()[c];
  return make_op(std::move(y), {x, bias}, [m, n](Node& self) {
    if (Tensor* g = grad_of(self, 0)) *g += self.grad;
    if (Tensor* g = grad_of(self, 1))
      for (int r = 0; r < m; ++r)
        for (int c = 0; c < n; ++c) (*g)[c] += self.grad.at(r, c);
  });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  Var y = matmul(x, w);
  return b.defined() ? add_row_bias(y, b) : y;
}

Var softmax_rows(const Var& a) {
  require_2d(a, "softmax_rows");
  const int m = a.dim(0), n = a.dim(1);
  Tensor y(a.shape());
  for (int r = 0; r < m; ++r) {
    double mx = a.value().at(r, 0);
    for (int c = 1; c < n; ++c) mx = std::max(mx, a.value().at(r, c));
    double z = 0.0;
    for (int c = 0; c < n; ++c) z += (y.at(r, c) = std::exp(a.value().at(r, c) - mx));
    for (int c = 0; c < n; ++c) y.at(r, c) /= z;
  }
  return make_op(std::move(y), {a}, [m, n](Node& self) {
    Tensor* g = grad_of(self, 0);
    if (!g) return;
    for (int r = 0; r < m; ++r) {
      double dot = 0.0;
      for (int c = 0; c < n; ++c) dot += self.grad.at(r, c) * self.value.at(r, c);
      for (int c = 0; c < n; ++c) g->at(r, c) += self.value.at(r, c) * (self.grad.at(r, c) - dot);
    }
  });
}

Var log_softmax_rows(const Var& a) {
  require_2d(a, "log_softmax_rows");
  const int m = a.dim(0), n = a.dim(1);
  Tensor y(a.shape());
  for (int r = 0; r < m; ++r) {
    double mx = a.value().at(r, 0);
    for (int c = 1; c < n; ++c) mx = std::max(mx, a.value().at(r, c));
    double z = 0.0;
    for (int c = 0; c < n; ++c) z += std::exp(a.value().at(r, c) - mx);
    const double lz = mx + std::log(z);
    for (int c = 0; c < n; ++c) y.at(r, c) = a.value().at(r, c) - lz;
  }
  return make_op(std::move(y), {a}, [m, n](Node& self) {
    Tensor* g = grad_of(self, 0);
    if (!g) return;
    for (int r = 0; r < m; ++r) {
      double gs = 0.0;
      for (int c = 0; c < n; ++c) gs += self.grad.at(r, c);
      for (int c = 0; c < n; ++c) g->at(r, c) += self.grad.at(r, c) - std::exp(self.value.at(r, c)) * gs;
    }
  });
}

Var l2_normalize_rows(const Var& a, double eps) {
  require_2d(a, "l2_normalize_rows");
  const int m = a.dim(0), n = a.dim(1);
  Tensor y(a.shape());
  std::vector<double> norms(static_cast<std::size_t>(m));
  for (int r = 0; r < m; ++r) {
    double s = eps;
    for (int c = 0; c < n; ++c) s += a.value().at(r, c) * a.value().at(r, c);
    norms[r] = std::sqrt(s);
    for (int c = 0; c < n; ++c) y.at(r, c) = a.value().at(r, c) / norms[r];
  }
  return make_op(std::move(y), {a}, [m, n, norms](Node& self) {
    Tensor* g = grad_of(self, 0);
    if (!g) return;
    for (int r = 0; r < m; ++r) {
      double dot = 0.0;
      for (int c = 0; c < n; ++c) dot += self.value.at(r, c) * self.grad.at(r, c);
      for (int c = 0; c < n; ++c) g->at(r, c) += (self.grad.at(r, c) - self.value.at(r, c) * dot) / norms[r];
    }
  });
}

namespace {

struct ConvGeom {
  int n, c, h, w, o, k, stride, pad, ho, wo;
  bool pointwise() const { return k == 1 && stride == 1 && pad == 0; }
};

void im2col(const double* x, const ConvGeom& g, double* col) {
  const int hw = g.ho * g.wo;
  for (int ch = 0; ch < g.c; ++ch)
    for (int ky = 0; ky < g.k; ++ky)
      for (int kx = 0; kx < g.k; ++kx) {
        double* row = col + static_cast<std::size_t>((ch * g.k + ky) * g.k + kx) * hw;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          double* out = row + oy * g.wo;
          if (iy < 0 || iy >= g.h) {
            std::fill(out, out + g.wo, 0.0);
            continue;
          }
          const double* in = x + (static_cast<std::size_t>(ch) * g.h + iy) * g.w;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            out[ox] = (ix >= 0 && ix < g.w) ? in[ix] : 0.0;
          }
        }
      }
}

void col2im(const double* col, const ConvGeom& g, double* dx) {
  const int hw = g.ho * g.wo;
  for (int ch = 0; ch < g.c; ++ch)
    for (int ky = 0; ky < g.k; ++ky)
      for (int kx = 0; kx < g.k; ++kx) {
        const double* row = col + static_cast<std::size_t>((ch * g.k + ky) * g.k + kx) * hw;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          double* out = dx + (static_cast<std::size_t>(ch) * g.h + iy) * g.w;
          const double* in = row + oy * g.wo;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.w) out[ix] += in[ox];
          }
        }
      }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  require_4d(x, "conv2d");
  require_4d(w, "conv2d weight");
  ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), stride, pad, 0, 0};
  if (w.dim(1) != g.c || w.dim(3) != g.k) {
    throw InvalidArgument("conv2d: weight " + shape_str(w.shape()) + " incompatible with input " +
                          shape_str(x.shape()));
  }
  if (b.defined() && static_cast<int>(b.size()) != g.o) throw InvalidArgument("conv2d: bias length mismatch");
  g.ho = (g.h + 2 * pad - g.k) / stride + 1;
  g.wo = (g.w + 2 * pad - g.k) / stride + 1;
  if (g.ho <= 0 || g.wo <= 0) throw InvalidArgument("conv2d: output would be empty");

  const int ckk = g.c * g.k * g.k;
  const int hw = g.ho * g.wo;
  Tensor y({g.n, g.o, g.ho, g.wo});
  AlignedBuffer col(g.pointwise() ? 0 : static_cast<std::size_t>(ckk) * hw);
  CMapMat wm(w.value().data(), g.o, ckk);
  for (int n = 0; n < g.n; ++n) {
    const double* xn = x.value().data() + static_cast<std::size_t>(n) * g.c * g.h * g.w;
    const double* cp = xn;
    if (!g.pointwise()) {
      im2col(xn, g, col.data());
      cp = col.data();
    }
    MapMat yn(y.data() + static_cast<std::size_t>(n) * g.o * hw, g.o, hw);
    yn.noalias() = wm * CMapMat(cp, ckk, hw);
    if (b.defined())
      for (int o = 0; o < g.o; ++o) yn.row(o).array() += b.value()[o];
  }

  std::vector<Var> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  return make_op(std::move(y), std::move(inputs), [g, ckk, hw](Node& self) {
    const Tensor& xv = self.inputs[0]->value;
    const Tensor& wv = self.inputs[1]->value;
    Tensor* gx = grad_of(self, 0);
    Tensor* gw = grad_of(self, 1);
    Tensor* gb = self.inputs.size() > 2 ? grad_of(self, 2) : nullptr;
    AlignedBuffer col(g.pointwise() ? 0 : static_cast<std::size_t>(ckk) * hw);
    AlignedBuffer dcol(static_cast<std::size_t>(ckk) * hw);
    for (int n = 0; n < g.n; ++n) {
      CMapMat gy(self.grad.data() + static_cast<std::size_t>(n) * g.o * hw, g.o, hw);
      if (gb)
        for (int o = 0; o < g.o; ++o) (*gb)[o] += gy.row(o).sum();
      const double* xn = xv.data() + static_cast<std::size_t>(n) * g.c * g.h * g.w;
      if (gw) {
        const double* cp = xn;
        if (!g.pointwise()) {
          im2col(xn, g, col.data());
          cp = col.data();
        }
        MapMat(gw->data(), g.o, ckk).noalias() += gy * CMapMat(cp, ckk, hw).transpose();
      }
      if (gx) {
        double* dxn = gx->data() + static_cast<std::size_t>(n) * g.c * g.h * g.w;
        if (g.pointwise()) {
          MapMat(dxn, ckk, hw).noalias() += CMapMat(wv.data(), g.o, ckk).transpose() * gy;
        } else {
          MapMat(dcol.data(), ckk, hw).noalias() = CMapMat(wv.data(), g.o, ckk).transpose() * gy;
          col2im(dcol.data(), g, dxn);
        }
      }
    }
  });
}

Var upsample2x(const Var& x) {
  require_4d(x, "upsample2x");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor y({n, c, 2 * h, 2 * w});
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch)
      for (int r = 0; r < 2 * h; ++r)
        for (int q = 0; q < 2 * w; ++q) y.at(i, ch, r, q) = x.value().at(i, ch, r / 2, q / 2);
  return make_op(std::move(y), {x}, [n, c, h, w](Node& self) {
    if (Tensor* g = grad_of(self, 0))
      for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < c; ++ch)
          for (int r = 0; r < 2 * h; ++r)
            for (int q = 0; q < 2 * w; ++q) g->at(i, ch, r / 2, q / 2) += self.grad.at(i, ch, r, q);
  });
}

Var concat_channels(const Var& a, const Var& b) {
  require_4d(a, "concat_channels");
  require_4d(b, "concat_channels");
  const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1), h = a.dim(2), w = a.dim(3);
  if (b.dim(0) != n || b.dim(2) != h || b.dim(3) != w) throw InvalidArgument("concat_channels: shape mismatch");
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  Tensor y({n, ca + cb, h, w});
  for (int i = 0; i < n; ++i) {
    std::copy_n(a.value().data() + i * ca * plane, ca * plane, y.data() + i * (ca + cb) * plane);
    std::copy_n(b.value().data() + i * cb * plane, cb * plane, y.data() + (i * (ca + cb) + ca) * plane);
  }
  return make_op(std::move(y), {a, b}, [n, ca, cb, plane](Node& self) {
    Tensor* ga = grad_of(self, 0);
    Tensor* gb = grad_of(self, 1);
    for (int i = 0; i < n; ++i) {
      const double* src = self.grad.data() + i * (ca + cb) * plane;
      if (ga)
        for (std::size_t j = 0; j < ca * plane; ++j) ga->data()[i * ca * plane + j] += src[j];
      if (gb)
        for (std::size_t j = 0; j < cb * plane; ++j) gb->data()[i * cb * plane + j] += src[ca * plane + j];
    }
  });
}

Var global_avg_pool(const Var& x) {
  require_4d(x, "global_avg_pool");
  const int n = x.dim(0), c = x.dim(1);
  const int plane = x.dim(2) * x.dim(3);
  Tensor y({n, c});
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) {
      const double* p = x.value().data() + (static_cast<std::size_t>(i) * c + ch) * plane;
      double s = 0.0;
      for (int j = 0; j < plane; ++j) s += p[j];
      y.at(i, ch) = s / plane;
    }
  return make_op(std::move(y), {x}, [n, c, plane](Node& self) {
    if (Tensor* g = grad_of(self, 0))
      for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < c; ++ch) {
          double* p = g->data() + (static_cast<std::size_t>(i) * c + ch) * plane;
          const double v = self.grad.at(i, ch) / plane;
          for (int j = 0; j < plane; ++j) p[j] += v;
        }
  });
}

Var film(const Var& x, const Var& gamma, const Var& beta) {
  require_4d(x, "film");
  const int n = x.dim(0), c = x.dim(1);
  const int plane = x.dim(2) * x.dim(3);
  if (gamma.shape() != Shape{n, c} || beta.shape() != Shape{n, c}) throw InvalidArgument("film: modulation shape");
  Tensor y(x.shape());
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) {
      const double s = 1.0 + gamma.value().at(i, ch), t = beta.value().at(i, ch);
      const std::size_t off = (static_cast<std::size_t>(i) * c + ch) * plane;
      for (int j = 0; j < plane; ++j) y[off + j] = x.value()[off + j] * s + t;
    }
  return make_op(std::move(y), {x, gamma, beta}, [n, c, plane](Node& self) {
    const Tensor& xv = self.inputs[0]->value;
    const Tensor& gv = self.inputs[1]->value;
    Tensor* gx = grad_of(self, 0);
    Tensor* gg = grad_of(self, 1);
    Tensor* gbt = grad_of(self, 2);
    for (int i = 0; i < n; ++i)
      for (int ch = 0; ch < c; ++ch) {
        const std::size_t off = (static_cast<std::size_t>(i) * c + ch) * plane;
        const double s = 1.0 + gv.at(i, ch);
        double sg = 0.0, sgx = 0.0;
        for (int j = 0; j < plane; ++j) {
          const double gy = self.grad[off + j];
          sg += gy;
          sgx += gy * xv[off + j];
          if (gx) (*gx)[off + j] += gy * s;
        }
        if (gg) gg->at(i, ch) += sgx;
        if (gbt) gbt->at(i, ch) += sg;
      }
  });
}

Var nchw_to_rows(const Var& x) {
  require_4d(x, "nchw_to_rows");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor y({n * h * w, c});
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch)
      for (int r = 0; r < h; ++r)
        for (int q = 0; q < w; ++q) y.at((i * h + r) * w + q, ch) = x.value().at(i, ch, r, q);
  return make_op(std::move(y), {x}, [n, c, h, w](Node& self) {
    if (Tensor* g = grad_of(self, 0))
      for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < c; ++ch)
          for (int r = 0; r < h; ++r)
            for (int q = 0; q < w; ++q) g->at(i, ch, r, q) += self.grad.at((i * h + r) * w + q, ch);
  });
}

Var rows_to_nchw(const Var& x, int n, int h, int w) {
  require_2d(x, "rows_to_nchw");
  const int c = x.dim(1);
  if (x.dim(0) != n * h * w) throw InvalidArgument("rows_to_nchw: row count mismatch");
  Tensor y({n, c, h, w});
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch)
      for (int r = 0; r < h; ++r)
        for (int q = 0; q < w; ++q) y.at(i, ch, r, q) = x.value().at((i * h + r) * w + q, ch);
  return make_op(std::move(y), {x}, [n, c, h, w](Node& self) {
    if (Tensor* g = grad_of(self, 0))
      for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < c; ++ch)
          for (int r = 0; r < h; ++r)
            for (int q = 0; q < w; ++q) g->at((i * h + r) * w + q, ch) += self.grad.at(i, ch, r, q);
  });
}

Var bce_with_logits(const Var& logits, const Tensor& targets) {
  if (logits.value().size() != targets.size()) throw InvalidArgument("bce_with_logits: size mismatch");
  const Tensor& x = logits.value();
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    s += std::max(v, 0.0) - v * targets[i] + std::log1p(std::exp(-std::abs(v)));
  }
  return make_op(Tensor::scalar(s), {logits}, [targets](Node& self) {
    if (Tensor* g = grad_of(self, 0)) {
      const Tensor& xv = self.inputs[0]->value;
      for (std::size_t i = 0; i < xv.size(); ++i) (*g)[i] += self.grad[0] * (sigmoid_scalar(xv[i]) - targets[i]);
    }
  });
}

Var cross_entropy(const Var& probs, const Tensor& targets) {
  require_2d(probs, "cross_entropy");
  if (probs.shape() != targets.shape()) throw InvalidArgument("cross_entropy: target shape mismatch");
  const int m = probs.dim(0);
  if (m == 0) throw InvalidArgument("cross_entropy: empty batch");
  static constexpr double kFloor = 1e-300;
  const Tensor& p = probs.value();
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (targets[i] != 0.0) s -= targets[i] * std::log(std::max(p[i], kFloor));
  return make_op(Tensor::scalar(s / m), {probs}, [targets, m](Node& self) {
    if (Tensor* g = grad_of(self, 0)) {
      const Tensor& pv = self.inputs[0]->value;
      for (std::size_t i = 0; i < pv.size(); ++i)
        if (targets[i] != 0.0) (*g)[i] -= self.grad[0] * targets[i] / std::max(pv[i], kFloor) / m;
    }
  });
}

Var mse(const Var& a, const Var& b) { return mean(square(sub(a, b))); }

}  // namespace dsym::ag
