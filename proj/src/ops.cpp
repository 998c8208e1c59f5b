// SPDX-License-Identifier: Apache-2.0
#include "kasp/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "gemm.hpp"
#include "kasp/error.hpp"

namespace kasp {

namespace {

using detail::Node;

[[noreturn]] void dimension_error(const char* op, const Tensor& a, const Tensor& b) {
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                       shape_str(b.shape()));
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) dimension_error(op, a, b);
}

// Gradient buffer of input `i` if it participates in differentiation.
double* input_grad(Node& self, std::size_t i) {
  auto& in = *self.inputs[i];
  return in.requires_grad ? in.grad_buffer().data() : nullptr;
}

std::size_t trailing(const Tensor& x) { return x.shape().back(); }

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) dimension_error("matmul", a, b);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  kernels::gemm_nn(m, n, k, a.values().data(), b.values().data(), out.data());
  return Tensor::make_result({m, n}, std::move(out), {a, b}, [m, n, k](Node& self) {
    const double* g = self.grad.data();
    const double* av = self.inputs[0]->value.data();
    const double* bv = self.inputs[1]->value.data();
    if (double* ga = input_grad(self, 0)) kernels::gemm_nt(m, k, n, g, bv, ga);
    if (double* gb = input_grad(self, 1)) kernels::gemm_tn(k, n, m, av, g, gb);
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) dimension_error("matmul_nt", a, b);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  std::vector<double> out(m * n, 0.0);
  kernels::gemm_nt(m, n, k, a.values().data(), b.values().data(), out.data());
  return Tensor::make_result({m, n}, std::move(out), {a, b}, [m, n, k](Node& self) {
    const double* g = self.grad.data();
    const double* av = self.inputs[0]->value.data();
    const double* bv = self.inputs[1]->value.data();
    if (double* ga = input_grad(self, 0)) kernels::gemm_nn(m, k, n, g, bv, ga);
    if (double* gb = input_grad(self, 1)) kernels::gemm_tn(n, k, m, g, av, gb);
  });
}

Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b) {
  if (a.rank() < 3 || a.rank() != b.rank()) dimension_error("bmm", a, b);
  const auto r = a.rank();
  for (std::size_t i = 0; i + 2 < r; ++i)
    if (a.dim(i) != b.dim(i)) dimension_error("bmm", a, b);
  const std::size_t m = a.dim(r - 2), k = a.dim(r - 1);
  const std::size_t n = transpose_b ? b.dim(r - 2) : b.dim(r - 1);
  if ((transpose_b ? b.dim(r - 1) : b.dim(r - 2)) != k) dimension_error("bmm", a, b);
  std::size_t batch = 1;
  for (std::size_t i = 0; i + 2 < r; ++i) batch *= a.dim(i);

  Shape shape(a.shape().begin(), a.shape().end() - 2);
  shape.push_back(m);
  shape.push_back(n);
  std::vector<double> out(batch * m * n, 0.0);
  const double* av = a.values().data();
  const double* bv = b.values().data();
  for (std::size_t t = 0; t < batch; ++t) {
    if (transpose_b)
      kernels::gemm_nt(m, n, k, av + t * m * k, bv + t * n * k, out.data() + t * m * n);
    else
      kernels::gemm_nn(m, n, k, av + t * m * k, bv + t * k * n, out.data() + t * m * n);
  }
  return Tensor::make_result(std::move(shape), std::move(out), {a, b}, [=](Node& self) {
    const double* g = self.grad.data();
    const double* x = self.inputs[0]->value.data();
    const double* y = self.inputs[1]->value.data();
    double* ga = input_grad(self, 0);
    double* gb = input_grad(self, 1);
    for (std::size_t t = 0; t < batch; ++t) {
      const double* gt = g + t * m * n;
      if (transpose_b) {
        // C = A B^T with B [n x k]
        if (ga) kernels::gemm_nn(m, k, n, gt, y + t * n * k, ga + t * m * k);
        if (gb) kernels::gemm_tn(n, k, m, gt, x + t * m * k, gb + t * n * k);
      } else {
        if (ga) kernels::gemm_nt(m, k, n, gt, y + t * k * n, ga + t * m * k);
        if (gb) kernels::gemm_tn(k, n, m, x + t * m * k, gt, gb + t * k * n);
      }
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  std::vector<double> out(a.numel());
  auto x = a.values(), y = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    const auto n = self.grad.size();
    for (std::size_t s = 0; s < 2; ++s)
      if (double* gi = input_grad(self, s))
        for (std::size_t i = 0; i < n; ++i) gi[i] += self.grad[i];
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  std::vector<double> out(a.numel());
  auto x = a.values(), y = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    const auto n = self.grad.size();
    if (double* ga = input_grad(self, 0))
      for (std::size_t i = 0; i < n; ++i) ga[i] += self.grad[i];
    if (double* gb = input_grad(self, 1))
      for (std::size_t i = 0; i < n; ++i) gb[i] -= self.grad[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  std::vector<double> out(a.numel());
  auto x = a.values(), y = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    const auto n = self.grad.size();
    const auto& x = self.inputs[0]->value;
    const auto& y = self.inputs[1]->value;
    if (double* ga = input_grad(self, 0))
      for (std::size_t i = 0; i < n; ++i) ga[i] += self.grad[i] * y[i];
    if (double* gb = input_grad(self, 1))
      for (std::size_t i = 0; i < n; ++i) gb[i] += self.grad[i] * x[i];
  });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.values().begin(), a.values().end());
  for (auto& v : out) v *= factor;
  return Tensor::make_result(a.shape(), std::move(out), {a}, [factor](Node& self) {
    double* ga = input_grad(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i] * factor;
  });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  if (bias.rank() != 1 || bias.dim(0) != trailing(x)) dimension_error("add_bias", x, bias);
  const std::size_t h = bias.dim(0);
  std::vector<double> out(x.values().begin(), x.values().end());
  auto b = bias.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i % h];
  return Tensor::make_result(x.shape(), std::move(out), {x, bias}, [h](Node& self) {
    const auto n = self.grad.size();
    if (double* gx = input_grad(self, 0))
      for (std::size_t i = 0; i < n; ++i) gx[i] += self.grad[i];
    if (double* gb = input_grad(self, 1))
      for (std::size_t i = 0; i < n; ++i) gb[i % h] += self.grad[i];
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  std::vector<double> out(x.values().begin(), x.values().end());
  return Tensor::make_result(std::move(shape), std::move(out), {x}, [](Node& self) {
    double* gx = input_grad(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
  });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
  const auto r = x.rank();
  if (axes.size() != r) throw DimensionError("permute: axis list length does not match " + shape_str(x.shape()));
  std::vector<bool> used(r, false);
  for (auto ax : axes) {
    if (ax >= r || used[ax]) throw DimensionError("permute: invalid axis list for " + shape_str(x.shape()));
    used[ax] = true;
  }
  const auto& in_shape = x.shape();
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r - 1; i > 0; --i) in_stride[i - 1] = in_stride[i] * in_shape[i];
  Shape out_shape(r);
  std::vector<std::size_t> stride(r);  // input stride for each output axis
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = in_shape[axes[i]];
    stride[i] = in_stride[axes[i]];
  }
  // source offset of every output element
  const std::size_t n = x.numel();
  std::vector<std::size_t> src(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t off = 0;
  for (std::size_t e = 0; e < n; ++e) {
    src[e] = off;
    for (std::size_t ax = r; ax-- > 0;) {
      ++idx[ax];
      off += stride[ax];
      if (idx[ax] < out_shape[ax]) break;
      off -= stride[ax] * idx[ax];
      idx[ax] = 0;
    }
  }
  std::vector<double> out(n);
  auto v = x.values();
  for (std::size_t e = 0; e < n; ++e) out[e] = v[src[e]];
  return Tensor::make_result(std::move(out_shape), std::move(out), {x}, [src = std::move(src)](Node& self) {
    double* gx = input_grad(self, 0);
    for (std::size_t e = 0; e < src.size(); ++e) gx[src[e]] += self.grad[e];
  });
}

Tensor transpose(const Tensor& x) {
  if (x.rank() != 2) throw DimensionError("transpose: expected a matrix, got " + shape_str(x.shape()));
  return permute(x, {1, 0});
}

Tensor softmax_rows(const Tensor& x) {
  const std::size_t h = trailing(x), rows = x.numel() / h;
  auto v = x.values();
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = v.data() + r * h;
    double* yr = out.data() + r * h;
    const double mx = *std::max_element(xr, xr + h);
    double z = 0.0;
    for (std::size_t j = 0; j < h; ++j) z += (yr[j] = std::exp(xr[j] - mx));
    for (std::size_t j = 0; j < h; ++j) yr[j] /= z;
  }
  return Tensor::make_result(x.shape(), std::move(out), {x}, [h, rows](Node& self) {
    double* gx = input_grad(self, 0);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.value.data() + r * h;
      const double* g = self.grad.data() + r * h;
      double s = 0.0;
      for (std::size_t j = 0; j < h; ++j) s += g[j] * y[j];
      for (std::size_t j = 0; j < h; ++j) gx[r * h + j] += y[j] * (g[j] - s);
    }
  });
}

Tensor log_softmax_rows(const Tensor& x) {
  const std::size_t h = trailing(x), rows = x.numel() / h;
  auto v = x.values();
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = v.data() + r * h;
    double* yr = out.data() + r * h;
    const double mx = *std::max_element(xr, xr + h);
    double z = 0.0;
    for (std::size_t j = 0; j < h; ++j) z += std::exp(xr[j] - mx);
    const double lz = std::log(z);
    for (std::size_t j = 0; j < h; ++j) yr[j] = xr[j] - mx - lz;
  }
  return Tensor::make_result(x.shape(), std::move(out), {x}, [h, rows](Node& self) {
    double* gx = input_grad(self, 0);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.value.data() + r * h;
      const double* g = self.grad.data() + r * h;
      double s = 0.0;
      for (std::size_t j = 0; j < h; ++j) s += g[j];
      for (std::size_t j = 0; j < h; ++j) gx[r * h + j] += g[j] - std::exp(y[j]) * s;
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t h = trailing(x);
  if (gamma.rank() != 1 || gamma.dim(0) != h) dimension_error("layer_norm", x, gamma);
  if (beta.rank() != 1 || beta.dim(0) != h) dimension_error("layer_norm", x, beta);
  const std::size_t rows = x.numel() / h;
  auto v = x.values();
  auto gm = gamma.values(), bt = beta.values();
  std::vector<double> out(x.numel());
  std::vector<double> xhat(x.numel());
  std::vector<double> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = v.data() + r * h;
    double mu = 0.0;
    for (std::size_t j = 0; j < h; ++j) mu += xr[j];
    mu /= static_cast<double>(h);
    double var = 0.0;
    for (std::size_t j = 0; j < h; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(h);
    const double rs = 1.0 / std::sqrt(var + eps);
    rstd[r] = rs;
    for (std::size_t j = 0; j < h; ++j) {
      const double xh = (xr[j] - mu) * rs;
      xhat[r * h + j] = xh;
      out[r * h + j] = xh * gm[j] + bt[j];
    }
  }
  return Tensor::make_result(
      x.shape(), std::move(out), {x, gamma, beta},
      [h, rows, xhat = std::move(xhat), rstd = std::move(rstd)](Node& self) {
        double* gx = input_grad(self, 0);
        double* gg = input_grad(self, 1);
        double* gb = input_grad(self, 2);
        const auto& gm = self.inputs[1]->value;
        const double inv_h = 1.0 / static_cast<double>(h);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* g = self.grad.data() + r * h;
          const double* xh = xhat.data() + r * h;
          double s1 = 0.0, s2 = 0.0;
          for (std::size_t j = 0; j < h; ++j) {
            const double d = g[j] * gm[j];
            s1 += d;
            s2 += d * xh[j];
            if (gg) gg[j] += g[j] * xh[j];
            if (gb) gb[j] += g[j];
          }
          if (gx)
            for (std::size_t j = 0; j < h; ++j)
              gx[r * h + j] += rstd[r] * (g[j] * gm[j] - s1 * inv_h - xh[j] * s2 * inv_h);
        }
      });
}

Tensor gelu(const Tensor& x) {
  std::vector<double> out(x.numel());
  auto v = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 0.5 * v[i] * (1.0 + std::erf(v[i] * std::numbers::sqrt2 / 2.0));
  return Tensor::make_result(x.shape(), std::move(out), {x}, [](Node& self) {
    double* gx = input_grad(self, 0);
    const auto& v = self.inputs[0]->value;
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double cdf = 0.5 * (1.0 + std::erf(v[i] * std::numbers::sqrt2 / 2.0));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v[i] * v[i]);
      gx[i] += self.grad[i] * (cdf + v[i] * pdf);
    }
  });
}

Tensor tanh(const Tensor& x) {
  std::vector<double> out(x.numel());
  auto v = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(v[i]);
  return Tensor::make_result(x.shape(), std::move(out), {x}, [](Node& self) {
    double* gx = input_grad(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i] * (1.0 - self.value[i] * self.value[i]);
  });
}

Tensor mse(const Tensor& a, const Tensor& b) {
  require_same_shape("mse", a, b);
  auto x = a.values(), y = b.values();
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - y[i]) * (x[i] - y[i]);
  const double n = static_cast<double>(x.size());
  return Tensor::make_result({1}, {s / n}, {a, b}, [n](Node& self) {
    const auto& x = self.inputs[0]->value;
    const auto& y = self.inputs[1]->value;
    const double c = 2.0 * self.grad[0] / n;
    if (double* ga = input_grad(self, 0))
      for (std::size_t i = 0; i < x.size(); ++i) ga[i] += c * (x[i] - y[i]);
    if (double* gb = input_grad(self, 1))
      for (std::size_t i = 0; i < x.size(); ++i) gb[i] -= c * (x[i] - y[i]);
  });
}

Tensor sum(const Tensor& x) {
  auto v = x.values();
  const double s = std::accumulate(v.begin(), v.end(), 0.0);
  return Tensor::make_result({1}, {s}, {x}, [](Node& self) {
    double* gx = input_grad(self, 0);
    const auto n = self.inputs[0]->value.size();
    for (std::size_t i = 0; i < n; ++i) gx[i] += self.grad[0];
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  if (table.rank() != 2) throw DimensionError("embedding: table must be a matrix, got " + shape_str(table.shape()));
  if (ids.empty()) throw DimensionError("embedding: empty id list");
  const std::size_t vocab = table.dim(0), h = table.dim(1);
  auto t = table.values();
  std::vector<double> out(ids.size() * h);
  std::vector<int> rows(ids.begin(), ids.end());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || static_cast<std::size_t>(rows[i]) >= vocab)
      throw InputError("token id " + std::to_string(rows[i]) + " outside vocabulary of size " +
                       std::to_string(vocab));
    std::copy_n(t.data() + static_cast<std::size_t>(rows[i]) * h, h, out.data() + i * h);
  }
  return Tensor::make_result({ids.size(), h}, std::move(out), {table}, [h, rows = std::move(rows)](Node& self) {
    double* gt = input_grad(self, 0);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      double* dst = gt + static_cast<std::size_t>(rows[i]) * h;
      const double* g = self.grad.data() + i * h;
      for (std::size_t j = 0; j < h; ++j) dst[j] += g[j];
    }
  });
}

Tensor dropout(const Tensor& x, double p, Rng& rng) {
  if (p < 0.0 || p >= 1.0) throw ContractError("dropout probability must be in [0, 1)");
  if (p == 0.0) return x;
  const double keep = 1.0 / (1.0 - p);
  std::vector<double> factor(x.numel());
  for (auto& f : factor) f = rng.uniform() < p ? 0.0 : keep;
  std::vector<double> out(x.numel());
  auto v = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] * factor[i];
  return Tensor::make_result(x.shape(), std::move(out), {x}, [factor = std::move(factor)](Node& self) {
    double* gx = input_grad(self, 0);
    for (std::size_t i = 0; i < factor.size(); ++i) gx[i] += self.grad[i] * factor[i];
  });
}

Tensor apply_binary_mask(const Tensor& w, std::span<const std::uint8_t> mask) {
  if (mask.size() != w.numel())
    throw DimensionError("mask of " + std::to_string(mask.size()) + " entries does not cover " + shape_str(w.shape()));
  std::vector<double> out(w.numel());
  auto v = w.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = mask[i] ? v[i] : 0.0;
  std::vector<std::uint8_t> m(mask.begin(), mask.end());
  return Tensor::make_result(w.shape(), std::move(out), {w}, [m = std::move(m)](Node& self) {
    double* gw = input_grad(self, 0);
    for (std::size_t i = 0; i < m.size(); ++i)
      if (m[i]) gw[i] += self.grad[i];
  });
}

Tensor select_rows(const Tensor& x, std::span<const std::size_t> rows) {
  if (x.rank() != 2) throw DimensionError("select_rows: expected a matrix, got " + shape_str(x.shape()));
  if (rows.empty()) throw DimensionError("select_rows: empty row list");
  const std::size_t n = x.dim(0), h = x.dim(1);
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  std::vector<double> out(idx.size() * h);
  auto v = x.values();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= n) throw DimensionError("select_rows: row " + std::to_string(idx[i]) + " out of range");
    std::copy_n(v.data() + idx[i] * h, h, out.data() + i * h);
  }
  return Tensor::make_result({rows.size(), h}, std::move(out), {x}, [h, idx = std::move(idx)](Node& self) {
    double* gx = input_grad(self, 0);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < h; ++j) gx[idx[i] * h + j] += self.grad[i * h + j];
  });
}

Tensor nll_loss(const Tensor& logp, std::span<const int> targets) {
  if (logp.rank() != 2 || logp.dim(0) != targets.size())
    throw DimensionError("nll_loss: " + std::to_string(targets.size()) + " targets for log-probabilities " +
                         shape_str(logp.shape()));
  const std::size_t c = logp.dim(1);
  std::vector<int> t(targets.begin(), targets.end());
  auto v = logp.values();
  double s = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (t[i] < 0) continue;
    if (static_cast<std::size_t>(t[i]) >= c) throw InputError("nll_loss: target " + std::to_string(t[i]) + " out of range");
    s -= v[i * c + static_cast<std::size_t>(t[i])];
    ++count;
  }
  if (count == 0) throw ContractError("nll_loss: no active targets");
  const double n = static_cast<double>(count);
  return Tensor::make_result({1}, {s / n}, {logp}, [c, n, t = std::move(t)](Node& self) {
    double* g = input_grad(self, 0);
    for (std::size_t i = 0; i < t.size(); ++i)
      if (t[i] >= 0) g[i * c + static_cast<std::size_t>(t[i])] -= self.grad[0] / n;
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
  return nll_loss(log_softmax_rows(logits), targets);
}

}  // namespace kasp
