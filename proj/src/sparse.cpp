// SPDX-License-Identifier: Apache-2.0
#include "kasp/sparse.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "kasp/data.hpp"
#include "kasp/error.hpp"
#include "kasp/pruner.hpp"
#include "kasp/random.hpp"

namespace kasp {

void CsrMatrix::validate() const {
  if (row_ptr.size() != rows + 1) throw ContractError("csr: row_ptr must have rows + 1 entries");
  if (row_ptr.front() != 0) throw ContractError("csr: row_ptr[0] must be 0");
  if (row_ptr.back() != values.size() || col_idx.size() != values.size())
    throw ContractError("csr: row_ptr[rows] must equal nnz");
  for (std::size_t r = 0; r < rows; ++r) {
    if (row_ptr[r] > row_ptr[r + 1]) throw ContractError("csr: row_ptr must be non-decreasing");
    for (std::size_t p = row_ptr[r]; p < row_ptr[r + 1]; ++p) {
      if (col_idx[p] >= cols) throw ContractError("csr: column index out of range");
      if (p > row_ptr[r] && col_idx[p] <= col_idx[p - 1]) throw ContractError("csr: columns must increase within a row");
      if (values[p] == 0.0) throw ContractError("csr: explicit zero stored");
    }
  }
}

Tensor CsrMatrix::to_dense() const {
  std::vector<double> out(rows * cols, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t p = row_ptr[r]; p < row_ptr[r + 1]; ++p) out[r * cols + col_idx[p]] = values[p];
  return Tensor::from({rows, cols}, std::move(out));
}

namespace {

CsrMatrix build_csr(const Tensor& dense, const std::uint8_t* mask) {
  if (dense.rank() != 2) throw ContractError("to_csr: expected a matrix, got " + shape_str(dense.shape()));
  CsrMatrix a;
  a.rows = dense.dim(0);
  a.cols = dense.dim(1);
  a.row_ptr.assign(a.rows + 1, 0);
  auto v = dense.values();
  for (std::size_t r = 0; r < a.rows; ++r) {
    for (std::size_t c = 0; c < a.cols; ++c) {
      const std::size_t i = r * a.cols + c;
      if ((mask && !mask[i]) || v[i] == 0.0) continue;
      a.col_idx.push_back(static_cast<std::uint32_t>(c));
      a.values.push_back(v[i]);
    }
    a.row_ptr[r + 1] = a.values.size();
  }
  return a;
}

}  // namespace

CsrMatrix to_csr(const Tensor& dense, std::span<const std::uint8_t> mask) {
  if (mask.size() != dense.numel())
    throw ContractError("to_csr: mask of " + std::to_string(mask.size()) + " entries for matrix " +
                        shape_str(dense.shape()));
  return build_csr(dense, mask.data());
}

CsrMatrix to_csr(const Tensor& dense) { return build_csr(dense, nullptr); }

CsrMatrix transpose(const CsrMatrix& a) {
  CsrMatrix t;
  t.rows = a.cols;
  t.cols = a.rows;
  t.row_ptr.assign(t.rows + 1, 0);
  for (auto c : a.col_idx) ++t.row_ptr[c + 1];
  for (std::size_t r = 0; r < t.rows; ++r) t.row_ptr[r + 1] += t.row_ptr[r];
  t.col_idx.resize(a.nnz());
  t.values.resize(a.nnz());
  std::vector<std::size_t> next(t.row_ptr.begin(), t.row_ptr.end() - 1);
  for (std::size_t r = 0; r < a.rows; ++r)
    for (std::size_t p = a.row_ptr[r]; p < a.row_ptr[r + 1]; ++p) {
      const std::size_t dst = next[a.col_idx[p]]++;
      t.col_idx[dst] = static_cast<std::uint32_t>(r);
      t.values[dst] = a.values[p];
    }
  return t;
}

Tensor spmm(const CsrMatrix& a, const Tensor& b) {
  if (b.rank() != 2 || b.dim(0) != a.cols)
    throw DimensionError("spmm: csr [" + std::to_string(a.rows) + "x" + std::to_string(a.cols) +
                         "] times " + shape_str(b.shape()));
  const std::size_t n = b.dim(1);
  std::vector<double> out(a.rows * n, 0.0);
  auto bv = b.values();
  for (std::size_t r = 0; r < a.rows; ++r) {
    double* o = out.data() + r * n;
    for (std::size_t p = a.row_ptr[r]; p < a.row_ptr[r + 1]; ++p) {
      const double w = a.values[p];
      const double* br = bv.data() + static_cast<std::size_t>(a.col_idx[p]) * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += w * br[j];
    }
  }
  return Tensor::from({a.rows, n}, std::move(out));
}

void sparse_linear(std::span<const double> x, std::size_t n, const CsrMatrix& wt, std::span<const double> bias,
                   std::span<double> out) {
  const std::size_t in = wt.cols, cols = wt.rows;
  if (x.size() != n * in || out.size() != n * cols || bias.size() != cols)
    throw DimensionError("sparse_linear: operand sizes do not match the weight");
  for (std::size_t r = 0; r < n; ++r) {
    const double* xr = x.data() + r * in;
    double* o = out.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) {
      double s = bias[c];
      for (std::size_t p = wt.row_ptr[c]; p < wt.row_ptr[c + 1]; ++p) s += wt.values[p] * xr[wt.col_idx[p]];
      o[c] = s;
    }
  }
}

const char* flop_convention_name(FlopConvention c) {
  return c == FlopConvention::TwoPerMac ? "2 FLOPs per multiply-accumulate" : "multiply-accumulates only";
}

PruneMask uniform_mask(const EncoderConfig& c, double sparsity) {
  c.validate();
  if (!(sparsity >= 0.0 && sparsity <= 1.0)) throw ContractError("sparsity must be in [0, 1]");
  const std::size_t h = c.hidden_size, i = c.intermediate_size;
  PruneMask m;
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    for (std::size_t k = 0; k < kPrunablePerLayer; ++k) {
      const auto kind = static_cast<PrunableKind>(k);
      Shape s = kind == PrunableKind::FfnIn ? Shape{h, i} : kind == PrunableKind::FfnOut ? Shape{i, h} : Shape{h, h};
      const std::size_t n = shape_numel(s);
      std::vector<double> dummy(n, 1.0);
      // equal magnitudes: the pruned count is all that matters here
      m.matrices.push_back(magnitude_mask(dummy, sparsity));
      m.shapes.push_back(std::move(s));
    }
  }
  return m;
}

CompressionReport count_flops(const EncoderConfig& c, std::size_t seq_len, const PruneMask* mask,
                              FlopConvention convention) {
  c.validate();
  if (seq_len == 0) throw ContractError("count_flops: seq_len must be positive");
  const std::size_t h = c.hidden_size, i = c.intermediate_size;
  if (mask && mask->size() != c.num_layers * kPrunablePerLayer)
    throw ContractError("count_flops: mask does not cover the prunable set");
  const double mult = convention == FlopConvention::TwoPerMac ? 2.0 : 1.0;
  const double s = static_cast<double>(seq_len);

  CompressionReport r;
  r.convention = flop_convention_name(convention);
  r.seq_len = seq_len;
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    LayerCompression lc;
    lc.layer = l;
    lc.params_dense = 4 * h * h + 2 * h * i;
    if (mask) {
      for (std::size_t k = 0; k < kPrunablePerLayer; ++k) {
        const auto& m = mask->matrices[l * kPrunablePerLayer + k];
        lc.params_sparse += static_cast<std::size_t>(std::count(m.begin(), m.end(), std::uint8_t{1}));
      }
    } else {
      lc.params_sparse = lc.params_dense;
    }
    lc.flops_dense = mult * s * static_cast<double>(lc.params_dense);
    lc.flops_sparse = mult * s * static_cast<double>(lc.params_sparse);
    r.params_dense += lc.params_dense;
    r.params_sparse += lc.params_sparse;
    r.flops_dense += lc.flops_dense;
    r.flops_sparse += lc.flops_sparse;
    r.attention_flops += mult * 2.0 * s * s * static_cast<double>(h);
    r.per_layer.push_back(lc);
  }
  r.total_flops_dense = r.flops_dense + r.attention_flops;
  r.total_flops_sparse = r.flops_sparse + r.attention_flops;
  const auto backbone = count_encoder_params(c);
  r.backbone_params_dense = backbone.backbone_total;
  r.backbone_params_sparse = backbone.backbone_total - (r.params_dense - r.params_sparse);
  auto ratio = [](double dense, double sparse) {
    return sparse > 0.0 ? dense / sparse : std::numeric_limits<double>::infinity();
  };
  r.compression_ratio = ratio(static_cast<double>(r.params_dense), static_cast<double>(r.params_sparse));
  r.flops_ratio = ratio(r.flops_dense, r.flops_sparse);
  r.total_flops_ratio = ratio(r.total_flops_dense, r.total_flops_sparse);
  return r;
}

namespace {

std::vector<double> copy_values(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

void layer_norm_rows(std::vector<double>& x, std::size_t h, const std::vector<double>& g, const std::vector<double>& b,
                     double eps) {
  const std::size_t rows = x.size() / h;
  for (std::size_t r = 0; r < rows; ++r) {
    double* xr = x.data() + r * h;
    double mu = 0.0;
    for (std::size_t j = 0; j < h; ++j) mu += xr[j];
    mu /= static_cast<double>(h);
    double var = 0.0;
    for (std::size_t j = 0; j < h; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(h);
    const double rs = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < h; ++j) xr[j] = (xr[j] - mu) * rs * g[j] + b[j];
  }
}

}  // namespace

SparseEncoder::SparseEncoder(const EncoderParams& params, const PruneMask* mask) : config_(params.config) {
  if (mask && mask->size() != params.num_prunable()) throw ContractError("SparseEncoder: mask does not cover the model");
  auto linear = [&](std::size_t id, const Tensor& bias) {
    const Tensor& w = params.prunable(id);
    CsrMatrix a = mask ? to_csr(w, mask->matrices[id]) : to_csr(w);
    return Linear{transpose(a), copy_values(bias)};
  };
  token_ = copy_values(params.token_emb);
  position_ = copy_values(params.position_emb);
  segment_ = copy_values(params.segment_emb);
  emb_g_ = copy_values(params.emb_ln_gamma);
  emb_b_ = copy_values(params.emb_ln_beta);
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const auto& p = params.layers[l];
    const std::size_t base = l * kPrunablePerLayer;
    layers_.push_back(Layer{linear(base + 0, p.bq), linear(base + 1, p.bk), linear(base + 2, p.bv),
                            linear(base + 3, p.bo), linear(base + 4, p.b1), linear(base + 5, p.b2),
                            copy_values(p.ln1_gamma), copy_values(p.ln1_beta), copy_values(p.ln2_gamma),
                            copy_values(p.ln2_beta)});
  }
  pooler_w_ = copy_values(params.pooler_w);
  pooler_b_ = copy_values(params.pooler_b);
  classifier_w_ = copy_values(params.classifier_w);
  classifier_b_ = copy_values(params.classifier_b);
}

std::size_t SparseEncoder::nnz() const {
  std::size_t n = 0;
  for (const auto& l : layers_) n += l.q.wt.nnz() + l.k.wt.nnz() + l.v.wt.nnz() + l.o.wt.nnz() + l.ffn_in.wt.nnz() + l.ffn_out.wt.nnz();
  return n;
}

std::vector<double> SparseEncoder::logits(const TokenBatch& batch) const {
  const auto& c = config_;
  const std::size_t B = batch.batch, S = batch.seq, H = c.hidden_size, A = c.num_heads, d = c.head_size();
  const std::size_t N = B * S, I = c.intermediate_size;
  if (S > c.max_seq_len || batch.tokens.size() != N) throw InputError("SparseEncoder: malformed batch");

  std::vector<double> x(N * H);
  for (std::size_t r = 0; r < N; ++r) {
    const int tok = batch.tokens[r];
    if (tok < 0 || static_cast<std::size_t>(tok) >= c.vocab_size) throw InputError("token id outside vocabulary");
    const std::size_t seg = batch.segments.empty() ? 0 : static_cast<std::size_t>(batch.segments[r]);
    for (std::size_t j = 0; j < H; ++j)
      x[r * H + j] = token_[static_cast<std::size_t>(tok) * H + j] + position_[(r % S) * H + j] + segment_[seg * H + j];
  }
  layer_norm_rows(x, H, emb_g_, emb_b_, c.layer_norm_eps);

  std::vector<double> q(N * H), k(N * H), v(N * H), ctx(N * H), attn(N * H), inner(N * I), ff(N * H);
  std::vector<double> row(S);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  for (const auto& layer : layers_) {
    sparse_linear(x, N, layer.q.wt, layer.q.bias, q);
    sparse_linear(x, N, layer.k.wt, layer.k.bias, k);
    sparse_linear(x, N, layer.v.wt, layer.v.bias, v);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t a = 0; a < A; ++a)
        for (std::size_t i = 0; i < S; ++i) {
          const double* qi = q.data() + (b * S + i) * H + a * d;
          double mx = -std::numeric_limits<double>::infinity();
          for (std::size_t j = 0; j < S; ++j) {
            const double* kj = k.data() + (b * S + j) * H + a * d;
            double s = 0.0;
            for (std::size_t e = 0; e < d; ++e) s += qi[e] * kj[e];
            row[j] = s * inv_sqrt_d;
            mx = std::max(mx, row[j]);
          }
          double z = 0.0;
          for (std::size_t j = 0; j < S; ++j) z += (row[j] = std::exp(row[j] - mx));
          double* ci = ctx.data() + (b * S + i) * H + a * d;
          std::fill(ci, ci + d, 0.0);
          for (std::size_t j = 0; j < S; ++j) {
            const double p = row[j] / z;
            const double* vj = v.data() + (b * S + j) * H + a * d;
            for (std::size_t e = 0; e < d; ++e) ci[e] += p * vj[e];
          }
        }
    sparse_linear(ctx, N, layer.o.wt, layer.o.bias, attn);
    for (std::size_t e = 0; e < x.size(); ++e) x[e] += attn[e];
    layer_norm_rows(x, H, layer.ln1_g, layer.ln1_b, c.layer_norm_eps);
    sparse_linear(x, N, layer.ffn_in.wt, layer.ffn_in.bias, inner);
    for (auto& u : inner) u = 0.5 * u * (1.0 + std::erf(u * std::numbers::sqrt2 / 2.0));
    sparse_linear(inner, N, layer.ffn_out.wt, layer.ffn_out.bias, ff);
    for (std::size_t e = 0; e < x.size(); ++e) x[e] += ff[e];
    layer_norm_rows(x, H, layer.ln2_g, layer.ln2_b, c.layer_norm_eps);
  }

  const std::size_t L = c.num_labels;
  std::vector<double> out(B * L), pooled(H);
  for (std::size_t b = 0; b < B; ++b) {
    const double* first = x.data() + b * S * H;
    for (std::size_t j = 0; j < H; ++j) {
      double s = pooler_b_[j];
      for (std::size_t e = 0; e < H; ++e) s += first[e] * pooler_w_[e * H + j];
      pooled[j] = std::tanh(s);
    }
    for (std::size_t j = 0; j < L; ++j) {
      double s = classifier_b_[j];
      for (std::size_t e = 0; e < H; ++e) s += pooled[e] * classifier_w_[e * L + j];
      out[b * L + j] = s;
    }
  }
  return out;
}

std::vector<ThroughputRow> benchmark_throughput(const EncoderParams& params, std::size_t batch, std::size_t seq,
                                                const std::vector<double>& ratios, BenchOptions options) {
  if (batch == 0 || seq == 0 || seq > params.config.max_seq_len) throw ContractError("benchmark: bad batch shape");
  if (options.repetitions < 5) throw ContractError("benchmark: at least 5 timed repetitions");
  Rng rng(mix_seed(options.seed, 0xbe7c));
  TokenBatch input{batch, seq, std::vector<int>(batch * seq), {}};
  const auto content = params.config.vocab_size - tokens::kFirstContent;
  for (std::size_t i = 0; i < input.tokens.size(); ++i)
    input.tokens[i] = i % seq == 0 ? tokens::kCls : tokens::kFirstContent + static_cast<int>(rng.below(content));

  std::vector<SparseEncoder> encoders;
  for (double r : ratios) {
    if (!(r >= 1.0)) throw ContractError("benchmark: compression ratio must be >= 1");
    const PruneMask mask = compute_mask(params, 1.0 - 1.0 / r);
    encoders.emplace_back(params, &mask);
  }
  volatile double sink = 0.0;
  for (std::size_t w = 0; w < options.warmup; ++w)
    for (const auto& enc : encoders) sink = sink + enc.logits(input)[0];
  // round-robin over ratios so that drift in machine load hits every row alike
  std::vector<std::vector<double>> ms(ratios.size());
  for (std::size_t rep = 0; rep < options.repetitions; ++rep)
    for (std::size_t i = 0; i < encoders.size(); ++i) {
      const auto t0 = std::chrono::steady_clock::now();
      sink = sink + encoders[i].logits(input)[0];
      ms[i].push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
    }
  std::vector<ThroughputRow> out;
  for (std::size_t i = 0; i < ratios.size(); ++i) {
    std::sort(ms[i].begin(), ms[i].end());
    const double median = ms[i][ms[i].size() / 2];
    out.push_back({ratios[i], 1.0 - 1.0 / ratios[i], static_cast<double>(batch) / (median / 1000.0), median});
  }
  return out;
}

std::string throughput_csv(const std::vector<ThroughputRow>& rows) {
  std::string s = "ratio,sparsity,sps,median_ms\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%g,%.6f,%.3f,%.4f\n", r.ratio, r.sparsity, r.sps, r.median_ms);
    s += buf;
  }
  return s;
}

}  // namespace kasp
