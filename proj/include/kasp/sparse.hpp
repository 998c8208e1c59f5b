// SPDX-License-Identifier: Apache-2.0
/**
 * @file   sparse.hpp
 * @brief  CSR storage of pruned weights, sparse products, an inference-only
 *         sparse encoder, parameter/FLOP accounting and a throughput
 *         benchmark.
 */
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "kasp/encoder.hpp"
#include "kasp/mask.hpp"
#include "kasp/tensor.hpp"

namespace kasp {

struct CsrMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::size_t> row_ptr;   // rows + 1 entries, row_ptr[0] == 0
  std::vector<std::uint32_t> col_idx; // strictly increasing within a row
  std::vector<double> values;         // never an explicit zero

  std::size_t nnz() const { return values.size(); }
  /// Throws ContractError if any structural invariant is broken.
  void validate() const;
  Tensor to_dense() const;
  bool operator==(const CsrMatrix&) const = default;
};

/// Entries with mask == 1 and a nonzero value.
CsrMatrix to_csr(const Tensor& dense, std::span<const std::uint8_t> mask);
/// All nonzero entries.
CsrMatrix to_csr(const Tensor& dense);
CsrMatrix transpose(const CsrMatrix& a);

/// a[m x k] * b[k x n] as a dense [m x n] tensor (no gradient).
Tensor spmm(const CsrMatrix& a, const Tensor& b);

/// out[n x cols] = x[n x in] * W + bias, with W given through `wt`, the CSR
/// form of W^T ([out x in]).
void sparse_linear(std::span<const double> x, std::size_t n, const CsrMatrix& wt, std::span<const double> bias,
                   std::span<double> out);

enum class FlopConvention : std::uint8_t { TwoPerMac, MacOnly };
const char* flop_convention_name(FlopConvention c);

struct LayerCompression {
  std::size_t layer = 0;
  std::size_t params_dense = 0;
  std::size_t params_sparse = 0;
  double flops_dense = 0.0;
  double flops_sparse = 0.0;
};

/// Parameter and FLOP counts for one sequence of length `seq_len`.
///  - params_*: the prunable weight matrices (dense size vs kept entries).
///  - flops_*: the weight-matrix products of every layer.
///  - attention_flops: score and context products, always dense.
///  - total_flops_*: flops_* + attention_flops.
///  - backbone_params_*: count_encoder_params() backbone, with pruned
///    weights removed for the sparse figure.
struct CompressionReport {
  std::string convention;
  std::size_t seq_len = 0;
  std::size_t params_dense = 0;
  std::size_t params_sparse = 0;
  double flops_dense = 0.0;
  double flops_sparse = 0.0;
  double attention_flops = 0.0;
  double total_flops_dense = 0.0;
  double total_flops_sparse = 0.0;
  std::size_t backbone_params_dense = 0;
  std::size_t backbone_params_sparse = 0;
  double compression_ratio = 1.0;  // params_dense / params_sparse
  double flops_ratio = 1.0;        // flops_dense / flops_sparse
  double total_flops_ratio = 1.0;
  std::vector<LayerCompression> per_layer;
};

CompressionReport count_flops(const EncoderConfig& config, std::size_t seq_len, const PruneMask* mask = nullptr,
                              FlopConvention convention = FlopConvention::TwoPerMac);

/// Uniform per-matrix mask with floor(sparsity * n) entries dropped from
/// each matrix (positions are irrelevant for counting).
PruneMask uniform_mask(const EncoderConfig& config, double sparsity);

/// Inference-only encoder whose prunable matrices run through CSR kernels.
class SparseEncoder {
 public:
  SparseEncoder(const EncoderParams& params, const PruneMask* mask);

  /// [batch x num_labels] logits, row-major.
  std::vector<double> logits(const TokenBatch& batch) const;
  std::size_t nnz() const;

 private:
  struct Linear {
    CsrMatrix wt;
    std::vector<double> bias;
  };
  struct Layer {
    Linear q, k, v, o, ffn_in, ffn_out;
    std::vector<double> ln1_g, ln1_b, ln2_g, ln2_b;
  };
  EncoderConfig config_;
  std::vector<double> token_, position_, segment_, emb_g_, emb_b_;
  std::vector<Layer> layers_;
  std::vector<double> pooler_w_, pooler_b_, classifier_w_, classifier_b_;
};

struct ThroughputRow {
  double ratio = 1.0;
  double sparsity = 0.0;
  double sps = 0.0;  // sentences per second
  double median_ms = 0.0;
};

struct BenchOptions {
  std::size_t warmup = 2;
  std::size_t repetitions = 7;
  std::uint64_t seed = 0;
};

/// For each compression ratio r, prunes a copy of `params` to sparsity
/// 1 - 1/r by magnitude and times SparseEncoder::logits on a random batch.
std::vector<ThroughputRow> benchmark_throughput(const EncoderParams& params, std::size_t batch, std::size_t seq,
                                                const std::vector<double>& ratios, BenchOptions options = {});

/// `ratio,sparsity,sps,median_ms` header plus one line per row.
std::string throughput_csv(const std::vector<ThroughputRow>& rows);

}  // namespace kasp
