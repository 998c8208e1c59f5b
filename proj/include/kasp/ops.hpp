// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "kasp/random.hpp"
#include "kasp/tensor.hpp"

namespace kasp {

// Products. All throw DimensionError naming both shapes on mismatch.
Tensor matmul(const Tensor& a, const Tensor& b);     // [m x k] * [k x n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [m x k] * [n x k]^T
/// Batched product over identical leading extents: [... x m x k] * [... x k x n],
/// or [... x n x k]^T when `transpose_b`.
Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false);

// Elementwise, identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);

/// x[..., n] + bias[n], bias broadcast over all leading positions.
Tensor add_bias(const Tensor& x, const Tensor& bias);

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes);
Tensor transpose(const Tensor& x);  // 2-D only

// Row-wise over the trailing dimension, max-subtracted.
Tensor softmax_rows(const Tensor& x);
Tensor log_softmax_rows(const Tensor& x);

/// Per trailing row: (x - mean) / sqrt(var + eps) * gamma + beta, variance
/// with 1/h divisor.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);

/// Exact x * Phi(x).
Tensor gelu(const Tensor& x);
Tensor tanh(const Tensor& x);

/// Mean of squared differences over all elements; returns shape [1].
Tensor mse(const Tensor& a, const Tensor& b);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// Gathers rows of a [V x h] table; result [ids.size() x h]. Throws
/// InputError on an id outside [0, V).
Tensor embedding(const Tensor& table, std::span<const int> ids);

/// Inverted dropout; `p == 0` returns `x` itself.
Tensor dropout(const Tensor& x, double p, Rng& rng);

/// w * m for a binary mask of the same element count. Gradient is masked too.
Tensor apply_binary_mask(const Tensor& w, std::span<const std::uint8_t> mask);

/// Rows of a [n x h] tensor, in the given order.
Tensor select_rows(const Tensor& x, std::span<const std::size_t> rows);

/// Mean over rows of -logp[i, targets[i]]; rows with target < 0 are skipped.
Tensor nll_loss(const Tensor& logp, std::span<const int> targets);
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);

}  // namespace kasp
