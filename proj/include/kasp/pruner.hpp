// SPDX-License-Identifier: Apache-2.0
/**
 * @file   pruner.hpp
 * @brief  Unstructured magnitude pruning of the attention and feed-forward
 *         weight matrices, with a cubic sparsity ramp.
 */
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "kasp/encoder.hpp"
#include "kasp/mask.hpp"

namespace kasp {

struct SparsitySchedule {
  double s_init = 0.0;
  double s_final = 0.9;
  long t_begin = 0;
  long t_end = 100;
  long interval = 10;  // steps between mask recomputations

  void validate() const;
  bool operator==(const SparsitySchedule&) const = default;
};

/// s_init before t_begin, s_final after t_end, cubic ramp in between.
double target_sparsity(long step, const SparsitySchedule& schedule);

enum class PruneScope : std::uint8_t { PerMatrix, Global };

/// Keep-mask zeroing the floor(sparsity * n) smallest |w| of one matrix.
/// Ties go to the lower row-major index. For sparsity < 1 the largest
/// entry always survives.
std::vector<std::uint8_t> magnitude_mask(std::span<const double> weights, double sparsity);

PruneMask full_mask(const EncoderParams& params);
PruneMask compute_mask(const EncoderParams& params, double sparsity, PruneScope scope = PruneScope::PerMatrix);

/// w <- w * m on every prunable matrix; nothing else is touched.
void apply_mask(EncoderParams& params, const PruneMask& mask);

struct MatrixSparsity {
  std::string name;
  std::size_t kept = 0;
  std::size_t total = 0;
  double remaining = 1.0;
};

struct SparsityReport {
  std::size_t kept = 0;
  std::size_t total = 0;
  double remaining_weight_fraction = 1.0;
  /// Fraction of prunable weights that are exactly zero in the parameters.
  double zero_weight_fraction = 0.0;
  std::vector<MatrixSparsity> per_matrix;
};

SparsityReport sparsity_report(const EncoderParams& params, const PruneMask& mask);

}  // namespace kasp
