// SPDX-License-Identifier: Apache-2.0
#include "kasp/pruner.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "kasp/error.hpp"

namespace kasp {

void SparsitySchedule::validate() const {
  if (!(s_init >= 0.0 && s_init < 1.0)) throw ConfigError("schedule.s_init", "must be in [0, 1)");
  if (!(s_final >= 0.0 && s_final <= 1.0)) throw ConfigError("schedule.s_final", "must be in [0, 1]");
  if (s_init > s_final) throw ConfigError("schedule.s_init", "must not exceed s_final");
  if (t_begin < 0) throw ConfigError("schedule.t_begin", "must be non-negative");
  if (t_end <= t_begin) throw ConfigError("schedule.t_end", "must be greater than t_begin");
  if (interval < 1) throw ConfigError("schedule.interval", "must be at least 1");
}

double target_sparsity(long step, const SparsitySchedule& s) {
  if (step <= s.t_begin) return s.s_init;
  if (step >= s.t_end) return s.s_final;
  const double progress = static_cast<double>(step - s.t_begin) / static_cast<double>(s.t_end - s.t_begin);
  const double rest = 1.0 - progress;
  return s.s_final + (s.s_init - s.s_final) * rest * rest * rest;
}

namespace {

// floor(sparsity * n), guarded against products like 0.7 * 10 landing just
// below an integer.
std::size_t pruned_count(std::size_t n, double sparsity) {
  if (sparsity <= 0.0) return 0;
  if (sparsity >= 1.0) return n;
  auto k = static_cast<std::size_t>(std::floor(sparsity * static_cast<double>(n) + 1e-9));
  return std::min(k, n - 1);
}

void check_sparsity(double sparsity) {
  if (!(sparsity >= 0.0 && sparsity <= 1.0)) throw ContractError("sparsity must be in [0, 1]");
}

}  // namespace

std::vector<std::uint8_t> magnitude_mask(std::span<const double> weights, double sparsity) {
  check_sparsity(sparsity);
  const std::size_t n = weights.size();
  std::vector<std::uint8_t> mask(n, 1);
  const std::size_t k = pruned_count(n, sparsity);
  if (k == 0) return mask;
  if (k == n) {
    std::fill(mask.begin(), mask.end(), 0);
    return mask;
  }
  std::vector<std::uint32_t> order(n);
  std::iota(order.begin(), order.end(), 0u);
  auto smaller = [&](std::uint32_t a, std::uint32_t b) {
    const double x = std::abs(weights[a]), y = std::abs(weights[b]);
    return x < y || (x == y && a < b);
  };
  std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), smaller);
  for (std::size_t i = 0; i < k; ++i) mask[order[i]] = 0;
  return mask;
}

PruneMask full_mask(const EncoderParams& params) {
  PruneMask m;
  for (std::size_t id = 0; id < params.num_prunable(); ++id) {
    const auto& w = params.prunable(id);
    m.matrices.emplace_back(w.numel(), 1);
    m.shapes.push_back(w.shape());
  }
  return m;
}

PruneMask compute_mask(const EncoderParams& params, double sparsity, PruneScope scope) {
  check_sparsity(sparsity);
  PruneMask m = full_mask(params);
  if (scope == PruneScope::PerMatrix) {
    for (std::size_t id = 0; id < m.size(); ++id) m.matrices[id] = magnitude_mask(params.prunable(id).values(), sparsity);
    return m;
  }

  struct Entry {
    double magnitude;
    std::uint32_t matrix;
    std::uint32_t index;
  };
  std::vector<Entry> pool;
  pool.reserve(m.total());
  for (std::size_t id = 0; id < m.size(); ++id) {
    auto w = params.prunable(id).values();
    for (std::size_t i = 0; i < w.size(); ++i)
      pool.push_back({std::abs(w[i]), static_cast<std::uint32_t>(id), static_cast<std::uint32_t>(i)});
  }
  const std::size_t k = pruned_count(pool.size(), sparsity);
  if (k == 0) return m;
  auto smaller = [](const Entry& a, const Entry& b) {
    if (a.magnitude != b.magnitude) return a.magnitude < b.magnitude;
    if (a.matrix != b.matrix) return a.matrix < b.matrix;
    return a.index < b.index;
  };
  if (k < pool.size())
    std::nth_element(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k), pool.end(), smaller);
  for (std::size_t i = 0; i < k; ++i) m.matrices[pool[i].matrix][pool[i].index] = 0;
  return m;
}

void apply_mask(EncoderParams& params, const PruneMask& mask) {
  if (mask.size() != params.num_prunable())
    throw ContractError("mask covers " + std::to_string(mask.size()) + " matrices, model has " +
                        std::to_string(params.num_prunable()));
  for (std::size_t id = 0; id < mask.size(); ++id) {
    auto w = params.prunable(id).mutable_values();
    const auto& m = mask.matrices[id];
    if (m.size() != w.size()) throw ContractError("mask for " + EncoderParams::prunable_name(id) + " has wrong size");
    for (std::size_t i = 0; i < w.size(); ++i)
      if (!m[i]) w[i] = 0.0;
  }
}

SparsityReport sparsity_report(const EncoderParams& params, const PruneMask& mask) {
  if (mask.size() != params.num_prunable()) throw ContractError("mask does not cover the prunable set");
  SparsityReport r;
  std::size_t zeros = 0;
  for (std::size_t id = 0; id < mask.size(); ++id) {
    const auto& m = mask.matrices[id];
    auto w = params.prunable(id).values();
    if (m.size() != w.size()) throw ContractError("mask for " + EncoderParams::prunable_name(id) + " has wrong size");
    MatrixSparsity ms;
    ms.name = EncoderParams::prunable_name(id);
    ms.total = m.size();
    ms.kept = static_cast<std::size_t>(std::count(m.begin(), m.end(), std::uint8_t{1}));
    ms.remaining = static_cast<double>(ms.kept) / static_cast<double>(ms.total);
    zeros += static_cast<std::size_t>(std::count(w.begin(), w.end(), 0.0));
    r.kept += ms.kept;
    r.total += ms.total;
    r.per_matrix.push_back(std::move(ms));
  }
  r.remaining_weight_fraction = static_cast<double>(r.kept) / static_cast<double>(r.total);
  r.zero_weight_fraction = static_cast<double>(zeros) / static_cast<double>(r.total);
  return r;
}

}  // namespace kasp
