// SPDX-License-Identifier: Apache-2.0
#include "kasp/mask.hpp"

#include <algorithm>

#include "kasp/error.hpp"

namespace kasp {

std::size_t PruneMask::ones() const {
  std::size_t n = 0;
  for (const auto& m : matrices) n += static_cast<std::size_t>(std::count(m.begin(), m.end(), std::uint8_t{1}));
  return n;
}

std::size_t PruneMask::total() const {
  std::size_t n = 0;
  for (const auto& m : matrices) n += m.size();
  return n;
}

double PruneMask::current_sparsity() const {
  const auto t = total();
  if (t == 0) return 0.0;
  return 1.0 - static_cast<double>(ones()) / static_cast<double>(t);
}

double PruneMask::sparsity_of(std::size_t id) const {
  if (id >= matrices.size()) throw ContractError("mask id " + std::to_string(id) + " out of range");
  const auto& m = matrices[id];
  const auto kept = static_cast<std::size_t>(std::count(m.begin(), m.end(), std::uint8_t{1}));
  return 1.0 - static_cast<double>(kept) / static_cast<double>(m.size());
}

}  // namespace kasp
