// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "kasp/tensor.hpp"

namespace kasp {

/// Binary keep-masks over the prunable matrices of an encoder, indexed by
/// prunable id (layer * 6 + kind, see PrunableKind).
struct PruneMask {
  std::vector<std::vector<std::uint8_t>> matrices;
  std::vector<Shape> shapes;

  std::size_t size() const { return matrices.size(); }
  std::size_t ones() const;
  std::size_t total() const;
  /// 1 - ones / total over the whole prunable set.
  double current_sparsity() const;
  double sparsity_of(std::size_t id) const;

  bool operator==(const PruneMask&) const = default;
};

}  // namespace kasp
