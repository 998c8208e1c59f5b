// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "kasp/encoder.hpp"
#include "kasp/mask.hpp"

namespace kasp {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  long warmup_steps = 0;
  /// Linear decay to zero over this many steps after warmup; 0 keeps lr flat.
  long decay_steps = 0;
  /// Global gradient-norm clip; 0 disables.
  double max_grad_norm = 1.0;

  void validate() const;
  bool operator==(const AdamWConfig&) const = default;
};

/// Adam with decoupled weight decay over every parameter of an encoder.
/// Biases and layernorm parameters are never decayed. When a mask is given,
/// prunable gradients are multiplied by it, masked weights get no decay, and
/// the mask is re-applied after the update so pruned weights stay exactly 0.
/// Parameters without a gradient are skipped for the step.
class AdamW {
 public:
  AdamW(EncoderParams& params, AdamWConfig config);

  double lr_at(long step) const;
  void step(long step, const PruneMask* mask = nullptr);
  /// Zeroes both moments at masked-out positions.
  void reset_moments(const PruneMask& mask);

 private:
  EncoderParams& params_;
  AdamWConfig config_;
  std::vector<ParamRef> refs_;
  std::vector<std::vector<double>> m_, v_;
  std::vector<long> updates_;
};

}  // namespace kasp
