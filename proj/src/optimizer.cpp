// SPDX-License-Identifier: Apache-2.0
#include "kasp/optimizer.hpp"

#include <algorithm>
#include <cmath>

#include "kasp/error.hpp"
#include "kasp/pruner.hpp"

namespace kasp {

void AdamWConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("optim.lr", "must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("optim.beta1", "must be in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("optim.beta2", "must be in [0, 1)");
  if (!(eps > 0.0)) throw ConfigError("optim.eps", "must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("optim.weight_decay", "must be non-negative");
  if (warmup_steps < 0) throw ConfigError("optim.warmup_steps", "must be non-negative");
  if (decay_steps < 0) throw ConfigError("optim.decay_steps", "must be non-negative");
  if (!(max_grad_norm >= 0.0)) throw ConfigError("optim.max_grad_norm", "must be non-negative");
}

AdamW::AdamW(EncoderParams& params, AdamWConfig config)
    : params_(params), config_(config), refs_(params.parameters()) {
  config_.validate();
  for (const auto& r : refs_) {
    m_.emplace_back(r.tensor->numel(), 0.0);
    v_.emplace_back(r.tensor->numel(), 0.0);
  }
  updates_.assign(refs_.size(), 0);
}

double AdamW::lr_at(long step) const {
  const long t = step + 1;
  if (config_.warmup_steps > 0 && t <= config_.warmup_steps)
    return config_.lr * static_cast<double>(t) / static_cast<double>(config_.warmup_steps);
  if (config_.decay_steps > 0) {
    const double done = static_cast<double>(t - config_.warmup_steps) / static_cast<double>(config_.decay_steps);
    return config_.lr * std::max(0.0, 1.0 - done);
  }
  return config_.lr;
}

void AdamW::step(long step, const PruneMask* mask) {
  if (mask && mask->size() != params_.num_prunable()) throw ContractError("optimizer mask does not cover the prunable set");

  // mask gradients first so clipping sees the effective update direction
  if (mask)
    for (auto& r : refs_) {
      if (r.prunable_id < 0 || !r.tensor->has_grad()) continue;
      auto g = r.tensor->mutable_grad();
      const auto& m = mask->matrices[static_cast<std::size_t>(r.prunable_id)];
      for (std::size_t i = 0; i < g.size(); ++i)
        if (!m[i]) g[i] = 0.0;
    }

  double clip = 1.0;
  if (config_.max_grad_norm > 0.0) {
    double sq = 0.0;
    for (auto& r : refs_)
      if (r.tensor->has_grad())
        for (double g : r.tensor->grad()) sq += g * g;
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw TrainingError(step, "non-finite gradient norm");
    if (norm > config_.max_grad_norm) clip = config_.max_grad_norm / norm;
  }

  const double lr = lr_at(step);
  for (std::size_t p = 0; p < refs_.size(); ++p) {
    auto& r = refs_[p];
    if (!r.tensor->has_grad()) continue;
    const long t = ++updates_[p];
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t));
    const bool decay = r.role == ParamRole::Weight || r.role == ParamRole::Embedding;
    const std::vector<std::uint8_t>* keep =
        (mask && r.prunable_id >= 0) ? &mask->matrices[static_cast<std::size_t>(r.prunable_id)] : nullptr;
    auto w = r.tensor->mutable_values();
    auto g = r.tensor->grad();
    auto& m = m_[p];
    auto& v = v_[p];
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (keep && !(*keep)[i]) continue;
      const double gi = g[i] * clip;
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * gi;
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * gi * gi;
      const double update = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + config_.eps);
      if (decay) w[i] -= lr * config_.weight_decay * w[i];
      w[i] -= lr * update;
    }
  }
  if (mask) apply_mask(params_, *mask);
}

void AdamW::reset_moments(const PruneMask& mask) {
  for (std::size_t p = 0; p < refs_.size(); ++p) {
    const int id = refs_[p].prunable_id;
    if (id < 0) continue;
    const auto& keep = mask.matrices.at(static_cast<std::size_t>(id));
    for (std::size_t i = 0; i < keep.size(); ++i)
      if (!keep[i]) m_[p][i] = v_[p][i] = 0.0;
  }
}

}  // namespace kasp
