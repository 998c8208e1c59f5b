// SPDX-License-Identifier: Apache-2.0
/**
 * @file   pipelines.hpp
 * @brief  Training strategies: masked-token pretraining, teacher
 *         fine-tuning, and the three ways of pruning a pretrained encoder
 *         (during fine-tuning, during pretraining, during distillation).
 *
 * Every strategy is a sequential, fully seeded loop. With identical inputs
 * the returned metrics trail is reproduced exactly.
 */
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "kasp/data.hpp"
#include "kasp/distiller.hpp"
#include "kasp/encoder.hpp"
#include "kasp/metrics.hpp"
#include "kasp/optimizer.hpp"
#include "kasp/pruner.hpp"

namespace kasp {

enum class Strategy : std::uint8_t { Pretrain, Finetune, PruneAtFinetune, PruneAtPretrain, PruneAtDistill };

const char* strategy_name(Strategy s);

struct TrainConfig {
  AdamWConfig optim;
  long steps = 400;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  long eval_every = 100;  // 0 disables intermediate evaluation
  long log_every = 10;
  std::optional<SparsitySchedule> schedule;
  PruneScope scope = PruneScope::PerMatrix;
  DistillConfig distill;
  AugmentPolicy augment;
  bool record_wallclock = false;

  /// Throws ConfigError. Pruning strategies need a schedule that ends within
  /// the step budget.
  void validate(Strategy strategy) const;
};

struct EvalResult {
  double accuracy = 0.0;
  double loss = 0.0;
};

struct StepEvent {
  long step;  // global step within the run
  std::string_view phase;
  const EncoderParams& params;
  const PruneMask* mask;
};
using StepHook = std::function<void(const StepEvent&)>;

struct RunResult {
  EncoderParams params;
  std::optional<PruneMask> mask;
  std::vector<MetricsRecord> metrics;
  EvalResult dev;
  /// Task loss and accuracy on the un-augmented training split, eval mode.
  EvalResult train;
};

/// Argmax accuracy and mean cross-entropy, eval mode.
EvalResult evaluate(const EncoderParams& params, const PruneMask* mask, const Dataset& data,
                    std::size_t batch_size = 128);

/// Masked-token loss over a dataset with corruption fixed by `seed`.
double mlm_loss(const EncoderParams& params, const PruneMask* mask, const Dataset& data, std::uint64_t seed,
                std::size_t batch_size = 128);

/// Masked-token pretraining from init_params(model, config.seed). If the
/// config carries a schedule, the encoder is pruned along it.
RunResult pretrain(const EncoderConfig& model, const TrainConfig& config, const TaskData& mlm,
                   const StepHook& hook = {});

/// Cross-entropy fine-tuning of every parameter, no pruning.
RunResult finetune_teacher(const EncoderParams& pretrained, const TrainConfig& config, const TaskData& task,
                           const StepHook& hook = {});

/// Cross-entropy fine-tuning with gradual magnitude pruning.
RunResult prune_at_finetune(const EncoderParams& pretrained, const TrainConfig& config, const TaskData& task,
                            const StepHook& hook = {});

/// Student starts from the pretrained encoder and is pruned while distilling
/// from the frozen fine-tuned teacher on (optionally augmented) task data.
RunResult prune_at_distill(const EncoderParams& pretrained, const EncoderParams& teacher, const TrainConfig& config,
                           const TaskData& task, const StepHook& hook = {});

/// Pruned during masked-token pretraining, then fine-tuned with the mask
/// frozen.
RunResult prune_at_pretrain(const EncoderConfig& model, const TrainConfig& pretrain_config,
                            const TrainConfig& finetune_config, const TaskData& mlm, const TaskData& task,
                            const StepHook& hook = {});

/// Throws ContractError unless both runs share step count, batch size and
/// learning-rate schedule.
void assert_budget_fair(const TrainConfig& a, const TrainConfig& b);

}  // namespace kasp
