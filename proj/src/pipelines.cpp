// SPDX-License-Identifier: Apache-2.0
#include "kasp/pipelines.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <tuple>

#include "kasp/error.hpp"
#include "kasp/ops.hpp"

namespace kasp {

const char* strategy_name(Strategy s) {
  switch (s) {
    case Strategy::Pretrain: return "pretrain";
    case Strategy::Finetune: return "finetune";
    case Strategy::PruneAtFinetune: return "prune_at_finetune";
    case Strategy::PruneAtPretrain: return "prune_at_pretrain";
    case Strategy::PruneAtDistill: return "prune_at_distill";
  }
  return "?";
}

void TrainConfig::validate(Strategy strategy) const {
  optim.validate();
  if (steps < 0) throw ConfigError("steps", "must be non-negative");
  if (batch_size == 0) throw ConfigError("batch_size", "must be positive");
  if (eval_every < 0) throw ConfigError("eval_every", "must be non-negative");
  if (log_every < 1) throw ConfigError("log_every", "must be at least 1");
  const bool pruning = strategy == Strategy::PruneAtFinetune || strategy == Strategy::PruneAtDistill;
  if (pruning && !schedule) throw ConfigError("schedule", "required for " + std::string(strategy_name(strategy)));
  if (schedule) {
    schedule->validate();
    if (schedule->t_end > steps) throw ConfigError("schedule.t_end", "must not exceed steps");
  }
  if (!(augment.replace_prob >= 0.0 && augment.replace_prob <= 1.0))
    throw ConfigError("augment.replace_prob", "must be in [0, 1]");
}

void assert_budget_fair(const TrainConfig& a, const TrainConfig& b) {
  if (a.steps != b.steps) throw ContractError("strategy budgets differ in step count");
  if (a.batch_size != b.batch_size) throw ContractError("strategy budgets differ in batch size");
  if (!(a.optim == b.optim)) throw ContractError("strategy budgets differ in optimizer settings");
}

EvalResult evaluate(const EncoderParams& params, const PruneMask* mask, const Dataset& data, std::size_t batch_size) {
  NoGradGuard no_grad;
  std::size_t correct = 0;
  double loss = 0.0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t end = std::min(data.size(), start + batch_size);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const auto labels = batch_labels(data, idx);
    const auto trace = forward(params, make_batch(data, idx), mask);
    const Tensor ce = cross_entropy(trace.logits, labels);
    loss += ce.item() * static_cast<double>(idx.size());
    const auto z = trace.logits.values();
    const std::size_t c = trace.logits.dim(1);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const auto row = z.subspan(i * c, c);
      const auto pred = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
      correct += pred == labels[i];
    }
  }
  const double n = static_cast<double>(data.size());
  return {static_cast<double>(correct) / n, loss / n};
}

double mlm_loss(const EncoderParams& params, const PruneMask* mask, const Dataset& data, std::uint64_t seed,
                std::size_t batch_size) {
  NoGradGuard no_grad;
  Rng rng(mix_seed(seed, 0xde7));
  double total = 0.0;
  std::size_t count = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t end = std::min(data.size(), start + batch_size);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const auto masked = mask_tokens(make_batch(data, idx), params.config.vocab_size, rng);
    const auto trace = forward(params, masked.input, mask);
    const Tensor ce = cross_entropy(mlm_logits(params, trace.sequence_output, masked.positions), masked.targets);
    total += ce.item() * static_cast<double>(masked.positions.size());
    count += masked.positions.size();
  }
  return total / static_cast<double>(count);
}

namespace {

struct StepLoss {
  Tensor loss;
  double task_loss = 0.0;
  double emb = 0.0, att = 0.0, hid = 0.0, prd = 0.0;
};

struct Pruning {
  const SparsitySchedule* schedule = nullptr;  // null: mask held fixed
  PruneScope scope = PruneScope::PerMatrix;
  PruneMask mask;
};

using LossFn = std::function<StepLoss(const std::vector<std::size_t>& batch, long step, const PruneMask* mask)>;
using EvalFn = std::function<void(MetricsRecord& record, const PruneMask* mask)>;

struct Loop {
  std::string phase;
  long offset = 0;
  std::size_t dataset_size = 0;
  std::uint64_t sampler_seed = 0;
};

bool due_for_remask(long t, const SparsitySchedule& s) {
  if (t < s.t_begin) return false;
  return t == s.t_end || (t - s.t_begin) % s.interval == 0;
}

void train_loop(EncoderParams& params, const TrainConfig& cfg, const Loop& loop, Pruning* pruning, const LossFn& loss_fn,
                const EvalFn& eval_fn, std::vector<MetricsRecord>& metrics, const StepHook& hook) {
  const auto started = std::chrono::steady_clock::now();
  auto elapsed = [&]() -> std::optional<double> {
    if (!cfg.record_wallclock) return std::nullopt;
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
  };
  auto sparsity_now = [&](long t) {
    if (!pruning) return std::pair{0.0, 0.0};
    const double target = pruning->schedule ? target_sparsity(t, *pruning->schedule) : pruning->mask.current_sparsity();
    return std::pair{target, pruning->mask.current_sparsity()};
  };
  auto emit_eval = [&](long t) {
    if (!eval_fn) return;
    MetricsRecord r;
    r.step = loop.offset + t;
    r.phase = "eval";
    std::tie(r.target_sparsity, r.actual_sparsity) = sparsity_now(t);
    eval_fn(r, pruning ? &pruning->mask : nullptr);
    r.wallclock_ms = elapsed();
    metrics.push_back(std::move(r));
  };

  AdamW opt(params, cfg.optim);
  BatchSampler sampler(loop.dataset_size, cfg.batch_size, loop.sampler_seed);
  if (cfg.eval_every > 0 || cfg.steps == 0) emit_eval(0);

  for (long t = 0; t < cfg.steps; ++t) {
    if (pruning && pruning->schedule && due_for_remask(t, *pruning->schedule)) {
      pruning->mask = compute_mask(params, target_sparsity(t, *pruning->schedule), pruning->scope);
      apply_mask(params, pruning->mask);
      opt.reset_moments(pruning->mask);
    }
    const PruneMask* mask = pruning ? &pruning->mask : nullptr;

    StepLoss sl = loss_fn(sampler.next(), loop.offset + t, mask);
    const double value = sl.loss.item();
    if (!std::isfinite(value)) throw TrainingError(loop.offset + t, "loss is not finite");
    params.zero_grad();
    sl.loss.backward();
    opt.step(t, mask);
    if (hook) hook(StepEvent{loop.offset + t, loop.phase, params, mask});

    if (t % cfg.log_every == 0 || t + 1 == cfg.steps) {
      MetricsRecord r;
      r.step = loop.offset + t;
      r.phase = loop.phase;
      std::tie(r.target_sparsity, r.actual_sparsity) = sparsity_now(t);
      r.loss_total = value;
      r.loss_emb = sl.emb;
      r.loss_att = sl.att;
      r.loss_hid = sl.hid;
      r.loss_prd = sl.prd;
      r.task_loss = sl.task_loss;
      r.wallclock_ms = elapsed();
      metrics.push_back(std::move(r));
    }
    const long done = t + 1;
    if ((cfg.eval_every > 0 && done % cfg.eval_every == 0) || done == cfg.steps) emit_eval(done);
  }
  params.zero_grad();
}

EvalFn classification_eval(const EncoderParams& params, const TaskData& task) {
  return [&params, &task](MetricsRecord& r, const PruneMask* mask) {
    const auto ev = evaluate(params, mask, task.dev);
    r.dev_accuracy = ev.accuracy;
    r.task_loss = ev.loss;
    r.loss_total = ev.loss;
  };
}

LossFn mlm_step(const EncoderParams& params, const TaskData& mlm, std::uint64_t seed) {
  return [&params, &mlm, seed](const std::vector<std::size_t>& idx, long step, const PruneMask* mask) {
    Rng rng(mix_seed(seed, 0x3000000 + static_cast<std::uint64_t>(step)));
    const auto masked = mask_tokens(make_batch(mlm.train, idx), params.config.vocab_size, rng);
    const auto trace = forward(params, masked.input, mask, {true, mix_seed(seed, static_cast<std::uint64_t>(step))});
    StepLoss sl;
    sl.loss = cross_entropy(mlm_logits(params, trace.sequence_output, masked.positions), masked.targets);
    sl.task_loss = sl.loss.item();
    return sl;
  };
}

LossFn classification_step(const EncoderParams& params, const Dataset& data, std::uint64_t seed) {
  return [&params, &data, seed](const std::vector<std::size_t>& idx, long step, const PruneMask* mask) {
    const auto trace = forward(params, make_batch(data, idx), mask, {true, mix_seed(seed, static_cast<std::uint64_t>(step))});
    StepLoss sl;
    sl.loss = cross_entropy(trace.logits, batch_labels(data, idx));
    sl.task_loss = sl.loss.item();
    return sl;
  };
}

void check_task(const EncoderConfig& model, const TaskData& task, TaskKind kind) {
  if (task.config.kind != kind)
    throw ConfigError("task.kind", kind == TaskKind::Classification ? "expected a classification task"
                                                                     : "expected an mlm_pretrain task");
  if (task.config.vocab_size > model.vocab_size) throw ConfigError("task.vocab_size", "exceeds model.vocab_size");
  if (task.config.seq_len > model.max_seq_len) throw ConfigError("task.seq_len", "exceeds model.max_seq_len");
  if (kind == TaskKind::Classification && task.config.num_labels != model.num_labels)
    throw ConfigError("task.num_labels", "does not match model.num_labels");
}

void finish_classification(RunResult& out, const TaskData& task) {
  const PruneMask* mask = out.mask ? &*out.mask : nullptr;
  out.dev = evaluate(out.params, mask, task.dev);
  out.train = evaluate(out.params, mask, task.train);
}

RunResult run_pretraining(EncoderParams params, const TrainConfig& cfg, const TaskData& mlm, const StepHook& hook) {
  RunResult out{std::move(params), std::nullopt, {}, {}, {}};
  std::optional<Pruning> pruning;
  if (cfg.schedule) pruning = Pruning{&*cfg.schedule, cfg.scope, full_mask(out.params)};
  const EncoderParams& p = out.params;
  EvalFn eval = [&p, &mlm, &cfg](MetricsRecord& r, const PruneMask* mask) {
    r.task_loss = mlm_loss(p, mask, mlm.dev, cfg.seed);
    r.loss_total = r.task_loss;
  };
  train_loop(out.params, cfg, {"pretrain", 0, mlm.train.size(), cfg.seed}, pruning ? &*pruning : nullptr,
             mlm_step(out.params, mlm, cfg.seed), eval, out.metrics, hook);
  if (pruning) out.mask = std::move(pruning->mask);
  const PruneMask* mask = out.mask ? &*out.mask : nullptr;
  out.dev.loss = mlm_loss(out.params, mask, mlm.dev, cfg.seed);
  return out;
}

}  // namespace

RunResult pretrain(const EncoderConfig& model, const TrainConfig& config, const TaskData& mlm, const StepHook& hook) {
  model.validate();
  config.validate(Strategy::Pretrain);
  check_task(model, mlm, TaskKind::MlmPretrain);
  return run_pretraining(init_params(model, config.seed), config, mlm, hook);
}

RunResult finetune_teacher(const EncoderParams& pretrained, const TrainConfig& config, const TaskData& task,
                           const StepHook& hook) {
  config.validate(Strategy::Finetune);
  check_task(pretrained.config, task, TaskKind::Classification);
  RunResult out{pretrained.clone(), std::nullopt, {}, {}, {}};
  train_loop(out.params, config, {"finetune", 0, task.train.size(), config.seed}, nullptr,
             classification_step(out.params, task.train, config.seed), classification_eval(out.params, task),
             out.metrics, hook);
  finish_classification(out, task);
  return out;
}

RunResult prune_at_finetune(const EncoderParams& pretrained, const TrainConfig& config, const TaskData& task,
                            const StepHook& hook) {
  config.validate(Strategy::PruneAtFinetune);
  check_task(pretrained.config, task, TaskKind::Classification);
  RunResult out{pretrained.clone(), std::nullopt, {}, {}, {}};
  Pruning pruning{&*config.schedule, config.scope, full_mask(out.params)};
  train_loop(out.params, config, {"finetune", 0, task.train.size(), config.seed}, &pruning,
             classification_step(out.params, task.train, config.seed), classification_eval(out.params, task),
             out.metrics, hook);
  out.mask = std::move(pruning.mask);
  finish_classification(out, task);
  return out;
}

RunResult prune_at_distill(const EncoderParams& pretrained, const EncoderParams& teacher, const TrainConfig& config,
                           const TaskData& task, const StepHook& hook) {
  config.validate(Strategy::PruneAtDistill);
  check_task(pretrained.config, task, TaskKind::Classification);
  const auto& sc = pretrained.config;
  const auto& tc = teacher.config;
  if (sc.hidden_size != tc.hidden_size) throw ConfigError("teacher.hidden_size", "must match the student");
  if (sc.num_heads != tc.num_heads) throw ConfigError("teacher.num_heads", "must match the student");
  if (sc.num_labels != tc.num_labels) throw ConfigError("teacher.num_labels", "must match the student");
  config.distill.validate(sc.num_layers, tc.num_layers);

  const Dataset data = augment(task.train, config.augment, task.config.vocab_size);
  RunResult out{pretrained.clone(), std::nullopt, {}, {}, {}};
  Pruning pruning{&*config.schedule, config.scope, full_mask(out.params)};
  const EncoderParams& student = out.params;
  const std::uint64_t seed = config.seed;
  LossFn step = [&student, &teacher, &data, &config, seed](const std::vector<std::size_t>& idx, long t,
                                                          const PruneMask* mask) {
    const TokenBatch batch = make_batch(data, idx);
    ForwardTrace target;
    {
      NoGradGuard no_grad;
      target = forward(teacher, batch, nullptr);
    }
    const auto trace = forward(student, batch, mask, {true, mix_seed(seed, static_cast<std::uint64_t>(t))});
    const DistillLoss dl = distill_loss(trace, target, config.distill);
    StepLoss sl;
    sl.loss = dl.total;
    sl.emb = dl.emb;
    sl.att = dl.att;
    sl.hid = dl.hid;
    sl.prd = dl.prd;
    {
      NoGradGuard no_grad;
      sl.task_loss = cross_entropy(trace.logits.detach(), batch_labels(data, idx)).item();
    }
    return sl;
  };
  train_loop(out.params, config, {"distill", 0, data.size(), config.seed}, &pruning, step,
             classification_eval(out.params, task), out.metrics, hook);
  out.mask = std::move(pruning.mask);
  finish_classification(out, task);
  return out;
}

RunResult prune_at_pretrain(const EncoderConfig& model, const TrainConfig& pretrain_config,
                            const TrainConfig& finetune_config, const TaskData& mlm, const TaskData& task,
                            const StepHook& hook) {
  model.validate();
  pretrain_config.validate(Strategy::PruneAtPretrain);
  finetune_config.validate(Strategy::Finetune);
  if (!pretrain_config.schedule) throw ConfigError("pretrain.schedule", "required for prune_at_pretrain");
  check_task(model, mlm, TaskKind::MlmPretrain);
  check_task(model, task, TaskKind::Classification);

  RunResult pre = run_pretraining(init_params(model, pretrain_config.seed), pretrain_config, mlm, hook);
  RunResult out{std::move(pre.params), std::move(pre.mask), std::move(pre.metrics), {}, {}};
  Pruning frozen{nullptr, pretrain_config.scope, std::move(*out.mask)};
  train_loop(out.params, finetune_config, {"finetune", pretrain_config.steps, task.train.size(), finetune_config.seed},
             &frozen, classification_step(out.params, task.train, finetune_config.seed),
             classification_eval(out.params, task), out.metrics, hook);
  out.mask = std::move(frozen.mask);
  finish_classification(out, task);
  return out;
}

}  // namespace kasp
