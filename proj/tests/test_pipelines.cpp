// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <map>

#include "kasp/config.hpp"
#include "kasp/error.hpp"
#include "kasp/pipelines.hpp"
#include "support.hpp"

using namespace kasp;
using kasp::testing::HygieneHook;
using kasp::testing::snapshot_zeros;

namespace {

EncoderConfig micro() {
  EncoderConfig c;
  c.num_layers = 2;
  c.hidden_size = 8;
  c.num_heads = 2;
  c.intermediate_size = 16;
  c.vocab_size = 32;
  c.max_seq_len = 8;
  c.num_labels = 2;
  return c;
}

SyntheticTaskConfig micro_task(TaskKind kind = TaskKind::Classification) {
  SyntheticTaskConfig t;
  t.kind = kind;
  t.vocab_size = 32;
  t.seq_len = 8;
  t.num_labels = 2;
  t.num_topics = 4;
  t.size = 64;
  t.dev_size = 64;
  t.signal_prob = 0.5;
  return t;
}

TrainConfig short_run(long steps) {
  TrainConfig c;
  c.steps = steps;
  c.batch_size = 8;
  c.eval_every = 10;
  c.log_every = 3;
  c.seed = 3;
  return c;
}

TrainConfig pruned_run(long steps, double s_final) {
  TrainConfig c = short_run(steps);
  c.schedule = SparsitySchedule{0.0, s_final, 0, steps / 2, 4};
  return c;
}

struct Fixture {
  TaskData mlm = generate_task(micro_task(TaskKind::MlmPretrain));
  TaskData task = generate_task(micro_task());
  EncoderParams pretrained = pretrain(micro(), short_run(20), mlm).params;
  EncoderParams teacher = finetune_teacher(pretrained, short_run(20), task).params;
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

}  // namespace

TEST_CASE("train config validation") {
  TrainConfig c = short_run(10);
  CHECK_NOTHROW(c.validate(Strategy::Finetune));
  try {
    c.validate(Strategy::PruneAtDistill);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.path() == "schedule");
  }
  c = pruned_run(10, 0.5);
  c.schedule->t_end = 11;
  CHECK_THROWS_AS(c.validate(Strategy::PruneAtFinetune), ConfigError);
  c = short_run(10);
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(Strategy::Finetune), ConfigError);
  CHECK_THROWS_AS(assert_budget_fair(short_run(10), short_run(11)), ContractError);
  CHECK_NOTHROW(assert_budget_fair(short_run(10), pruned_run(10, 0.9)));
}

TEST_CASE("pretraining") {
  const auto mlm = generate_task(micro_task(TaskKind::MlmPretrain));
  const auto zero = pretrain(micro(), short_run(0), mlm);
  CHECK(zero.params.bitwise_equal(init_params(micro(), 3)));

  const auto a = pretrain(micro(), short_run(12), mlm), b = pretrain(micro(), short_run(12), mlm);
  CHECK(a.params.bitwise_equal(b.params));
  CHECK(a.metrics == b.metrics);
  CHECK(metrics_text(a.metrics) == metrics_text(b.metrics));
  CHECK(a.dev.loss < zero.dev.loss);

  CHECK_THROWS_AS(pretrain(micro(), short_run(2), generate_task(micro_task())), ConfigError);
}

TEST_CASE("pretraining on the default toy setting lowers dev loss at each of the first evaluations") {
  SyntheticTaskConfig mlm_cfg = RunConfig::default_mlm();
  const auto mlm = generate_task(mlm_cfg);
  TrainConfig c;
  c.steps = 60;
  c.eval_every = 20;
  c.optim.lr = 2e-3;
  const auto r = pretrain(EncoderConfig{}, c, mlm);
  std::vector<double> evals;
  for (const auto& m : r.metrics)
    if (m.phase == "eval") evals.push_back(m.task_loss);
  REQUIRE(evals.size() >= 3);
  CHECK(evals[1] < evals[0]);
  CHECK(evals[2] < evals[1]);
}

TEST_CASE("fine-tuning starts from the pretrained encoder") {
  const auto& f = fixture();
  const auto zero = finetune_teacher(f.pretrained, short_run(0), f.task);
  CHECK(zero.params.bitwise_equal(f.pretrained));
  CHECK_FALSE(zero.mask.has_value());
  REQUIRE(zero.metrics.size() == 1);
  CHECK(zero.metrics[0].phase == "eval");
  CHECK(zero.metrics[0].dev_accuracy.has_value());
  CHECK(zero.dev.accuracy >= 0.0);
  CHECK(zero.dev.accuracy <= 1.0);

  auto wrong = micro_task();
  wrong.num_labels = 3;
  wrong.num_topics = 6;
  CHECK_THROWS_AS(finetune_teacher(f.pretrained, short_run(1), generate_task(wrong)), ConfigError);
}

TEST_CASE("prune_at_finetune at zero sparsity is plain fine-tuning") {
  const auto& f = fixture();
  const auto plain = finetune_teacher(f.pretrained, short_run(20), f.task);
  const auto pruned = prune_at_finetune(f.pretrained, pruned_run(20, 0.0), f.task);
  CHECK(plain.metrics == pruned.metrics);
  CHECK(metrics_text(plain.metrics) == metrics_text(pruned.metrics));
  CHECK(plain.params.bitwise_equal(pruned.params));
}

TEST_CASE("prune_at_distill contracts") {
  const auto& f = fixture();
  const auto teacher_before = f.teacher.clone();
  HygieneHook hook;
  snapshot_zeros(hook, f.pretrained);
  TrainConfig cfg = pruned_run(24, 0.9);
  cfg.augment = {0.1, 1, 5};
  const auto r = prune_at_distill(f.pretrained, f.teacher, cfg, f.task, std::ref(hook));
  CHECK(f.teacher.bitwise_equal(teacher_before));
  CHECK(hook.calls == 24);
  CHECK(hook.violations == 0);
  REQUIRE(r.mask.has_value());
  const auto rep = sparsity_report(r.params, *r.mask);
  CHECK(std::abs(rep.remaining_weight_fraction - 0.1) <= 12.0 / static_cast<double>(rep.total));
  for (const auto& m : rep.per_matrix) CHECK(std::abs(m.remaining - 0.1) <= 1.0 / static_cast<double>(m.total));
  CHECK(rep.zero_weight_fraction >= 1.0 - rep.remaining_weight_fraction);

  std::map<std::string, long> last;
  for (const auto& m : r.metrics) {
    CHECK((m.phase == "distill" || m.phase == "eval"));
    if (last.count(m.phase)) CHECK(m.step > last[m.phase]);
    last[m.phase] = m.step;
    CHECK_FALSE(m.wallclock_ms.has_value());
    if (m.phase == "distill") CHECK(m.loss_total > 0.0);
  }
  CHECK(r.metrics.back().target_sparsity == 0.9);

  const auto again = prune_at_distill(f.pretrained, f.teacher, cfg, f.task);
  CHECK(metrics_text(again.metrics) == metrics_text(r.metrics));
  CHECK(again.params.bitwise_equal(r.params));

  cfg.record_wallclock = true;
  const auto timed = prune_at_distill(f.pretrained, f.teacher, cfg, f.task);
  for (const auto& m : timed.metrics) CHECK(m.wallclock_ms.has_value());

  TrainConfig only = cfg;
  only.record_wallclock = false;
  only.distill.active_terms = {DistillTerm::Prd};
  const auto logit = prune_at_distill(f.pretrained, f.teacher, only, f.task);
  for (const auto& m : logit.metrics)
    if (m.phase == "distill") {
      CHECK(m.loss_emb == 0.0);
      CHECK(m.loss_att == 0.0);
      CHECK(m.loss_total == m.loss_prd);
    }

  EncoderConfig narrow = micro();
  narrow.hidden_size = 4;
  const auto other = init_params(narrow, 1);
  CHECK_THROWS_AS(prune_at_distill(f.pretrained, other, cfg, f.task), ConfigError);
}

TEST_CASE("prune_at_finetune and global scope keep the mask invariant") {
  const auto& f = fixture();
  for (PruneScope scope : {PruneScope::PerMatrix, PruneScope::Global}) {
    HygieneHook hook;
    snapshot_zeros(hook, f.pretrained);
    TrainConfig cfg = pruned_run(20, 0.8);
    cfg.scope = scope;
    const auto r = prune_at_finetune(f.pretrained, cfg, f.task, std::ref(hook));
    CHECK(hook.violations == 0);
    REQUIRE(r.mask.has_value());
    CHECK(std::abs(r.mask->current_sparsity() - 0.8) <= 12.0 / static_cast<double>(r.mask->total()));
  }
}

TEST_CASE("prune_at_pretrain freezes the pretraining mask") {
  const auto& f = fixture();
  HygieneHook hook;
  snapshot_zeros(hook, init_params(micro(), 3));
  std::optional<PruneMask> after_pretrain;
  long finetune_steps = 0;
  auto capture = [&](const StepEvent& e) {
    hook(e);
    if (e.phase == "pretrain" && e.mask) after_pretrain = *e.mask;
    if (e.phase == "finetune") {
      ++finetune_steps;
      CHECK(*e.mask == *after_pretrain);
    }
  };
  const auto r = prune_at_pretrain(micro(), pruned_run(20, 0.9), short_run(12), f.mlm, f.task, capture);
  CHECK(hook.violations == 0);
  CHECK(finetune_steps == 12);
  REQUIRE(r.mask.has_value());
  CHECK(*r.mask == *after_pretrain);
  CHECK(std::abs(r.mask->current_sparsity() - 0.9) <= 12.0 / static_cast<double>(r.mask->total()));
  long prev = -1;
  for (const auto& m : r.metrics)
    if (m.phase == "finetune") {
      CHECK(m.step >= 20);
      CHECK(m.step > prev);
      prev = m.step;
    }
  CHECK_THROWS_AS(prune_at_pretrain(micro(), short_run(20), short_run(12), f.mlm, f.task), ConfigError);
}

TEST_CASE("evaluation") {
  const auto& f = fixture();
  // memorize two examples
  TaskData two = f.task;
  two.train.examples.resize(2);
  two.train.examples[0].label = 0;
  two.train.examples[1].label = 1;
  two.dev = two.train;
  TrainConfig c = short_run(80);
  c.batch_size = 2;
  c.optim.lr = 1e-2;
  const auto fit = finetune_teacher(f.pretrained, c, two);
  CHECK(fit.dev.accuracy == 1.0);

  // an untrained scorer is near chance
  auto big = micro_task();
  big.dev_size = 2000;
  big.size = 8;
  const auto data = generate_task(big);
  const auto ev = evaluate(init_params(micro(), 11), nullptr, data.dev);
  const double sigma = std::sqrt(0.25 / 2000.0);
  CHECK(std::abs(ev.accuracy - 0.5) <= 3.0 * sigma);
  CHECK(ev.loss > 0.0);
  CHECK(evaluate(init_params(micro(), 11), nullptr, data.dev, 7).accuracy == ev.accuracy);
}

TEST_CASE("divergence is reported with the step") {
  const auto& f = fixture();
  TrainConfig c = short_run(30);
  c.optim.lr = 1e300;
  c.optim.max_grad_norm = 0.0;
  c.optim.weight_decay = 0.0;
  try {
    finetune_teacher(f.pretrained, c, f.task);
    FAIL("expected TrainingError");
  } catch (const TrainingError& e) {
    CHECK(e.step() >= 0);
    CHECK(e.step() < 30);
  }
}
