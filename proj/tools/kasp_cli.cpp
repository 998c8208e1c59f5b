// SPDX-License-Identifier: Apache-2.0
// kasp: command-line driver for pretraining, fine-tuning, the three pruning
// strategies, evaluation, throughput benchmarking and compression reports.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "kasp/checkpoint.hpp"
#include "kasp/config.hpp"
#include "kasp/error.hpp"
#include "kasp/pipelines.hpp"
#include "kasp/pruner.hpp"
#include "kasp/sparse.hpp"

namespace fs = std::filesystem;
using namespace kasp;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitCheckpoint = 3;

struct Args {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string init;
  std::string teacher;
  bool f32 = false;
};

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

RunConfig load(const Args& a) {
  RunConfig c = load_run_config(a.config);
  if (a.seed) c.override_seed(*a.seed);
  fs::create_directories(a.out);
  write_file(fs::path(a.out) / "config.json", to_json(c).dump(2) + "\n");
  return c;
}

Checkpoint load_model(const std::string& path, const std::string& flag, const EncoderConfig& expected) {
  if (path.empty()) throw ConfigError(flag, "checkpoint path required");
  Checkpoint ck = load_checkpoint(path);
  if (!(ck.params.config == expected))
    throw ConfigError("model", "does not match the configuration stored in " + path);
  return ck;
}

Json compression_json(const EncoderParams& params, const PruneMask* mask, const ReportConfig& rc) {
  const auto r = count_flops(params.config, rc.seq_len, mask, rc.convention);
  const PruneMask full = full_mask(params);
  const auto sr = sparsity_report(params, mask ? *mask : full);
  return Json{{"remaining_weight_fraction", sr.remaining_weight_fraction},
              {"remaining_weight_percent", 100.0 * sr.remaining_weight_fraction},
              {"zero_weight_fraction", sr.zero_weight_fraction},
              {"params",
               {{"prunable_dense", r.params_dense},
                {"prunable_nonzero", r.params_sparse},
                {"backbone_dense", r.backbone_params_dense},
                {"backbone_nonzero", r.backbone_params_sparse},
                {"compression_ratio", r.compression_ratio}}},
              {"flops",
               {{"seq_len", r.seq_len},
                {"convention", r.convention},
                {"weight_dense", r.flops_dense},
                {"weight_sparse", r.flops_sparse},
                {"attention", r.attention_flops},
                {"total_dense", r.total_flops_dense},
                {"total_sparse", r.total_flops_sparse},
                {"weight_ratio", r.flops_ratio},
                {"total_ratio", r.total_flops_ratio}}}};
}

void finish_run(const Args& a, const std::string& command, const RunConfig& c, const RunResult& r, bool classification,
                Json extra = Json::object()) {
  const fs::path out(a.out);
  const PruneMask* mask = r.mask ? &*r.mask : nullptr;
  const Json meta{{"command", command}, {"seed", c.train.seed}};
  save_checkpoint((out / "model.ckpt").string(), r.params, mask, meta, {a.f32});
  write_file(out / "metrics.jsonl", metrics_text(r.metrics));
  Json s{{"command", command}};
  if (classification) {
    s["dev_accuracy"] = r.dev.accuracy;
    s["dev_loss"] = r.dev.loss;
    s["train_accuracy"] = r.train.accuracy;
    s["train_loss"] = r.train.loss;
  } else {
    s["dev_mlm_loss"] = r.dev.loss;
  }
  const Json comp = compression_json(r.params, mask, c.report);
  for (auto& [k, v] : comp.items()) s[k] = v;
  for (auto& [k, v] : extra.items()) s[k] = v;
  write_file(out / "summary.json", s.dump(2) + "\n");
  std::cout << s.dump(2) << "\n";
}

int cmd_pretrain(const Args& a) {
  const RunConfig c = load(a);
  const TaskData mlm = generate_task(c.mlm);
  finish_run(a, "pretrain", c, pretrain(c.model, c.pretrain, mlm), false);
  return 0;
}

int cmd_finetune(const Args& a) {
  const RunConfig c = load(a);
  const Checkpoint init = load_model(a.init, "--init", c.model);
  finish_run(a, "finetune", c, finetune_teacher(init.params, c.teacher, generate_task(c.task)), true);
  return 0;
}

int cmd_prune_finetune(const Args& a) {
  const RunConfig c = load(a);
  const Checkpoint init = load_model(a.init, "--init", c.model);
  finish_run(a, "prune-finetune", c, prune_at_finetune(init.params, c.train, generate_task(c.task)), true);
  return 0;
}

int cmd_prune_distill(const Args& a) {
  const RunConfig c = load(a);
  const Checkpoint init = load_model(a.init, "--init", c.model);
  if (a.teacher.empty()) throw ConfigError("--teacher", "checkpoint path required");
  const Checkpoint teacher = load_checkpoint(a.teacher);
  const TaskData task = generate_task(c.task);
  const auto teacher_dev = evaluate(teacher.params, nullptr, task.dev);
  finish_run(a, "prune-distill", c, prune_at_distill(init.params, teacher.params, c.train, task), true,
             Json{{"teacher_dev_accuracy", teacher_dev.accuracy}});
  return 0;
}

int cmd_prune_pretrain(const Args& a) {
  const RunConfig c = load(a);
  const TaskData mlm = generate_task(c.mlm);
  const TaskData task = generate_task(c.task);
  finish_run(a, "prune-pretrain", c, prune_at_pretrain(c.model, c.pretrain, c.train, mlm, task), true);
  return 0;
}

int cmd_eval(const Args& a) {
  const RunConfig c = load(a);
  const Checkpoint ck = load_model(a.init, "--init", c.model);
  const PruneMask* mask = ck.mask ? &*ck.mask : nullptr;
  const TaskData task = generate_task(c.task);
  const auto dev = evaluate(ck.params, mask, task.dev);
  const auto train = evaluate(ck.params, mask, task.train);
  MetricsRecord rec;
  rec.phase = "eval";
  rec.target_sparsity = rec.actual_sparsity = mask ? mask->current_sparsity() : 0.0;
  rec.loss_total = rec.task_loss = dev.loss;
  rec.dev_accuracy = dev.accuracy;
  const fs::path out(a.out);
  write_file(out / "metrics.jsonl", metrics_text({rec}));
  Json s{{"command", "eval"},
         {"checkpoint", fs::path(a.init).filename().string()},
         {"dev_accuracy", dev.accuracy},
         {"dev_loss", dev.loss},
         {"train_accuracy", train.accuracy},
         {"train_loss", train.loss}};
  const Json comp = compression_json(ck.params, mask, c.report);
  for (auto& [k, v] : comp.items()) s[k] = v;
  write_file(out / "summary.json", s.dump(2) + "\n");
  std::cout << s.dump(2) << "\n";
  return 0;
}

int cmd_bench(const Args& a) {
  const RunConfig c = load(a);
  EncoderParams params;
  if (a.init.empty()) {
    params = init_params(c.bench.model, c.bench.seed);
  } else {
    params = load_checkpoint(a.init).params;
  }
  if (c.bench.seq_len > params.config.max_seq_len) throw ConfigError("bench.seq_len", "exceeds the model's max_seq_len");
  const auto rows = benchmark_throughput(params, c.bench.batch, c.bench.seq_len, c.bench.ratios,
                                         {c.bench.warmup, c.bench.repetitions, c.bench.seed});
  const std::string csv = throughput_csv(rows);
  const fs::path out(a.out);
  write_file(out / "bench.csv", csv);
  Json table = Json::array();
  for (const auto& r : rows)
    table.push_back({{"ratio", r.ratio}, {"sparsity", r.sparsity}, {"sps", r.sps}, {"median_ms", r.median_ms}});
  Json s{{"command", "bench"},
         {"hidden_size", params.config.hidden_size},
         {"intermediate_size", params.config.intermediate_size},
         {"batch", c.bench.batch},
         {"seq_len", c.bench.seq_len},
         {"rows", table}};
  write_file(out / "summary.json", s.dump(2) + "\n");
  std::cout << csv;
  return 0;
}

std::string report_table(const Json& j) {
  const auto& p = j["params"];
  const auto& f = j["flops"];
  char buf[512];
  std::string s;
  std::snprintf(buf, sizeof buf, "%-28s %16s %16s %9s\n", "quantity", "dense", "sparse", "ratio");
  s += buf;
  std::snprintf(buf, sizeof buf, "%-28s %16zu %16zu %8.2fx\n", "prunable weights", p["prunable_dense"].get<std::size_t>(),
                p["prunable_nonzero"].get<std::size_t>(), p["compression_ratio"].get<double>());
  s += buf;
  const double bd = p["backbone_dense"].get<double>(), bs = p["backbone_nonzero"].get<double>();
  std::snprintf(buf, sizeof buf, "%-28s %16.0f %16.0f %8.2fx\n", "backbone parameters", bd, bs, bd / bs);
  s += buf;
  std::snprintf(buf, sizeof buf, "%-28s %16.4g %16.4g %8.2fx\n", "weight-matmul FLOPs", f["weight_dense"].get<double>(),
                f["weight_sparse"].get<double>(), f["weight_ratio"].get<double>());
  s += buf;
  std::snprintf(buf, sizeof buf, "%-28s %16.4g %16.4g %8.2fx\n", "FLOPs incl. attention", f["total_dense"].get<double>(),
                f["total_sparse"].get<double>(), f["total_ratio"].get<double>());
  s += buf;
  std::snprintf(buf, sizeof buf, "remaining weights %.2f%%, seq_len %zu, %s\n", j["remaining_weight_percent"].get<double>(),
                f["seq_len"].get<std::size_t>(), f["convention"].get<std::string>().c_str());
  s += buf;
  return s;
}

int cmd_report(const Args& a) {
  const RunConfig c = load(a);
  const Checkpoint ck = load_model(a.init, "--init", c.model);
  const PruneMask* mask = ck.mask ? &*ck.mask : nullptr;
  Json j = compression_json(ck.params, mask, c.report);
  Json per_layer = Json::array();
  for (const auto& l : count_flops(ck.params.config, c.report.seq_len, mask, c.report.convention).per_layer)
    per_layer.push_back({{"layer", l.layer},
                         {"params_dense", l.params_dense},
                         {"params_sparse", l.params_sparse},
                         {"flops_dense", l.flops_dense},
                         {"flops_sparse", l.flops_sparse}});
  j["per_layer"] = per_layer;
  const std::string table = report_table(j);
  const fs::path out(a.out);
  write_file(out / "report.json", j.dump(2) + "\n");
  write_file(out / "report.txt", table);
  write_file(out / "summary.json", Json{{"command", "report"}, {"report", j}}.dump(2) + "\n");
  std::cout << table;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"kasp: sparse pruning of transformer encoders"};
  app.require_subcommand(1);
  Args args;
  struct Command {
    const char* name;
    const char* help;
    int (*run)(const Args&);
    bool init, teacher, f32;
  };
  const Command commands[] = {
      {"pretrain", "masked-token pretraining (pruned if pretrain.schedule is set)", cmd_pretrain, false, false, true},
      {"finetune", "fine-tune a pretrained checkpoint into a teacher", cmd_finetune, true, false, true},
      {"prune-distill", "prune a pretrained checkpoint while distilling from a teacher", cmd_prune_distill, true, true, true},
      {"prune-finetune", "prune a pretrained checkpoint during fine-tuning", cmd_prune_finetune, true, false, true},
      {"prune-pretrain", "prune during pretraining, then fine-tune with the mask frozen", cmd_prune_pretrain, false, false,
       true},
      {"eval", "evaluate a checkpoint on the task", cmd_eval, true, false, false},
      {"bench", "sparse inference throughput at several compression ratios", cmd_bench, true, false, false},
      {"report", "parameter and FLOP compression of a checkpoint", cmd_report, true, false, false},
  };
  const Command* chosen = nullptr;
  for (const auto& c : commands) {
    CLI::App* sub = app.add_subcommand(c.name, c.help);
    sub->add_option("--config", args.config, "JSON run configuration")->required()->check(CLI::ExistingFile);
    sub->add_option("--out", args.out, "output directory")->required();
    sub->add_option("--seed", args.seed, "override every training and sampling seed");
    if (c.init) sub->add_option("--init", args.init, "input checkpoint");
    if (c.teacher) sub->add_option("--teacher", args.teacher, "fine-tuned teacher checkpoint");
    if (c.f32) sub->add_flag("--f32", args.f32, "store parameters in single precision");
    sub->callback([&chosen, &c] { chosen = &c; });
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }
  try {
    return chosen->run(args);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kExitCheckpoint;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
