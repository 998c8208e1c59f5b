// SPDX-License-Identifier: Apache-2.0
#include "kasp/config.hpp"

#include <fstream>
#include <limits>
#include <set>

#include "kasp/error.hpp"

namespace kasp {

EncoderConfig BenchConfig::wide_model() {
  EncoderConfig c;
  c.num_layers = 1;
  c.hidden_size = 512;
  c.num_heads = 8;
  c.intermediate_size = 2048;
  c.vocab_size = 64;
  c.max_seq_len = 64;
  return c;
}

EncoderConfig RunConfig::default_model() {
  EncoderConfig c;
  c.num_labels = 8;
  return c;
}

SyntheticTaskConfig RunConfig::default_task() {
  SyntheticTaskConfig c;
  c.num_labels = 8;
  c.size = 1024;
  return c;
}

TrainConfig RunConfig::default_pretrain() {
  TrainConfig c;
  c.steps = 600;
  c.optim.lr = 2e-3;
  return c;
}

TrainConfig RunConfig::default_teacher() {
  TrainConfig c;
  c.steps = 900;
  return c;
}

TrainConfig RunConfig::default_train() {
  TrainConfig c;
  c.steps = 300;
  c.schedule = SparsitySchedule{0.0, 0.95, 0, 150, 10};
  c.augment = {0.1, 3, 0};
  return c;
}

SyntheticTaskConfig RunConfig::default_mlm() {
  SyntheticTaskConfig c;
  c.kind = TaskKind::MlmPretrain;
  c.size = 2048;
  c.dev_size = 256;
  return c;
}

void RunConfig::override_seed(std::uint64_t seed) {
  task.seed = seed;
  mlm.seed = seed;
  pretrain.seed = seed;
  teacher.seed = seed;
  train.seed = seed;
  pretrain.augment.seed = seed;
  teacher.augment.seed = seed;
  train.augment.seed = seed;
  bench.seed = seed;
}

namespace {

class Obj {
 public:
  Obj(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    const Json* v = take(key);
    if (v) read(*v, at(key), out);
  }

  const Json* take(const char* key) {
    used_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!used_.count(it.key())) throw ConfigError(at(it.key()), "unknown key");
  }

  static void read(const Json& v, const std::string& p, double& out) {
    if (!v.is_number()) throw ConfigError(p, "expected a number");
    out = v.get<double>();
  }
  static void read(const Json& v, const std::string& p, bool& out) {
    if (!v.is_boolean()) throw ConfigError(p, "expected true or false");
    out = v.get<bool>();
  }
  static void read(const Json& v, const std::string& p, long& out) {
    if (!v.is_number_integer()) throw ConfigError(p, "expected an integer");
    out = v.get<long>();
  }
  static void read(const Json& v, const std::string& p, std::size_t& out) {
    if (!v.is_number_unsigned()) throw ConfigError(p, "expected a non-negative integer");
    out = v.get<std::size_t>();
  }
  static void read(const Json& v, const std::string& p, std::string& out) {
    if (!v.is_string()) throw ConfigError(p, "expected a string");
    out = v.get<std::string>();
  }

 private:
  const Json& j_;
  std::string path_;
  std::set<std::string> used_;
};

template <class F>
void section(Obj& parent, const char* key, F&& parse) {
  if (const Json* v = parent.take(key)) {
    Obj o(*v, parent.at(key));
    parse(o);
    o.finish();
  }
}

template <class F>
void validated(const std::string& prefix, F&& check) {
  try {
    check();
  } catch (const ConfigError& e) {
    throw e.nested(prefix);
  }
}

EncoderConfig read_encoder(Obj& o, EncoderConfig c) {
  o.get("num_layers", c.num_layers);
  o.get("hidden_size", c.hidden_size);
  o.get("num_heads", c.num_heads);
  o.get("intermediate_size", c.intermediate_size);
  o.get("vocab_size", c.vocab_size);
  o.get("max_seq_len", c.max_seq_len);
  o.get("type_vocab_size", c.type_vocab_size);
  o.get("num_labels", c.num_labels);
  o.get("dropout_prob", c.dropout_prob);
  o.get("layer_norm_eps", c.layer_norm_eps);
  o.get("attn_post_softmax", c.attn_post_softmax);
  return c;
}

void read_task(Obj& o, SyntheticTaskConfig& c) {
  if (const Json* v = o.take("kind")) {
    std::string k;
    Obj::read(*v, o.at("kind"), k);
    if (k == "classification")
      c.kind = TaskKind::Classification;
    else if (k == "mlm_pretrain")
      c.kind = TaskKind::MlmPretrain;
    else
      throw ConfigError(o.at("kind"), "expected classification or mlm_pretrain");
  }
  std::size_t seed = c.seed, world = c.world_seed;
  o.get("seed", seed);
  o.get("world_seed", world);
  c.seed = seed;
  c.world_seed = world;
  o.get("vocab_size", c.vocab_size);
  o.get("seq_len", c.seq_len);
  o.get("num_labels", c.num_labels);
  o.get("size", c.size);
  o.get("dev_size", c.dev_size);
  o.get("num_topics", c.num_topics);
  o.get("topic_tokens", c.topic_tokens);
  o.get("signal_prob", c.signal_prob);
}

void read_train(Obj& o, TrainConfig& c) {
  o.get("steps", c.steps);
  o.get("batch_size", c.batch_size);
  std::size_t seed = c.seed;
  o.get("seed", seed);
  c.seed = seed;
  o.get("eval_every", c.eval_every);
  o.get("log_every", c.log_every);
  o.get("record_wallclock", c.record_wallclock);
  if (const Json* v = o.take("scope")) {
    std::string s;
    Obj::read(*v, o.at("scope"), s);
    if (s == "per_matrix")
      c.scope = PruneScope::PerMatrix;
    else if (s == "global")
      c.scope = PruneScope::Global;
    else
      throw ConfigError(o.at("scope"), "expected per_matrix or global");
  }
  section(o, "optim", [&](Obj& p) {
    auto& a = c.optim;
    p.get("lr", a.lr);
    p.get("beta1", a.beta1);
    p.get("beta2", a.beta2);
    p.get("eps", a.eps);
    p.get("weight_decay", a.weight_decay);
    p.get("warmup_steps", a.warmup_steps);
    p.get("decay_steps", a.decay_steps);
    p.get("max_grad_norm", a.max_grad_norm);
  });
  if (const Json* v = o.take("schedule")) {
    if (v->is_null()) {
      c.schedule.reset();
    } else {
      Obj p(*v, o.at("schedule"));
      SparsitySchedule s;
      p.get("s_init", s.s_init);
      p.get("s_final", s.s_final);
      p.get("t_begin", s.t_begin);
      p.get("t_end", s.t_end);
      p.get("interval", s.interval);
      p.finish();
      c.schedule = s;
    }
  }
  section(o, "distill", [&](Obj& p) {
    auto& d = c.distill;
    p.get("temperature", d.temperature);
    p.get("symmetric_temperature", d.symmetric_temperature);
    if (const Json* v = p.take("active_terms")) {
      if (!v->is_array()) throw ConfigError(p.at("active_terms"), "expected an array of term names");
      TermSet terms;
      for (std::size_t i = 0; i < v->size(); ++i) {
        std::string name;
        const std::string at = p.at("active_terms") + "[" + std::to_string(i) + "]";
        Obj::read((*v)[i], at, name);
        try {
          terms = terms.with(parse_term(name));
        } catch (const ConfigError& e) {
          throw ConfigError(at, e.message());
        }
      }
      d.active_terms = terms;
    }
    if (const Json* v = p.take("layer_map")) {
      if (!v->is_array()) throw ConfigError(p.at("layer_map"), "expected an array of [student, teacher] pairs");
      d.layer_map.clear();
      for (std::size_t i = 0; i < v->size(); ++i) {
        const std::string at = p.at("layer_map") + "[" + std::to_string(i) + "]";
        const Json& pair = (*v)[i];
        if (!pair.is_array() || pair.size() != 2) throw ConfigError(at, "expected [student, teacher]");
        std::size_t s = 0, t = 0;
        Obj::read(pair[0], at, s);
        Obj::read(pair[1], at, t);
        d.layer_map.emplace_back(s, t);
      }
    }
  });
  section(o, "augment", [&](Obj& p) {
    auto& a = c.augment;
    p.get("replace_prob", a.replace_prob);
    p.get("copies", a.copies);
    std::size_t seed = a.seed;
    p.get("seed", seed);
    a.seed = seed;
  });
}

const char* scope_name(PruneScope s) { return s == PruneScope::Global ? "global" : "per_matrix"; }

}  // namespace

EncoderConfig parse_encoder_config(const Json& j, const std::string& path) {
  Obj o(j, path);
  EncoderConfig c = read_encoder(o, EncoderConfig{});
  o.finish();
  validated(path, [&] {
    try {
      c.validate();
    } catch (const ConfigError& e) {
      // validate() reports paths under "model."
      const std::string field = e.path().substr(e.path().find('.') + 1);
      throw ConfigError(field, e.message());
    }
  });
  return c;
}

RunConfig parse_run_config(const Json& j) {
  RunConfig c;
  Obj root(j, "");
  section(root, "model", [&](Obj& o) { c.model = read_encoder(o, c.model); });
  section(root, "task", [&](Obj& o) { read_task(o, c.task); });
  section(root, "mlm", [&](Obj& o) { read_task(o, c.mlm); });
  section(root, "pretrain", [&](Obj& o) { read_train(o, c.pretrain); });
  section(root, "teacher", [&](Obj& o) { read_train(o, c.teacher); });
  section(root, "train", [&](Obj& o) { read_train(o, c.train); });
  section(root, "bench", [&](Obj& o) {
    auto& b = c.bench;
    section(o, "model", [&](Obj& m) { b.model = read_encoder(m, b.model); });
    o.get("batch", b.batch);
    o.get("seq_len", b.seq_len);
    if (const Json* v = o.take("ratios")) {
      if (!v->is_array() || v->empty()) throw ConfigError(o.at("ratios"), "expected a non-empty array of numbers");
      b.ratios.clear();
      for (std::size_t i = 0; i < v->size(); ++i) {
        double r = 0.0;
        Obj::read((*v)[i], o.at("ratios") + "[" + std::to_string(i) + "]", r);
        if (!(r >= 1.0)) throw ConfigError(o.at("ratios") + "[" + std::to_string(i) + "]", "must be at least 1");
        b.ratios.push_back(r);
      }
    }
    o.get("warmup", b.warmup);
    o.get("repetitions", b.repetitions);
    std::size_t seed = b.seed;
    o.get("seed", seed);
    b.seed = seed;
  });
  section(root, "report", [&](Obj& o) {
    o.get("seq_len", c.report.seq_len);
    if (const Json* v = o.take("convention")) {
      std::string s;
      Obj::read(*v, o.at("convention"), s);
      if (s == "two_per_mac")
        c.report.convention = FlopConvention::TwoPerMac;
      else if (s == "mac_only")
        c.report.convention = FlopConvention::MacOnly;
      else
        throw ConfigError(o.at("convention"), "expected two_per_mac or mac_only");
    }
  });
  root.finish();

  auto model_check = [](const EncoderConfig& m, const std::string& prefix) {
    try {
      m.validate();
    } catch (const ConfigError& e) {
      throw ConfigError(prefix + e.path().substr(e.path().find('.')), e.message());
    }
  };
  model_check(c.model, "model");
  model_check(c.bench.model, "bench.model");
  validated("task", [&] { c.task.validate(); });
  validated("mlm", [&] { c.mlm.validate(); });
  if (c.task.kind != TaskKind::Classification) throw ConfigError("task.kind", "must be classification");
  if (c.mlm.kind != TaskKind::MlmPretrain) throw ConfigError("mlm.kind", "must be mlm_pretrain");
  validated("pretrain", [&] { c.pretrain.validate(Strategy::Pretrain); });
  validated("teacher", [&] { c.teacher.validate(Strategy::Finetune); });
  validated("train", [&] { c.train.validate(Strategy::Finetune); });
  if (c.bench.repetitions < 5) throw ConfigError("bench.repetitions", "must be at least 5");
  if (c.bench.batch == 0) throw ConfigError("bench.batch", "must be positive");
  if (c.bench.seq_len == 0 || c.bench.seq_len > c.bench.model.max_seq_len)
    throw ConfigError("bench.seq_len", "must be in [1, bench.model.max_seq_len]");
  if (c.report.seq_len == 0) throw ConfigError("report.seq_len", "must be positive");
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("<file>", "cannot open " + path);
  Json j;
  try {
    j = Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("<file>", std::string("malformed JSON: ") + e.what());
  }
  return parse_run_config(j);
}

Json to_json(const EncoderConfig& c) {
  return Json{{"num_layers", c.num_layers},
              {"hidden_size", c.hidden_size},
              {"num_heads", c.num_heads},
              {"intermediate_size", c.intermediate_size},
              {"vocab_size", c.vocab_size},
              {"max_seq_len", c.max_seq_len},
              {"type_vocab_size", c.type_vocab_size},
              {"num_labels", c.num_labels},
              {"dropout_prob", c.dropout_prob},
              {"layer_norm_eps", c.layer_norm_eps},
              {"attn_post_softmax", c.attn_post_softmax}};
}

Json to_json(const SyntheticTaskConfig& c) {
  return Json{{"kind", c.kind == TaskKind::Classification ? "classification" : "mlm_pretrain"},
              {"seed", c.seed},
              {"world_seed", c.world_seed},
              {"vocab_size", c.vocab_size},
              {"seq_len", c.seq_len},
              {"num_labels", c.num_labels},
              {"size", c.size},
              {"dev_size", c.dev_size},
              {"num_topics", c.num_topics},
              {"topic_tokens", c.topic_tokens},
              {"signal_prob", c.signal_prob}};
}

Json to_json(const TrainConfig& c) {
  Json j{{"steps", c.steps},
         {"batch_size", c.batch_size},
         {"seed", c.seed},
         {"eval_every", c.eval_every},
         {"log_every", c.log_every},
         {"record_wallclock", c.record_wallclock},
         {"scope", scope_name(c.scope)},
         {"optim",
          {{"lr", c.optim.lr},
           {"beta1", c.optim.beta1},
           {"beta2", c.optim.beta2},
           {"eps", c.optim.eps},
           {"weight_decay", c.optim.weight_decay},
           {"warmup_steps", c.optim.warmup_steps},
           {"decay_steps", c.optim.decay_steps},
           {"max_grad_norm", c.optim.max_grad_norm}}}};
  if (c.schedule)
    j["schedule"] = {{"s_init", c.schedule->s_init},
                     {"s_final", c.schedule->s_final},
                     {"t_begin", c.schedule->t_begin},
                     {"t_end", c.schedule->t_end},
                     {"interval", c.schedule->interval}};
  else
    j["schedule"] = nullptr;
  Json terms = Json::array();
  for (auto t : {DistillTerm::Emb, DistillTerm::Att, DistillTerm::Hid, DistillTerm::Prd})
    if (c.distill.active_terms.has(t)) terms.push_back(term_name(t));
  Json map = Json::array();
  for (auto [s, t] : c.distill.layer_map) map.push_back({s, t});
  j["distill"] = {{"temperature", c.distill.temperature},
                  {"active_terms", terms},
                  {"layer_map", map},
                  {"symmetric_temperature", c.distill.symmetric_temperature}};
  j["augment"] = {{"replace_prob", c.augment.replace_prob}, {"copies", c.augment.copies}, {"seed", c.augment.seed}};
  return j;
}

Json to_json(const RunConfig& c) {
  Json ratios = Json::array();
  for (double r : c.bench.ratios) ratios.push_back(r);
  return Json{{"model", to_json(c.model)},
              {"task", to_json(c.task)},
              {"mlm", to_json(c.mlm)},
              {"pretrain", to_json(c.pretrain)},
              {"teacher", to_json(c.teacher)},
              {"train", to_json(c.train)},
              {"bench",
               {{"model", to_json(c.bench.model)},
                {"batch", c.bench.batch},
                {"seq_len", c.bench.seq_len},
                {"ratios", ratios},
                {"warmup", c.bench.warmup},
                {"repetitions", c.bench.repetitions},
                {"seed", c.bench.seed}}},
              {"report",
               {{"seq_len", c.report.seq_len},
                {"convention", c.report.convention == FlopConvention::TwoPerMac ? "two_per_mac" : "mac_only"}}}};
}

}  // namespace kasp
