// SPDX-License-Identifier: Apache-2.0
#include "kasp/distiller.hpp"

#include "kasp/error.hpp"
#include "kasp/ops.hpp"

namespace kasp {

const char* term_name(DistillTerm term) {
  switch (term) {
    case DistillTerm::Emb: return "emb";
    case DistillTerm::Att: return "att";
    case DistillTerm::Hid: return "hid";
    case DistillTerm::Prd: return "prd";
  }
  return "?";
}

DistillTerm parse_term(const std::string& name) {
  for (auto t : {DistillTerm::Emb, DistillTerm::Att, DistillTerm::Hid, DistillTerm::Prd})
    if (name == term_name(t)) return t;
  throw ConfigError("distill.active_terms", "unknown term '" + name + "'");
}

LayerMap identity_layer_map(std::size_t depth) {
  LayerMap m;
  for (std::size_t i = 0; i < depth; ++i) m.emplace_back(i, i);
  return m;
}

LayerMap uniform_layer_map(std::size_t student_depth, std::size_t teacher_depth) {
  if (student_depth == 0 || teacher_depth % student_depth != 0)
    throw ConfigError("distill.layer_map", "teacher depth must be a multiple of student depth");
  const std::size_t stride = teacher_depth / student_depth;
  LayerMap m;
  for (std::size_t i = 0; i < student_depth; ++i) m.emplace_back(i, (i + 1) * stride - 1);
  return m;
}

LayerMap DistillConfig::resolved_map(std::size_t student_depth) const {
  return layer_map.empty() ? identity_layer_map(student_depth) : layer_map;
}

void DistillConfig::validate(std::size_t student_depth, std::size_t teacher_depth) const {
  if (!(temperature > 0.0)) throw ConfigError("distill.temperature", "must be positive");
  if (active_terms.empty()) throw ConfigError("distill.active_terms", "at least one term must be active");
  if (layer_map.empty() && student_depth != teacher_depth &&
      (active_terms.has(DistillTerm::Att) || active_terms.has(DistillTerm::Hid)))
    throw ConfigError("distill.layer_map", "identity map needs equal student and teacher depth");
  for (std::size_t i = 0; i < layer_map.size(); ++i) {
    const auto [s, t] = layer_map[i];
    if (s >= student_depth || t >= teacher_depth)
      throw ConfigError("distill.layer_map[" + std::to_string(i) + "]", "layer index out of range");
    if (i > 0 && (s <= layer_map[i - 1].first || t <= layer_map[i - 1].second))
      throw ConfigError("distill.layer_map[" + std::to_string(i) + "]", "pairs must be strictly increasing");
  }
}

Tensor loss_emb(const Tensor& student, const Tensor& teacher) {
  if (student.shape() != teacher.shape())
    throw ContractError("embedding outputs differ in shape: student " + shape_str(student.shape()) + ", teacher " +
                        shape_str(teacher.shape()) + " (hidden sizes must match)");
  return mse(student, teacher);
}

namespace {

Tensor layered_mse(const char* what, const std::vector<Tensor>& student, const std::vector<Tensor>& teacher,
                   const LayerMap& map) {
  if (map.empty()) throw ConfigError("distill.layer_map", std::string("empty layer map with ") + what + " term active");
  Tensor total;
  for (const auto& [s, t] : map) {
    if (s >= student.size() || t >= teacher.size())
      throw ContractError(std::string(what) + ": layer pair out of range");
    if (student[s].shape() != teacher[t].shape())
      throw ContractError(std::string(what) + ": mapped layers differ in shape " + shape_str(student[s].shape()) +
                          " vs " + shape_str(teacher[t].shape()));
    Tensor term = mse(student[s], teacher[t]);
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

}  // namespace

Tensor loss_att(const std::vector<Tensor>& student, const std::vector<Tensor>& teacher, const LayerMap& map) {
  return layered_mse("attention", student, teacher, map);
}

Tensor loss_hid(const std::vector<Tensor>& student, const std::vector<Tensor>& teacher, const LayerMap& map) {
  return layered_mse("hidden", student, teacher, map);
}

Tensor loss_prd(const Tensor& student_logits, const Tensor& teacher_logits, double temperature,
                bool symmetric_temperature) {
  if (!(temperature > 0.0)) throw ConfigError("distill.temperature", "must be positive");
  if (student_logits.shape() != teacher_logits.shape() || student_logits.rank() != 2)
    throw ContractError("logits differ in shape: student " + shape_str(student_logits.shape()) + ", teacher " +
                        shape_str(teacher_logits.shape()));
  Tensor target;
  {
    NoGradGuard no_grad;
    Tensor zt = teacher_logits.detach();
    if (symmetric_temperature) zt = scale(zt, 1.0 / temperature);
    target = softmax_rows(zt);
  }
  Tensor logp = log_softmax_rows(temperature == 1.0 ? student_logits : scale(student_logits, 1.0 / temperature));
  double factor = -1.0 / static_cast<double>(student_logits.dim(0));
  if (symmetric_temperature) factor *= temperature * temperature;
  return scale(sum(mul(target, logp)), factor);
}

DistillLoss distill_loss(const ForwardTrace& student, const ForwardTrace& teacher, const DistillConfig& config) {
  const auto map = config.resolved_map(student.hidden.size());
  // the teacher side is a constant target even if its trace carries history
  auto constant = [](const std::vector<Tensor>& xs) {
    std::vector<Tensor> out;
    out.reserve(xs.size());
    for (const auto& x : xs) out.push_back(x.detach());
    return out;
  };
  DistillLoss out;
  Tensor total;
  auto accumulate = [&](const Tensor& term, double& slot) {
    slot = term.item();
    total = total.defined() ? add(total, term) : term;
  };
  if (config.active_terms.has(DistillTerm::Emb)) accumulate(loss_emb(student.embeddings, teacher.embeddings.detach()), out.emb);
  if (config.active_terms.has(DistillTerm::Att)) accumulate(loss_att(student.attentions, constant(teacher.attentions), map), out.att);
  if (config.active_terms.has(DistillTerm::Hid)) accumulate(loss_hid(student.hidden, constant(teacher.hidden), map), out.hid);
  if (config.active_terms.has(DistillTerm::Prd))
    accumulate(loss_prd(student.logits, teacher.logits, config.temperature, config.symmetric_temperature), out.prd);
  if (!total.defined()) throw ConfigError("distill.active_terms", "at least one term must be active");
  out.total = total;
  return out;
}

}  // namespace kasp
