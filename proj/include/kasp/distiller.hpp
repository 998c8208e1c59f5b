// SPDX-License-Identifier: Apache-2.0
/**
 * @file   distiller.hpp
 * @brief  Teacher-student objective: embedding, attention and hidden-state
 *         MSE terms plus a soft cross-entropy on the logits, summed with unit
 *         weights.
 */
#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "kasp/encoder.hpp"
#include "kasp/tensor.hpp"

namespace kasp {

enum class DistillTerm : std::uint8_t { Emb = 1, Att = 2, Hid = 4, Prd = 8 };

/// Set of active terms. Summation always runs in the order emb, att, hid, prd.
class TermSet {
 public:
  constexpr TermSet() = default;
  constexpr TermSet(std::initializer_list<DistillTerm> terms) {
    for (auto t : terms) bits_ |= static_cast<std::uint8_t>(t);
  }
  static constexpr TermSet all() { return {DistillTerm::Emb, DistillTerm::Att, DistillTerm::Hid, DistillTerm::Prd}; }
  constexpr bool has(DistillTerm t) const { return bits_ & static_cast<std::uint8_t>(t); }
  constexpr bool empty() const { return bits_ == 0; }
  constexpr TermSet with(DistillTerm t) const {
    TermSet s = *this;
    s.bits_ |= static_cast<std::uint8_t>(t);
    return s;
  }
  constexpr bool operator==(const TermSet&) const = default;

 private:
  std::uint8_t bits_ = 0;
};

const char* term_name(DistillTerm term);
/// Parses "emb", "att", "hid", "prd"; throws ConfigError otherwise.
DistillTerm parse_term(const std::string& name);

using LayerMap = std::vector<std::pair<std::size_t, std::size_t>>;  // (student, teacher)

LayerMap identity_layer_map(std::size_t depth);
/// Student layer i -> teacher layer (i + 1) * (teacher / student) - 1.
LayerMap uniform_layer_map(std::size_t student_depth, std::size_t teacher_depth);

struct DistillConfig {
  double temperature = 1.0;
  TermSet active_terms = TermSet::all();
  /// Empty means identity over the shared depth.
  LayerMap layer_map;
  /// Scale both logit sets by 1/temp and multiply the term by temp^2.
  bool symmetric_temperature = false;

  /// Validates against student/teacher depths; throws ConfigError.
  void validate(std::size_t student_depth, std::size_t teacher_depth) const;
  LayerMap resolved_map(std::size_t student_depth) const;
  bool operator==(const DistillConfig&) const = default;
};

Tensor loss_emb(const Tensor& student, const Tensor& teacher);
/// Sum over mapped pairs of the per-pair MSE.
Tensor loss_att(const std::vector<Tensor>& student, const std::vector<Tensor>& teacher, const LayerMap& map);
Tensor loss_hid(const std::vector<Tensor>& student, const std::vector<Tensor>& teacher, const LayerMap& map);
/// Batch mean of -sum_c softmax(z_T)_c * log_softmax(z_S / temp)_c. Teacher
/// logits are treated as constants.
Tensor loss_prd(const Tensor& student_logits, const Tensor& teacher_logits, double temperature,
                bool symmetric_temperature = false);

struct DistillLoss {
  Tensor total;
  double emb = 0.0, att = 0.0, hid = 0.0, prd = 0.0;
};

DistillLoss distill_loss(const ForwardTrace& student, const ForwardTrace& teacher, const DistillConfig& config);

}  // namespace kasp
