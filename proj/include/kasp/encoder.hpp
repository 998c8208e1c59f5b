// SPDX-License-Identifier: Apache-2.0
/**
 * @file   encoder.hpp
 * @brief  BERT-style post-layernorm transformer encoder with pooler and
 *         classifier head.
 *
 * Weight matrices are stored [in x out] so every linear map is y = x W + b.
 * Activations flow as [batch * seq x hidden] matrices.
 */
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "kasp/mask.hpp"
#include "kasp/tensor.hpp"

namespace kasp {

struct EncoderConfig {
  std::size_t num_layers = 4;
  std::size_t hidden_size = 32;
  std::size_t num_heads = 4;
  std::size_t intermediate_size = 64;
  std::size_t vocab_size = 64;
  std::size_t max_seq_len = 16;
  std::size_t type_vocab_size = 2;
  std::size_t num_labels = 2;
  double dropout_prob = 0.1;
  double layer_norm_eps = 1e-12;
  /// Record attention probabilities instead of raw scores in ForwardTrace.
  bool attn_post_softmax = false;

  /// Throws ConfigError naming the offending field.
  void validate() const;
  std::size_t head_size() const { return hidden_size / num_heads; }

  static EncoderConfig bert_base();
  bool operator==(const EncoderConfig&) const = default;
};

/// The six linear maps of a layer that are subject to pruning.
enum class PrunableKind : std::uint8_t { Query, Key, Value, AttnOutput, FfnIn, FfnOut };
inline constexpr std::size_t kPrunablePerLayer = 6;

const char* prunable_kind_name(PrunableKind kind);

struct LayerParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor w1, b1, w2, b2;
  Tensor ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
};

enum class ParamRole : std::uint8_t { Weight, Bias, Norm, Embedding };

struct ParamRef {
  std::string name;
  Tensor* tensor;
  ParamRole role;
  int prunable_id;  // -1 when not prunable
};

class EncoderParams {
 public:
  EncoderParams() = default;
  EncoderParams(EncoderParams&&) noexcept = default;
  EncoderParams& operator=(EncoderParams&&) noexcept = default;
  EncoderParams(const EncoderParams&) = delete;
  EncoderParams& operator=(const EncoderParams&) = delete;

  EncoderConfig config;
  Tensor token_emb, position_emb, segment_emb;
  Tensor emb_ln_gamma, emb_ln_beta;
  std::vector<LayerParams> layers;
  Tensor pooler_w, pooler_b;
  Tensor classifier_w, classifier_b;
  /// Output bias of the tied masked-token prediction head.
  Tensor mlm_bias;

  /// Every parameter in canonical order (embeddings, layers, heads).
  std::vector<ParamRef> parameters();
  std::vector<std::pair<std::string, const Tensor*>> named_tensors() const;

  std::size_t num_prunable() const { return layers.size() * kPrunablePerLayer; }
  Tensor& prunable(std::size_t id);
  const Tensor& prunable(std::size_t id) const;
  static std::string prunable_name(std::size_t id);

  /// Deep copy with fresh, gradient-free nodes.
  EncoderParams clone() const;
  void zero_grad();
  bool bitwise_equal(const EncoderParams& other) const;

  /// All-zeros model of the given shape, every tensor requiring grad.
  static EncoderParams zeros(const EncoderConfig& config);
};

/// Truncated-normal (sigma 0.02, +-2 sigma) weights, zero biases, unit/zero
/// layernorm parameters.
EncoderParams init_params(const EncoderConfig& config, std::uint64_t seed);

/// Token ids for a [batch x seq] block, row-major. Empty `segments` means
/// all segment 0.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<int> tokens;
  std::vector<int> segments;
};

struct ForwardOptions {
  bool train = false;
  std::uint64_t seed = 0;
};

struct ForwardTrace {
  Tensor embeddings;                // [batch x seq x hidden]
  std::vector<Tensor> attentions;   // per layer [batch x heads x seq x seq]
  std::vector<Tensor> hidden;       // per layer [batch x seq x hidden]
  Tensor logits;                    // [batch x num_labels]
  Tensor sequence_output;           // last layer as [batch*seq x hidden]
};

ForwardTrace forward(const EncoderParams& params, const TokenBatch& batch, const PruneMask* mask = nullptr,
                     ForwardOptions options = {});

/// Tied-embedding token prediction at the given flat positions; returns
/// [positions x vocab] logits.
Tensor mlm_logits(const EncoderParams& params, const Tensor& sequence_output,
                  std::span<const std::size_t> positions);

struct ParamCount {
  std::size_t attention = 0;       // Q, K, V, output projections with biases
  std::size_t ffn = 0;             // both feed-forward maps with biases
  std::size_t layer_norm = 0;      // two norms per layer
  std::size_t pooler = 0;
  std::size_t embedding_norm = 0;  // reported, not in backbone_total
  std::size_t embedding_tables = 0;
  std::size_t classifier = 0;
  std::size_t prunable = 0;        // weight matrices only
  std::size_t per_layer = 0;
  std::size_t backbone_total = 0;
  bool includes_pooler = true;
  std::string convention;
};

ParamCount count_encoder_params(const EncoderConfig& config, bool include_pooler = true);

}  // namespace kasp
