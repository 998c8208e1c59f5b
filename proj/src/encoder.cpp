// SPDX-License-Identifier: Apache-2.0
#include "kasp/encoder.hpp"

#include <algorithm>
#include <bit>
#include <cmath>

#include "kasp/error.hpp"
#include "kasp/ops.hpp"
#include "kasp/random.hpp"

namespace kasp {

void EncoderConfig::validate() const {
  auto positive = [](std::size_t v, const char* field) {
    if (v == 0) throw ConfigError(std::string("model.") + field, "must be positive");
  };
  positive(num_layers, "num_layers");
  positive(hidden_size, "hidden_size");
  positive(num_heads, "num_heads");
  positive(intermediate_size, "intermediate_size");
  positive(vocab_size, "vocab_size");
  positive(max_seq_len, "max_seq_len");
  positive(type_vocab_size, "type_vocab_size");
  positive(num_labels, "num_labels");
  if (hidden_size % num_heads != 0) throw ConfigError("model.num_heads", "must divide hidden_size");
  if (!(dropout_prob >= 0.0 && dropout_prob < 1.0)) throw ConfigError("model.dropout_prob", "must be in [0, 1)");
  if (!(layer_norm_eps > 0.0)) throw ConfigError("model.layer_norm_eps", "must be positive");
}

EncoderConfig EncoderConfig::bert_base() {
  EncoderConfig c;
  c.num_layers = 12;
  c.hidden_size = 768;
  c.num_heads = 12;
  c.intermediate_size = 3072;
  c.vocab_size = 30522;
  c.max_seq_len = 512;
  c.type_vocab_size = 2;
  c.num_labels = 2;
  return c;
}

const char* prunable_kind_name(PrunableKind kind) {
  switch (kind) {
    case PrunableKind::Query: return "attn.query";
    case PrunableKind::Key: return "attn.key";
    case PrunableKind::Value: return "attn.value";
    case PrunableKind::AttnOutput: return "attn.output";
    case PrunableKind::FfnIn: return "ffn.in";
    case PrunableKind::FfnOut: return "ffn.out";
  }
  return "?";
}

namespace {

Tensor& layer_weight(LayerParams& l, PrunableKind kind) {
  switch (kind) {
    case PrunableKind::Query: return l.wq;
    case PrunableKind::Key: return l.wk;
    case PrunableKind::Value: return l.wv;
    case PrunableKind::AttnOutput: return l.wo;
    case PrunableKind::FfnIn: return l.w1;
    case PrunableKind::FfnOut: return l.w2;
  }
  throw ContractError("bad prunable kind");
}

Tensor& layer_bias(LayerParams& l, PrunableKind kind) {
  switch (kind) {
    case PrunableKind::Query: return l.bq;
    case PrunableKind::Key: return l.bk;
    case PrunableKind::Value: return l.bv;
    case PrunableKind::AttnOutput: return l.bo;
    case PrunableKind::FfnIn: return l.b1;
    case PrunableKind::FfnOut: return l.b2;
  }
  throw ContractError("bad prunable kind");
}

}  // namespace

std::string EncoderParams::prunable_name(std::size_t id) {
  const auto kind = static_cast<PrunableKind>(id % kPrunablePerLayer);
  return "layer." + std::to_string(id / kPrunablePerLayer) + "." + prunable_kind_name(kind) + ".weight";
}

std::vector<ParamRef> EncoderParams::parameters() {
  std::vector<ParamRef> out;
  out.push_back({"embeddings.token", &token_emb, ParamRole::Embedding, -1});
  out.push_back({"embeddings.position", &position_emb, ParamRole::Embedding, -1});
  out.push_back({"embeddings.segment", &segment_emb, ParamRole::Embedding, -1});
  out.push_back({"embeddings.norm.gamma", &emb_ln_gamma, ParamRole::Norm, -1});
  out.push_back({"embeddings.norm.beta", &emb_ln_beta, ParamRole::Norm, -1});
  for (std::size_t i = 0; i < layers.size(); ++i) {
    auto& l = layers[i];
    const std::string p = "layer." + std::to_string(i) + ".";
    for (std::size_t k = 0; k < kPrunablePerLayer; ++k) {
      const auto kind = static_cast<PrunableKind>(k);
      const std::string base = p + prunable_kind_name(kind);
      out.push_back({base + ".weight", &layer_weight(l, kind), ParamRole::Weight,
                     static_cast<int>(i * kPrunablePerLayer + k)});
      out.push_back({base + ".bias", &layer_bias(l, kind), ParamRole::Bias, -1});
    }
    out.push_back({p + "norm1.gamma", &l.ln1_gamma, ParamRole::Norm, -1});
    out.push_back({p + "norm1.beta", &l.ln1_beta, ParamRole::Norm, -1});
    out.push_back({p + "norm2.gamma", &l.ln2_gamma, ParamRole::Norm, -1});
    out.push_back({p + "norm2.beta", &l.ln2_beta, ParamRole::Norm, -1});
  }
  out.push_back({"pooler.weight", &pooler_w, ParamRole::Weight, -1});
  out.push_back({"pooler.bias", &pooler_b, ParamRole::Bias, -1});
  out.push_back({"classifier.weight", &classifier_w, ParamRole::Weight, -1});
  out.push_back({"classifier.bias", &classifier_b, ParamRole::Bias, -1});
  out.push_back({"mlm.bias", &mlm_bias, ParamRole::Bias, -1});
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> EncoderParams::named_tensors() const {
  auto refs = const_cast<EncoderParams*>(this)->parameters();
  std::vector<std::pair<std::string, const Tensor*>> out;
  out.reserve(refs.size());
  for (auto& r : refs) out.emplace_back(std::move(r.name), r.tensor);
  return out;
}

Tensor& EncoderParams::prunable(std::size_t id) {
  if (id >= num_prunable()) throw ContractError("prunable id " + std::to_string(id) + " out of range");
  return layer_weight(layers[id / kPrunablePerLayer], static_cast<PrunableKind>(id % kPrunablePerLayer));
}

const Tensor& EncoderParams::prunable(std::size_t id) const { return const_cast<EncoderParams*>(this)->prunable(id); }

EncoderParams EncoderParams::zeros(const EncoderConfig& c) {
  c.validate();
  const std::size_t h = c.hidden_size, i = c.intermediate_size;
  auto z = [](Shape s) { return Tensor::zeros(std::move(s), true); };
  auto one = [](std::size_t n) { return Tensor::full({n}, 1.0, true); };
  EncoderParams p;
  p.config = c;
  p.token_emb = z({c.vocab_size, h});
  p.position_emb = z({c.max_seq_len, h});
  p.segment_emb = z({c.type_vocab_size, h});
  p.emb_ln_gamma = one(h);
  p.emb_ln_beta = z({h});
  p.layers.resize(c.num_layers);
  for (auto& l : p.layers) {
    l.wq = z({h, h}), l.bq = z({h});
    l.wk = z({h, h}), l.bk = z({h});
    l.wv = z({h, h}), l.bv = z({h});
    l.wo = z({h, h}), l.bo = z({h});
    l.w1 = z({h, i}), l.b1 = z({i});
    l.w2 = z({i, h}), l.b2 = z({h});
    l.ln1_gamma = one(h), l.ln1_beta = z({h});
    l.ln2_gamma = one(h), l.ln2_beta = z({h});
  }
  p.pooler_w = z({h, h});
  p.pooler_b = z({h});
  p.classifier_w = z({h, c.num_labels});
  p.classifier_b = z({c.num_labels});
  p.mlm_bias = z({c.vocab_size});
  return p;
}

EncoderParams init_params(const EncoderConfig& config, std::uint64_t seed) {
  auto p = EncoderParams::zeros(config);
  Rng rng(seed);
  for (auto& ref : p.parameters()) {
    if (ref.role != ParamRole::Weight && ref.role != ParamRole::Embedding) continue;
    for (auto& v : ref.tensor->mutable_values()) v = rng.truncated_normal(0.02);
  }
  return p;
}

EncoderParams EncoderParams::clone() const {
  EncoderParams out = zeros(config);
  auto src = const_cast<EncoderParams*>(this)->parameters();
  auto dst = out.parameters();
  for (std::size_t i = 0; i < src.size(); ++i) {
    auto v = src[i].tensor->values();
    std::copy(v.begin(), v.end(), dst[i].tensor->mutable_values().begin());
  }
  return out;
}

void EncoderParams::zero_grad() {
  for (auto& ref : parameters()) ref.tensor->clear_grad();
}

bool EncoderParams::bitwise_equal(const EncoderParams& other) const {
  if (!(config == other.config)) return false;
  auto a = named_tensors();
  auto b = other.named_tensors();
  for (std::size_t i = 0; i < a.size(); ++i) {
    auto x = a[i].second->values(), y = b[i].second->values();
    if (x.size() != y.size()) return false;
    if (!std::equal(x.begin(), x.end(), y.begin(), [](double u, double v) {
          return std::bit_cast<std::uint64_t>(u) == std::bit_cast<std::uint64_t>(v);
        }))
      return false;
  }
  return true;
}

namespace {

void check_mask(const EncoderParams& params, const PruneMask& mask) {
  if (mask.size() != params.num_prunable())
    throw ContractError("mask covers " + std::to_string(mask.size()) + " matrices, model has " +
                        std::to_string(params.num_prunable()));
  for (std::size_t id = 0; id < mask.size(); ++id)
    if (mask.matrices[id].size() != params.prunable(id).numel())
      throw ContractError("mask for " + EncoderParams::prunable_name(id) + " has wrong size");
}

}  // namespace

ForwardTrace forward(const EncoderParams& params, const TokenBatch& batch, const PruneMask* mask,
                     ForwardOptions options) {
  const auto& c = params.config;
  const std::size_t B = batch.batch, S = batch.seq, H = c.hidden_size, A = c.num_heads, d = c.head_size();
  const std::size_t N = B * S;
  if (B == 0 || S == 0) throw InputError("empty batch");
  if (S > c.max_seq_len)
    throw InputError("sequence length " + std::to_string(S) + " exceeds max_seq_len " + std::to_string(c.max_seq_len));
  if (batch.tokens.size() != N) throw InputError("token block does not match batch x seq");
  if (!batch.segments.empty() && batch.segments.size() != N) throw InputError("segment block does not match batch x seq");
  if (mask) check_mask(params, *mask);

  Rng rng(mix_seed(options.seed, 0xd20));
  const double p_drop = options.train ? c.dropout_prob : 0.0;
  auto drop = [&](const Tensor& x) { return dropout(x, p_drop, rng); };

  std::vector<int> positions(N), segments(N, 0);
  for (std::size_t i = 0; i < N; ++i) positions[i] = static_cast<int>(i % S);
  if (!batch.segments.empty()) segments = batch.segments;

  Tensor emb = add(add(embedding(params.token_emb, batch.tokens), embedding(params.position_emb, positions)),
                   embedding(params.segment_emb, segments));
  Tensor x = drop(layer_norm(emb, params.emb_ln_gamma, params.emb_ln_beta, c.layer_norm_eps));

  ForwardTrace trace;
  trace.embeddings = reshape(x, {B, S, H});

  auto weight = [&](std::size_t id) -> Tensor {
    const Tensor& w = params.prunable(id);
    return mask ? apply_binary_mask(w, mask->matrices[id]) : w;
  };
  auto split_heads = [&](const Tensor& t) { return permute(reshape(t, {B, S, A, d}), {0, 2, 1, 3}); };
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

  for (std::size_t li = 0; li < params.layers.size(); ++li) {
    const auto& l = params.layers[li];
    const std::size_t base = li * kPrunablePerLayer;
    Tensor q = add_bias(matmul(x, weight(base + 0)), l.bq);
    Tensor k = add_bias(matmul(x, weight(base + 1)), l.bk);
    Tensor v = add_bias(matmul(x, weight(base + 2)), l.bv);

    Tensor scores = scale(bmm(split_heads(q), split_heads(k), true), inv_sqrt_d);
    Tensor probs = softmax_rows(scores);
    trace.attentions.push_back(c.attn_post_softmax ? probs : scores);

    Tensor ctx = bmm(drop(probs), split_heads(v));
    ctx = reshape(permute(ctx, {0, 2, 1, 3}), {N, H});
    Tensor attn = drop(add_bias(matmul(ctx, weight(base + 3)), l.bo));
    Tensor x1 = layer_norm(add(x, attn), l.ln1_gamma, l.ln1_beta, c.layer_norm_eps);

    Tensor inner = gelu(add_bias(matmul(x1, weight(base + 4)), l.b1));
    Tensor ff = drop(add_bias(matmul(inner, weight(base + 5)), l.b2));
    x = layer_norm(add(x1, ff), l.ln2_gamma, l.ln2_beta, c.layer_norm_eps);
    trace.hidden.push_back(reshape(x, {B, S, H}));
  }

  std::vector<std::size_t> first(B);
  for (std::size_t b = 0; b < B; ++b) first[b] = b * S;
  Tensor pooled = tanh(add_bias(matmul(select_rows(x, first), params.pooler_w), params.pooler_b));
  trace.logits = add_bias(matmul(drop(pooled), params.classifier_w), params.classifier_b);
  trace.sequence_output = x;
  return trace;
}

Tensor mlm_logits(const EncoderParams& params, const Tensor& sequence_output, std::span<const std::size_t> positions) {
  Tensor rows = select_rows(sequence_output, positions);
  return add_bias(matmul_nt(rows, params.token_emb), params.mlm_bias);
}

ParamCount count_encoder_params(const EncoderConfig& c, bool include_pooler) {
  c.validate();
  const std::size_t h = c.hidden_size, i = c.intermediate_size, L = c.num_layers;
  ParamCount out;
  out.attention = L * 4 * (h * h + h);
  out.ffn = L * ((h * i + i) + (i * h + h));
  out.layer_norm = L * 2 * (2 * h);
  out.per_layer = 4 * (h * h + h) + (h * i + i) + (i * h + h) + 2 * 2 * h;
  out.pooler = h * h + h;
  out.embedding_norm = 2 * h;
  out.embedding_tables = (c.vocab_size + c.max_seq_len + c.type_vocab_size) * h;
  out.classifier = h * c.num_labels + c.num_labels;
  out.prunable = L * (4 * h * h + 2 * h * i);
  out.includes_pooler = include_pooler;
  out.backbone_total = out.attention + out.ffn + out.layer_norm + (include_pooler ? out.pooler : 0);
  out.convention = include_pooler
                       ? "backbone = layers (attention, ffn, layernorm) + pooler; excludes embedding tables, "
                         "embedding layernorm, classifier"
                       : "backbone = layers (attention, ffn, layernorm); excludes pooler, embedding tables, "
                         "embedding layernorm, classifier";
  return out;
}

}  // namespace kasp
