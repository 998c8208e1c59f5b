// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>

#include "kasp/encoder.hpp"
#include "kasp/error.hpp"
#include "kasp/ops.hpp"
#include "kasp/pruner.hpp"
#include "support.hpp"

using namespace kasp;

namespace {

EncoderConfig toy() {
  EncoderConfig c;
  c.num_layers = 2;
  c.hidden_size = 8;
  c.num_heads = 2;
  c.intermediate_size = 16;
  c.vocab_size = 32;
  return c;
}

TokenBatch batch_of(const EncoderConfig& c, std::size_t b, std::size_t s, std::uint64_t seed) {
  Rng rng(seed);
  return kasp::testing::detail::random_batch(rng, c, b, s);
}

void set(Tensor& t, std::vector<double> v) {
  auto dst = t.mutable_values();
  REQUIRE(dst.size() == v.size());
  std::copy(v.begin(), v.end(), dst.begin());
}

}  // namespace

TEST_CASE("config validation") {
  EncoderConfig c = toy();
  c.num_heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = toy();
  c.dropout_prob = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = toy();
  c.num_layers = 0;
  try {
    c.validate();
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.path() == "model.num_layers");
  }
}

TEST_CASE("init is seeded, biases zero, weights truncated") {
  const auto a = init_params(toy(), 42), b = init_params(toy(), 42), c = init_params(toy(), 43);
  CHECK(a.bitwise_equal(b));
  CHECK_FALSE(a.bitwise_equal(c));
  auto refs = const_cast<EncoderParams&>(a).parameters();
  for (const auto& r : refs) {
    if (r.role == ParamRole::Bias)
      for (double v : r.tensor->values()) CHECK(v == 0.0);
    if (r.role == ParamRole::Norm) {
      const double expect = r.name.ends_with("gamma") ? 1.0 : 0.0;
      for (double v : r.tensor->values()) CHECK(v == expect);
    }
    if (r.role == ParamRole::Weight || r.role == ParamRole::Embedding)
      for (double v : r.tensor->values()) CHECK(std::abs(v) <= 0.04);
  }

  EncoderConfig wide;
  wide.num_layers = 1;
  wide.hidden_size = 768;
  wide.num_heads = 12;
  wide.intermediate_size = 768;
  wide.vocab_size = 8;
  wide.max_seq_len = 8;
  const auto p = init_params(wide, 7);
  const auto w = p.layers[0].wq.values();
  double mean = 0.0;
  for (double v : w) mean += v;
  mean /= static_cast<double>(w.size());
  CHECK(std::abs(mean) < 3.0 * 0.02 / std::sqrt(static_cast<double>(w.size())));
}

TEST_CASE("prunable set is exactly six matrices per layer") {
  auto p = init_params(toy(), 1);
  CHECK(p.num_prunable() == 12);
  std::size_t prunable = 0;
  for (const auto& r : p.parameters()) {
    if (r.prunable_id >= 0) {
      ++prunable;
      CHECK(r.role == ParamRole::Weight);
      CHECK(r.tensor == &p.prunable(static_cast<std::size_t>(r.prunable_id)));
      CHECK(r.name == EncoderParams::prunable_name(static_cast<std::size_t>(r.prunable_id)));
    }
  }
  CHECK(prunable == 12);
  CHECK(EncoderParams::prunable_name(0) == "layer.0.attn.query.weight");
  CHECK(EncoderParams::prunable_name(11) == "layer.1.ffn.out.weight");
}

TEST_CASE("forward trace shapes") {
  const auto c = toy();
  const auto p = init_params(c, 3);
  const auto tr = forward(p, batch_of(c, 3, 4, 1), nullptr);
  CHECK(tr.embeddings.shape() == Shape{3, 4, 8});
  REQUIRE(tr.attentions.size() == 2);
  REQUIRE(tr.hidden.size() == 2);
  for (const auto& a : tr.attentions) CHECK(a.shape() == Shape{3, 2, 4, 4});
  for (const auto& h : tr.hidden) CHECK(h.shape() == Shape{3, 4, 8});
  CHECK(tr.logits.shape() == Shape{3, c.num_labels});
}

TEST_CASE("forward input errors") {
  const auto c = toy();
  const auto p = init_params(c, 3);
  TokenBatch b = batch_of(c, 1, 4, 2);
  b.tokens[1] = 32;
  CHECK_THROWS_AS(forward(p, b, nullptr), InputError);
  CHECK_THROWS_AS(forward(p, batch_of(c, 1, 17, 2), nullptr), InputError);
  PruneMask wrong;
  CHECK_THROWS_AS(forward(p, batch_of(c, 1, 4, 2), &wrong), ContractError);
}

TEST_CASE("all-ones mask is bitwise neutral; eval mode ignores the seed") {
  const auto c = toy();
  const auto p = init_params(c, 5);
  const auto b = batch_of(c, 2, 5, 9);
  const PruneMask ones = full_mask(p);
  const auto t0 = forward(p, b, nullptr, {false, 1});
  const auto t1 = forward(p, b, &ones, {false, 2});
  for (std::size_t i = 0; i < t0.logits.numel(); ++i) CHECK(t0.logits.values()[i] == t1.logits.values()[i]);
  for (std::size_t l = 0; l < 2; ++l)
    for (std::size_t i = 0; i < t0.hidden[l].numel(); ++i) CHECK(t0.hidden[l].values()[i] == t1.hidden[l].values()[i]);

  const auto d1 = forward(p, b, nullptr, {true, 1}), d2 = forward(p, b, nullptr, {true, 1}),
             d3 = forward(p, b, nullptr, {true, 2});
  bool differs = false;
  for (std::size_t i = 0; i < d1.logits.numel(); ++i) {
    CHECK(d1.logits.values()[i] == d2.logits.values()[i]);
    differs = differs || d1.logits.values()[i] != d3.logits.values()[i];
  }
  CHECK(differs);
}

TEST_CASE("recorded attention scores are pre-softmax") {
  EncoderConfig c = toy();
  const auto p = init_params(c, 8);
  const auto b = batch_of(c, 2, 4, 3);
  const auto pre = forward(p, b, nullptr);
  c.attn_post_softmax = true;
  EncoderParams q = p.clone();
  q.config = c;
  const auto post = forward(q, b, nullptr);
  for (std::size_t l = 0; l < 2; ++l) {
    const Tensor s = softmax_rows(pre.attentions[l]);
    for (std::size_t i = 0; i < s.numel(); ++i) CHECK(std::abs(s.values()[i] - post.attentions[l].values()[i]) < 1e-12);
    for (std::size_t r = 0; r < s.numel() / 4; ++r) {
      double sum = 0.0;
      for (std::size_t j = 0; j < 4; ++j) sum += s.values()[r * 4 + j];
      CHECK(std::abs(sum - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("every prunable matrix receives a gradient") {
  auto p = init_params(toy(), 4);
  const auto tr = forward(p, batch_of(toy(), 2, 4, 4), nullptr);
  sum(mul(tr.hidden.back(), tr.hidden.back())).backward();
  for (std::size_t id = 0; id < p.num_prunable(); ++id) {
    REQUIRE(p.prunable(id).has_grad());
    double norm = 0.0;
    for (double g : p.prunable(id).grad()) norm += g * g;
    CHECK(norm > 0.0);
  }
}

TEST_CASE("micro encoder matches a step-by-step hand evaluation") {
  EncoderConfig c;
  c.num_layers = 1;
  c.hidden_size = 2;
  c.num_heads = 1;
  c.intermediate_size = 3;
  c.vocab_size = 4;
  c.max_seq_len = 2;
  c.type_vocab_size = 2;
  c.num_labels = 2;
  auto p = EncoderParams::zeros(c);
  set(p.token_emb, {0.1, -0.2, 0.4, 0.3, -0.5, 0.2, 0.3, 0.9});
  set(p.position_emb, {0.05, 0.1, -0.1, 0.2});
  set(p.segment_emb, {0.0, 0.0, 0.3, -0.3});
  set(p.emb_ln_gamma, {1.1, 0.9});
  set(p.emb_ln_beta, {0.05, -0.05});
  auto& l = p.layers[0];
  set(l.wq, {0.5, -0.3, 0.2, 0.8});
  set(l.bq, {0.1, 0.0});
  set(l.wk, {-0.4, 0.6, 0.7, 0.1});
  set(l.bk, {0.0, -0.2});
  set(l.wv, {0.9, 0.2, -0.1, 0.4});
  set(l.bv, {0.05, 0.05});
  set(l.wo, {0.3, -0.6, 0.5, 0.2});
  set(l.bo, {-0.1, 0.1});
  set(l.ln1_gamma, {0.8, 1.2});
  set(l.ln1_beta, {0.1, 0.0});
  set(l.w1, {0.2, -0.5, 0.7, 0.4, 0.3, -0.2});
  set(l.b1, {0.0, 0.1, -0.1});
  set(l.w2, {0.6, -0.1, -0.3, 0.5, 0.2, 0.2});
  set(l.b2, {0.02, -0.02});
  set(l.ln2_gamma, {1.0, 0.7});
  set(l.ln2_beta, {-0.1, 0.2});
  set(p.pooler_w, {0.7, -0.2, 0.4, 0.9});
  set(p.pooler_b, {0.1, -0.1});
  set(p.classifier_w, {1.5, -0.8, -0.6, 1.1});
  set(p.classifier_b, {0.2, -0.3});

  const TokenBatch batch{1, 2, {1, 3}, {0, 1}};
  const auto got = forward(p, batch, nullptr).logits;

  // Token rows: 0.4,0.3 and 0.3,0.9; position rows 0.05,0.1 and -0.1,0.2;
  // segment rows 0,0 and 0.3,-0.3.
  double e[2][2] = {{0.4 + 0.05 + 0.0, 0.3 + 0.1 + 0.0}, {0.3 - 0.1 + 0.3, 0.9 + 0.2 - 0.3}};
  auto ln2 = [](double r[2], const double g[2], const double b[2]) {
    const double mu = (r[0] + r[1]) / 2.0;
    const double var = ((r[0] - mu) * (r[0] - mu) + (r[1] - mu) * (r[1] - mu)) / 2.0;
    const double inv = 1.0 / std::sqrt(var + 1e-12);
    for (int j = 0; j < 2; ++j) r[j] = (r[j] - mu) * inv * g[j] + b[j];
  };
  const double eg[2] = {1.1, 0.9}, eb[2] = {0.05, -0.05};
  ln2(e[0], eg, eb);
  ln2(e[1], eg, eb);

  // W is stored [in x out]: y_j = sum_i x_i W[i][j] + b_j
  auto lin = [](const double x[2], const double W[4], const double b[2], double y[2]) {
    y[0] = x[0] * W[0] + x[1] * W[2] + b[0];
    y[1] = x[0] * W[1] + x[1] * W[3] + b[1];
  };
  const double Wq[4] = {0.5, -0.3, 0.2, 0.8}, bq[2] = {0.1, 0.0};
  const double Wk[4] = {-0.4, 0.6, 0.7, 0.1}, bk[2] = {0.0, -0.2};
  const double Wv[4] = {0.9, 0.2, -0.1, 0.4}, bv[2] = {0.05, 0.05};
  const double Wo[4] = {0.3, -0.6, 0.5, 0.2}, bo[2] = {-0.1, 0.1};
  double q[2][2], k[2][2], v[2][2];
  for (int t = 0; t < 2; ++t) {
    lin(e[t], Wq, bq, q[t]);
    lin(e[t], Wk, bk, k[t]);
    lin(e[t], Wv, bv, v[t]);
  }
  double x1[2][2];
  for (int t = 0; t < 2; ++t) {
    const double s0 = (q[t][0] * k[0][0] + q[t][1] * k[0][1]) / std::sqrt(2.0);
    const double s1 = (q[t][0] * k[1][0] + q[t][1] * k[1][1]) / std::sqrt(2.0);
    const double p0 = 1.0 / (1.0 + std::exp(s1 - s0)), p1 = 1.0 - p0;
    const double ctx[2] = {p0 * v[0][0] + p1 * v[1][0], p0 * v[0][1] + p1 * v[1][1]};
    double att[2];
    lin(ctx, Wo, bo, att);
    x1[t][0] = e[t][0] + att[0];
    x1[t][1] = e[t][1] + att[1];
    const double g1[2] = {0.8, 1.2}, b1n[2] = {0.1, 0.0};
    ln2(x1[t], g1, b1n);
  }
  const double W1[6] = {0.2, -0.5, 0.7, 0.4, 0.3, -0.2}, b1[3] = {0.0, 0.1, -0.1};
  const double W2[6] = {0.6, -0.1, -0.3, 0.5, 0.2, 0.2}, b2[2] = {0.02, -0.02};
  double first[2];
  {
    const double* x = x1[0];
    double h[3];
    for (int j = 0; j < 3; ++j) {
      const double u = x[0] * W1[j] + x[1] * W1[3 + j] + b1[j];
      h[j] = u * 0.5 * std::erfc(-u / std::sqrt(2.0));
    }
    for (int j = 0; j < 2; ++j) first[j] = x[j] + h[0] * W2[j] + h[1] * W2[2 + j] + h[2] * W2[4 + j] + b2[j];
    const double g2[2] = {1.0, 0.7}, b2n[2] = {-0.1, 0.2};
    ln2(first, g2, b2n);
  }
  const double Wp[4] = {0.7, -0.2, 0.4, 0.9}, bp[2] = {0.1, -0.1};
  double pooled[2];
  lin(first, Wp, bp, pooled);
  pooled[0] = std::tanh(pooled[0]);
  pooled[1] = std::tanh(pooled[1]);
  const double Wc[4] = {1.5, -0.8, -0.6, 1.1}, bc[2] = {0.2, -0.3};
  double z[2];
  lin(pooled, Wc, bc, z);

  CHECK(std::abs(got.values()[0] - z[0]) < 1e-10);
  CHECK(std::abs(got.values()[1] - z[1]) < 1e-10);
}

TEST_CASE("parameter counts") {
  const auto base = count_encoder_params(EncoderConfig::bert_base());
  CHECK(std::abs(static_cast<double>(base.backbone_total) - 85.53e6) / 85.53e6 < 0.01);
  CHECK(base.backbone_total == 85'645'056);
  CHECK(count_encoder_params(EncoderConfig::bert_base(), false).backbone_total == 85'054'464);
  CHECK(base.prunable == 12u * (4 * 768 * 768 + 2 * 768 * 3072));

  EncoderConfig c = toy();
  const auto t = count_encoder_params(c);
  CHECK(t.backbone_total == 2 * (4 * (8 * 8 + 8) + 8 * 16 + 16 + 16 * 8 + 8 + 2 * 2 * 8) + (8 * 8 + 8));
  CHECK(t.backbone_total == 1272);
  CHECK(t.attention + t.ffn + t.layer_norm + t.pooler == t.backbone_total);

  c.num_layers = 4;
  const auto d = count_encoder_params(c);
  CHECK(d.backbone_total - d.pooler == 2 * (t.backbone_total - t.pooler));
  CHECK(d.per_layer == t.per_layer);
}
