// SPDX-License-Identifier: Apache-2.0
// Shared helpers for unit tests and the acceptance driver: random tensors,
// central finite differences, and brute-force oracles.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "kasp/distiller.hpp"
#include "kasp/encoder.hpp"
#include "kasp/ops.hpp"
#include "kasp/pipelines.hpp"
#include "kasp/random.hpp"
#include "kasp/tensor.hpp"

namespace kasp::testing {

inline Tensor random_tensor(Rng& rng, Shape shape, double lo = -2.0, double hi = 2.0, bool requires_grad = true) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

/// Weighted sum with fixed random weights: turns any op output into a scalar
/// whose gradient exercises every output element.
inline Tensor project(const Tensor& t, std::uint64_t seed) {
  Rng rng(seed);
  Tensor w = random_tensor(rng, t.shape(), -1.0, 1.0, false);
  return sum(mul(t, w));
}

struct GradCheck {
  double max_rel = 0.0;   // over entries whose abs error exceeds the floor
  double max_abs = 0.0;
  std::size_t checked = 0;
  std::size_t failures = 0;
};

inline constexpr double kFdStep = 1e-5;
inline constexpr double kFdRelTol = 1e-4;
inline constexpr double kFdAbsFloor = 1e-7;

inline bool fd_agrees(double analytic, double numeric) {
  const double err = std::abs(analytic - numeric);
  if (err <= kFdAbsFloor) return true;
  return err / std::max(std::abs(analytic), std::abs(numeric)) < kFdRelTol;
}

/// Compares backward() against central differences of `loss` for the leaf
/// tensors in `inputs`. At most `per_tensor` entries of each leaf are probed
/// (all of them when 0).
inline GradCheck grad_check(const std::vector<Tensor*>& inputs, const std::function<Tensor()>& loss, Rng& rng,
                            std::size_t per_tensor = 0) {
  for (auto* t : inputs) t->clear_grad();
  loss().backward();
  GradCheck out;
  for (auto* t : inputs) {
    const std::vector<double> analytic(t->grad().begin(), t->grad().end());
    std::vector<std::size_t> idx(t->numel());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (per_tensor && per_tensor < idx.size()) {
      rng.shuffle(idx.begin(), idx.end());
      idx.resize(per_tensor);
    }
    auto v = t->mutable_values();
    for (auto i : idx) {
      const double orig = v[i];
      double fp, fm;
      {
        NoGradGuard ng;
        v[i] = orig + kFdStep;
        fp = loss().item();
        v[i] = orig - kFdStep;
        fm = loss().item();
        v[i] = orig;
      }
      const double numeric = (fp - fm) / (2.0 * kFdStep);
      const double err = std::abs(analytic[i] - numeric);
      out.max_abs = std::max(out.max_abs, err);
      if (err > kFdAbsFloor)
        out.max_rel = std::max(out.max_rel, err / std::max(std::abs(analytic[i]), std::abs(numeric)));
      if (!fd_agrees(analytic[i], numeric)) ++out.failures;
      ++out.checked;
    }
  }
  return out;
}

struct GradCase {
  std::string name;
  /// Builds leaves from `rng` and returns them with the scalar loss closure.
  std::function<GradCheck(Rng&)> run;
};

namespace detail {

inline std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); }

template <class F>
GradCase unary(std::string name, F op, double lo = -2.0, double hi = 2.0) {
  return {std::move(name), [op, lo, hi](Rng& rng) {
            Tensor x = random_tensor(rng, {pick(rng, 1, 4), pick(rng, 1, 5)}, lo, hi);
            const auto seed = rng.next_u64();
            return grad_check({&x}, [&] { return project(op(x), seed); }, rng);
          }};
}

template <class F>
GradCase binary_same(std::string name, F op) {
  return {std::move(name), [op](Rng& rng) {
            const Shape s{pick(rng, 1, 4), pick(rng, 1, 5)};
            Tensor a = random_tensor(rng, s), b = random_tensor(rng, s);
            const auto seed = rng.next_u64();
            return grad_check({&a, &b}, [&] { return project(op(a, b), seed); }, rng);
          }};
}

inline EncoderConfig micro_config(Rng& rng) {
  EncoderConfig c;
  c.num_layers = pick(rng, 1, 2);
  c.num_heads = pick(rng, 1, 2);
  c.hidden_size = c.num_heads * pick(rng, 2, 3);
  c.intermediate_size = pick(rng, 3, 8);
  c.vocab_size = 12;
  c.max_seq_len = 5;
  c.num_labels = pick(rng, 2, 3);
  return c;
}

inline TokenBatch random_batch(Rng& rng, const EncoderConfig& c, std::size_t batch, std::size_t seq) {
  TokenBatch b{batch, seq, std::vector<int>(batch * seq), std::vector<int>(batch * seq)};
  for (auto& t : b.tokens) t = static_cast<int>(rng.below(c.vocab_size));
  for (auto& s : b.segments) s = static_cast<int>(rng.below(c.type_vocab_size));
  return b;
}

/// Loose init so that every block contributes measurable gradients.
inline EncoderParams random_params(const EncoderConfig& c, Rng& rng, double spread) {
  EncoderParams p = EncoderParams::zeros(c);
  for (auto& ref : p.parameters()) {
    auto v = ref.tensor->mutable_values();
    for (auto& x : v) x = rng.uniform(-spread, spread);
    if (ref.role == ParamRole::Norm && ref.name.ends_with("gamma"))
      for (auto& x : v) x = 1.0 + x;
  }
  return p;
}

}  // namespace detail

/// Every differentiable operation plus composite encoder and distillation
/// objectives.
inline std::vector<GradCase> gradient_cases() {
  using namespace detail;
  std::vector<GradCase> cases;
  cases.push_back({"matmul", [](Rng& rng) {
                     const std::size_t m = pick(rng, 1, 4), k = pick(rng, 1, 4), n = pick(rng, 1, 4);
                     Tensor a = random_tensor(rng, {m, k}), b = random_tensor(rng, {k, n});
                     const auto seed = rng.next_u64();
                     return grad_check({&a, &b}, [&] { return project(matmul(a, b), seed); }, rng);
                   }});
  cases.push_back({"matmul_nt", [](Rng& rng) {
                     const std::size_t m = pick(rng, 1, 4), k = pick(rng, 1, 4), n = pick(rng, 1, 4);
                     Tensor a = random_tensor(rng, {m, k}), b = random_tensor(rng, {n, k});
                     const auto seed = rng.next_u64();
                     return grad_check({&a, &b}, [&] { return project(matmul_nt(a, b), seed); }, rng);
                   }});
  for (bool tb : {false, true}) {
    cases.push_back({tb ? "bmm_transposed" : "bmm", [tb](Rng& rng) {
                       const std::size_t g = pick(rng, 1, 3), m = pick(rng, 1, 3), k = pick(rng, 1, 3),
                                         n = pick(rng, 1, 3);
                       Tensor a = random_tensor(rng, {2, g, m, k});
                       Tensor b = random_tensor(rng, tb ? Shape{2, g, n, k} : Shape{2, g, k, n});
                       const auto seed = rng.next_u64();
                       return grad_check({&a, &b}, [&] { return project(bmm(a, b, tb), seed); }, rng);
                     }});
  }
  cases.push_back(binary_same("add", [](const Tensor& a, const Tensor& b) { return add(a, b); }));
  cases.push_back(binary_same("sub", [](const Tensor& a, const Tensor& b) { return sub(a, b); }));
  cases.push_back(binary_same("mul", [](const Tensor& a, const Tensor& b) { return mul(a, b); }));
  cases.push_back(unary("scale", [](const Tensor& x) { return scale(x, -1.7); }));
  cases.push_back({"add_bias", [](Rng& rng) {
                     const std::size_t r = pick(rng, 1, 4), h = pick(rng, 1, 5);
                     Tensor x = random_tensor(rng, {r, h}), b = random_tensor(rng, {h});
                     const auto seed = rng.next_u64();
                     return grad_check({&x, &b}, [&] { return project(add_bias(x, b), seed); }, rng);
                   }});
  cases.push_back({"reshape", [](Rng& rng) {
                     const std::size_t a = pick(rng, 1, 3), b = pick(rng, 1, 3), c = pick(rng, 1, 3);
                     Tensor x = random_tensor(rng, {a, b * c});
                     const auto seed = rng.next_u64();
                     return grad_check({&x}, [&] { return project(mul(reshape(x, {a, b, c}), reshape(x, {a, b, c})), seed); }, rng);
                   }});
  cases.push_back({"permute", [](Rng& rng) {
                     Tensor x = random_tensor(rng, {pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 1, 3)});
                     std::vector<std::size_t> axes{0, 1, 2, 3};
                     rng.shuffle(axes.begin(), axes.end());
                     const auto seed = rng.next_u64();
                     return grad_check({&x}, [&] { return project(permute(x, axes), seed); }, rng);
                   }});
  cases.push_back(unary("transpose", [](const Tensor& x) { return transpose(x); }));
  cases.push_back(unary("softmax_rows", [](const Tensor& x) { return softmax_rows(x); }));
  cases.push_back(unary("log_softmax_rows", [](const Tensor& x) { return log_softmax_rows(x); }));
  cases.push_back({"layer_norm", [](Rng& rng) {
                     const std::size_t r = pick(rng, 1, 4), h = pick(rng, 2, 6);
                     Tensor x = random_tensor(rng, {r, h}), g = random_tensor(rng, {h}), b = random_tensor(rng, {h});
                     const auto seed = rng.next_u64();
                     return grad_check({&x, &g, &b}, [&] { return project(layer_norm(x, g, b, 1e-12), seed); }, rng);
                   }});
  cases.push_back(unary("gelu", [](const Tensor& x) { return gelu(x); }));
  cases.push_back(unary("tanh", [](const Tensor& x) { return kasp::tanh(x); }));
  cases.push_back(binary_same("mse", [](const Tensor& a, const Tensor& b) { return scale(mse(a, b), 3.0); }));
  cases.push_back(unary("sum", [](const Tensor& x) { return mul(sum(x), sum(x)); }));
  cases.push_back(unary("mean", [](const Tensor& x) { return mul(mean(x), mean(x)); }));
  cases.push_back({"embedding", [](Rng& rng) {
                     const std::size_t v = pick(rng, 2, 6), h = pick(rng, 1, 4);
                     Tensor table = random_tensor(rng, {v, h});
                     std::vector<int> ids(pick(rng, 1, 8));
                     for (auto& i : ids) i = static_cast<int>(rng.below(v));
                     const auto seed = rng.next_u64();
                     return grad_check({&table}, [&] { return project(embedding(table, ids), seed); }, rng);
                   }});
  cases.push_back({"dropout", [](Rng& rng) {
                     Tensor x = random_tensor(rng, {pick(rng, 1, 4), pick(rng, 1, 6)});
                     const auto seed = rng.next_u64(), dseed = rng.next_u64();
                     return grad_check({&x}, [&] {
                       Rng d(dseed);
                       return project(dropout(x, 0.3, d), seed);
                     }, rng);
                   }});
  cases.push_back({"apply_binary_mask", [](Rng& rng) {
                     Tensor w = random_tensor(rng, {pick(rng, 1, 4), pick(rng, 1, 4)});
                     std::vector<std::uint8_t> m(w.numel());
                     for (auto& b : m) b = rng.bernoulli(0.5);
                     const auto seed = rng.next_u64();
                     return grad_check({&w}, [&] { return project(apply_binary_mask(w, m), seed); }, rng);
                   }});
  cases.push_back({"select_rows", [](Rng& rng) {
                     const std::size_t r = pick(rng, 1, 5);
                     Tensor x = random_tensor(rng, {r, pick(rng, 1, 4)});
                     std::vector<std::size_t> rows(pick(rng, 1, 6));
                     for (auto& i : rows) i = rng.below(r);
                     const auto seed = rng.next_u64();
                     return grad_check({&x}, [&] { return project(select_rows(x, rows), seed); }, rng);
                   }});
  cases.push_back({"nll_loss", [](Rng& rng) {
                     const std::size_t n = pick(rng, 1, 5), c = pick(rng, 2, 5);
                     Tensor z = random_tensor(rng, {n, c});
                     std::vector<int> t(n);
                     for (auto& y : t) y = static_cast<int>(rng.below(c));
                     return grad_check({&z}, [&] { return nll_loss(log_softmax_rows(z), t); }, rng);
                   }});
  cases.push_back({"cross_entropy", [](Rng& rng) {
                     const std::size_t n = pick(rng, 1, 5), c = pick(rng, 2, 5);
                     Tensor z = random_tensor(rng, {n, c});
                     std::vector<int> t(n);
                     for (auto& y : t) y = static_cast<int>(rng.below(c));
                     t[0] = -1;  // ignored position
                     if (n == 1) t[0] = 0;
                     return grad_check({&z}, [&] { return cross_entropy(z, t); }, rng);
                   }});
  cases.push_back({"loss_prd", [](Rng& rng) {
                     const std::size_t n = pick(rng, 1, 4), c = pick(rng, 2, 4);
                     Tensor zs = random_tensor(rng, {n, c}), zt = random_tensor(rng, {n, c});
                     const double temp = rng.uniform(0.5, 3.0);
                     const bool sym = rng.bernoulli(0.5);
                     return grad_check({&zs}, [&] { return loss_prd(zs, zt, temp, sym); }, rng);
                   }});
  cases.push_back({"encoder_classification", [](Rng& rng) {
                     const EncoderConfig c = micro_config(rng);
                     EncoderParams p = random_params(c, rng, 0.5);
                     const TokenBatch batch = random_batch(rng, c, pick(rng, 1, 3), pick(rng, 2, 4));
                     std::vector<int> labels(batch.batch);
                     for (auto& y : labels) y = static_cast<int>(rng.below(c.num_labels));
                     const auto dseed = rng.next_u64();
                     std::vector<Tensor*> leaves;
                     for (auto& ref : p.parameters())
                       if (!ref.name.starts_with("mlm")) leaves.push_back(ref.tensor);
                     return grad_check(leaves, [&] {
                       return cross_entropy(forward(p, batch, nullptr, {true, dseed}).logits, labels);
                     }, rng, 3);
                   }});
  cases.push_back({"distill_total", [](Rng& rng) {
                     const EncoderConfig c = micro_config(rng);
                     EncoderParams student = random_params(c, rng, 0.5);
                     const EncoderParams teacher = random_params(c, rng, 0.5);
                     const TokenBatch batch = random_batch(rng, c, pick(rng, 1, 3), pick(rng, 2, 4));
                     PruneMask mask;
                     for (std::size_t id = 0; id < student.num_prunable(); ++id) {
                       std::vector<std::uint8_t> m(student.prunable(id).numel());
                       for (auto& b : m) b = rng.bernoulli(0.7);
                       mask.matrices.push_back(std::move(m));
                       mask.shapes.push_back(student.prunable(id).shape());
                     }
                     DistillConfig dc;
                     dc.temperature = rng.uniform(0.5, 2.0);
                     ForwardTrace target;
                     {
                       NoGradGuard ng;
                       target = forward(teacher, batch, nullptr);
                     }
                     std::vector<Tensor*> leaves;
                     for (auto& ref : student.parameters())
                       if (!ref.name.starts_with("mlm")) leaves.push_back(ref.tensor);
                     return grad_check(leaves, [&] {
                       return distill_loss(forward(student, batch, &mask), target, dc).total;
                     }, rng, 3);
                   }});
  cases.push_back({"mlm_head", [](Rng& rng) {
                     const EncoderConfig c = micro_config(rng);
                     EncoderParams p = random_params(c, rng, 0.5);
                     const TokenBatch batch = random_batch(rng, c, 2, pick(rng, 2, 4));
                     std::vector<std::size_t> pos{0, batch.tokens.size() - 1};
                     std::vector<int> targets{static_cast<int>(rng.below(c.vocab_size)),
                                              static_cast<int>(rng.below(c.vocab_size))};
                     std::vector<Tensor*> leaves{&p.token_emb, &p.mlm_bias, &p.layers[0].wq, &p.layers.back().w2};
                     return grad_check(leaves, [&] {
                       const auto tr = forward(p, batch, nullptr);
                       return cross_entropy(mlm_logits(p, tr.sequence_output, pos), targets);
                     }, rng, 4);
                   }});
  return cases;
}

inline std::size_t zero_count(const Tensor& t) {
  return static_cast<std::size_t>(std::count(t.values().begin(), t.values().end(), 0.0));
}

/// Step hook asserting, every `every` steps, that pruned positions hold exact
/// zeros and that no non-prunable tensor gains exact zeros relative to the
/// baseline (taken at the first checked call unless snapshot_zeros ran).
struct HygieneHook {
  long every = 1;
  std::map<std::string, std::size_t> baseline;
  std::size_t calls = 0, checked = 0, violations = 0;
  void operator()(const StepEvent& e) {
    ++calls;
    if (e.step % every != 0) return;
    ++checked;
    if (baseline.empty())
      for (const auto& [name, t] : e.params.named_tensors()) baseline[name] = zero_count(*t);
    if (e.mask) {
      if (e.mask->size() != e.params.num_prunable()) ++violations;
      for (std::size_t id = 0; id < e.mask->size(); ++id) {
        const auto w = e.params.prunable(id).values();
        const auto& m = e.mask->matrices[id];
        if (m.size() != w.size()) ++violations;
        for (std::size_t i = 0; i < w.size() && i < m.size(); ++i)
          if (!m[i] && w[i] != 0.0) ++violations;
      }
    }
    for (const auto& [name, t] : e.params.named_tensors()) {
      if (name.starts_with("layer.") && name.ends_with(".weight")) continue;
      if (zero_count(*t) > baseline[name]) ++violations;
    }
  }
};

inline void snapshot_zeros(HygieneHook& h, const EncoderParams& p) {
  for (const auto& [name, t] : p.named_tensors()) h.baseline[name] = zero_count(*t);
}

/// Brute-force mask: full stable sort by (|w|, index), zero the first k.
inline std::vector<std::uint8_t> oracle_mask(const std::vector<double>& w, double sparsity) {
  const std::size_t n = w.size();
  std::size_t k = static_cast<std::size_t>(std::floor(sparsity * static_cast<double>(n) + 1e-9));
  if (sparsity < 1.0 && k >= n) k = n - 1;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return std::abs(w[a]) < std::abs(w[b]); });
  std::vector<std::uint8_t> m(n, 1);
  for (std::size_t i = 0; i < k; ++i) m[order[i]] = 0;
  return m;
}

}  // namespace kasp::testing
