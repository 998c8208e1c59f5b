// SPDX-License-Identifier: Apache-2.0
#include "kasp/data.hpp"

#include <algorithm>
#include <numeric>
#include <set>

#include "kasp/error.hpp"

namespace kasp {

void SyntheticTaskConfig::validate() const {
  if (vocab_size <= static_cast<std::size_t>(tokens::kFirstContent) + 1)
    throw ConfigError("vocab_size", "must leave at least two content tokens");
  if (seq_len < 2) throw ConfigError("seq_len", "must be at least 2");
  if (num_labels < 2) throw ConfigError("num_labels", "must be at least 2");
  if (size == 0) throw ConfigError("size", "must be positive");
  if (dev_size == 0) throw ConfigError("dev_size", "must be positive");
  if (num_topics < num_labels) throw ConfigError("num_topics", "must be at least num_labels");
  const std::size_t content = vocab_size - tokens::kFirstContent;
  if (topic_tokens == 0 || topic_tokens > content) throw ConfigError("topic_tokens", "must be in [1, content vocabulary]");
  if (!(signal_prob >= 0.0 && signal_prob <= 1.0)) throw ConfigError("signal_prob", "must be in [0, 1]");
}

namespace {

struct World {
  std::vector<std::vector<int>> topic_tokens;
  std::vector<int> topic_label;
  std::vector<std::vector<int>> label_topics;
};

World make_world(const SyntheticTaskConfig& c) {
  Rng rng(c.world_seed);
  const int content = static_cast<int>(c.vocab_size) - tokens::kFirstContent;
  World w;
  std::vector<int> pool(static_cast<std::size_t>(content));
  std::iota(pool.begin(), pool.end(), tokens::kFirstContent);
  for (std::size_t t = 0; t < c.num_topics; ++t) {
    rng.shuffle(pool.begin(), pool.end());
    w.topic_tokens.emplace_back(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(c.topic_tokens));
  }
  std::vector<int> topics(c.num_topics);
  std::iota(topics.begin(), topics.end(), 0);
  rng.shuffle(topics.begin(), topics.end());
  w.topic_label.assign(c.num_topics, 0);
  w.label_topics.resize(c.num_labels);
  for (std::size_t i = 0; i < topics.size(); ++i) {
    const int label = static_cast<int>(i % c.num_labels);
    w.topic_label[static_cast<std::size_t>(topics[i])] = label;
    w.label_topics[static_cast<std::size_t>(label)].push_back(topics[i]);
  }
  return w;
}

std::vector<int> sample_sequence(const SyntheticTaskConfig& c, const World& w, int topic, Rng& rng) {
  const auto& preferred = w.topic_tokens[static_cast<std::size_t>(topic)];
  const auto content = c.vocab_size - tokens::kFirstContent;
  std::vector<int> seq(c.seq_len);
  seq[0] = tokens::kCls;
  for (std::size_t i = 1; i < c.seq_len; ++i) {
    if (rng.bernoulli(c.signal_prob))
      seq[i] = preferred[rng.below(preferred.size())];
    else
      seq[i] = tokens::kFirstContent + static_cast<int>(rng.below(content));
  }
  return seq;
}

Dataset sample_split(const SyntheticTaskConfig& c, const World& w, std::size_t n, Rng& rng,
                     std::set<std::vector<int>>& seen) {
  Dataset d;
  d.seq_len = c.seq_len;
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % c.num_labels);
  rng.shuffle(labels.begin(), labels.end());
  for (std::size_t i = 0; i < n; ++i) {
    int topic;
    if (c.kind == TaskKind::Classification) {
      const auto& candidates = w.label_topics[static_cast<std::size_t>(labels[i])];
      topic = candidates[rng.below(candidates.size())];
    } else {
      topic = static_cast<int>(rng.below(c.num_topics));
    }
    std::vector<int> seq;
    // redraw duplicates so the splits stay disjoint
    for (int attempt = 0;; ++attempt) {
      seq = sample_sequence(c, w, topic, rng);
      if (seen.insert(seq).second) break;
      if (attempt > 1000) throw ConfigError("size", "cannot draw enough distinct sequences");
    }
    const int label = c.kind == TaskKind::Classification ? labels[i] : topic;
    d.examples.push_back({std::move(seq), label});
  }
  return d;
}

}  // namespace

TaskData generate_task(const SyntheticTaskConfig& config) {
  config.validate();
  const World world = make_world(config);
  Rng rng(mix_seed(config.seed, 0x7a5c));
  std::set<std::vector<int>> seen;
  TaskData out;
  out.config = config;
  out.train = sample_split(config, world, config.size, rng, seen);
  out.dev = sample_split(config, world, config.dev_size, rng, seen);
  return out;
}

Dataset augment(const Dataset& data, const AugmentPolicy& policy, std::size_t vocab_size) {
  if (!(policy.replace_prob >= 0.0 && policy.replace_prob <= 1.0))
    throw ConfigError("augment.replace_prob", "must be in [0, 1]");
  Dataset out = data;
  out.examples.reserve(data.size() * (1 + policy.copies));
  const auto content = vocab_size - tokens::kFirstContent;
  Rng rng(mix_seed(policy.seed, 0xa06));
  for (std::size_t copy = 0; copy < policy.copies; ++copy) {
    for (const auto& ex : data.examples) {
      Example e = ex;
      for (auto& t : e.tokens)
        if (!tokens::is_special(t) && rng.bernoulli(policy.replace_prob))
          t = tokens::kFirstContent + static_cast<int>(rng.below(content));
      out.examples.push_back(std::move(e));
    }
  }
  return out;
}

TokenBatch make_batch(const Dataset& data, std::span<const std::size_t> indices) {
  TokenBatch b;
  b.batch = indices.size();
  b.seq = data.seq_len;
  b.tokens.reserve(b.batch * b.seq);
  for (auto i : indices) {
    const auto& t = data.examples.at(i).tokens;
    b.tokens.insert(b.tokens.end(), t.begin(), t.end());
  }
  return b;
}

std::vector<int> batch_labels(const Dataset& data, std::span<const std::size_t> indices) {
  std::vector<int> y;
  y.reserve(indices.size());
  for (auto i : indices) y.push_back(data.examples.at(i).label);
  return y;
}

MaskedBatch mask_tokens(const TokenBatch& batch, std::size_t vocab_size, Rng& rng, double mask_prob) {
  MaskedBatch out;
  out.input = batch;
  const auto content = vocab_size - tokens::kFirstContent;
  std::size_t first_content = batch.tokens.size();
  for (std::size_t i = 0; i < batch.tokens.size(); ++i) {
    const int t = batch.tokens[i];
    if (tokens::is_special(t)) continue;
    if (first_content == batch.tokens.size()) first_content = i;
    if (!rng.bernoulli(mask_prob)) continue;
    out.positions.push_back(i);
    out.targets.push_back(t);
  }
  if (out.positions.empty() && first_content < batch.tokens.size()) {
    out.positions.push_back(first_content);
    out.targets.push_back(batch.tokens[first_content]);
  }
  for (auto pos : out.positions) {
    const double u = rng.uniform();
    if (u < 0.8)
      out.input.tokens[pos] = tokens::kMask;
    else if (u < 0.9)
      out.input.tokens[pos] = tokens::kFirstContent + static_cast<int>(rng.below(content));
  }
  return out;
}

BatchSampler::BatchSampler(std::size_t dataset_size, std::size_t batch_size, std::uint64_t seed)
    : size_(dataset_size), batch_(batch_size), order_(dataset_size), rng_(mix_seed(seed, 0xba7c)) {
  if (size_ == 0 || batch_ == 0) throw ContractError("BatchSampler needs a non-empty dataset and batch");
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  rng_.shuffle(order_.begin(), order_.end());
}

std::vector<std::size_t> BatchSampler::next() {
  std::vector<std::size_t> out;
  out.reserve(batch_);
  while (out.size() < batch_) {
    if (cursor_ == size_) {
      rng_.shuffle(order_.begin(), order_.end());
      cursor_ = 0;
    }
    out.push_back(order_[cursor_++]);
  }
  return out;
}

}  // namespace kasp
