// SPDX-License-Identifier: Apache-2.0
/**
 * @file   data.hpp
 * @brief  Synthetic corpora: a topic-structured token world shared by a
 *         masked-token pretraining corpus and a downstream classification
 *         task, plus random-token augmentation.
 *
 * A "world" (fixed by `world_seed`) assigns every topic a small set of
 * preferred content tokens and a label. A sequence drawn from a topic emits
 * each position from the topic's set with probability `signal_prob` and
 * uniformly from the content vocabulary otherwise. Pretraining sequences
 * and downstream sequences come from the same world, so token co-occurrence
 * learned during pretraining transfers to the downstream labels.
 */
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "kasp/encoder.hpp"
#include "kasp/random.hpp"

namespace kasp {

namespace tokens {
inline constexpr int kPad = 0;
inline constexpr int kCls = 1;
inline constexpr int kSep = 2;
inline constexpr int kMask = 3;
inline constexpr int kFirstContent = 4;
inline bool is_special(int id) { return id < kFirstContent; }
}  // namespace tokens

enum class TaskKind : std::uint8_t { MlmPretrain, Classification };

struct SyntheticTaskConfig {
  TaskKind kind = TaskKind::Classification;
  std::uint64_t seed = 1;        // sampling of examples
  std::uint64_t world_seed = 7;  // topic structure, shared across tasks
  std::size_t vocab_size = 64;
  std::size_t seq_len = 16;
  std::size_t num_labels = 2;
  std::size_t size = 256;      // training examples
  std::size_t dev_size = 512;
  std::size_t num_topics = 8;
  std::size_t topic_tokens = 6;
  double signal_prob = 0.3;

  void validate() const;
  bool operator==(const SyntheticTaskConfig&) const = default;
};

struct Example {
  std::vector<int> tokens;  // tokens[0] == kCls
  int label = 0;            // topic id for MLM corpora
};

struct Dataset {
  std::size_t seq_len = 0;
  std::vector<Example> examples;
  std::size_t size() const { return examples.size(); }
};

struct TaskData {
  SyntheticTaskConfig config;
  Dataset train;
  Dataset dev;
};

/// Deterministic given the config. Train and dev sequences are disjoint and
/// classification labels are balanced in both splits.
TaskData generate_task(const SyntheticTaskConfig& config);

struct AugmentPolicy {
  double replace_prob = 0.0;
  std::size_t copies = 0;
  std::uint64_t seed = 0;
  bool operator==(const AugmentPolicy&) const = default;
};

/// Originals followed by `copies` perturbed passes over the dataset; every
/// non-special token is replaced by a uniform content token with
/// probability `replace_prob`. Labels are carried over.
Dataset augment(const Dataset& data, const AugmentPolicy& policy, std::size_t vocab_size);

TokenBatch make_batch(const Dataset& data, std::span<const std::size_t> indices);
std::vector<int> batch_labels(const Dataset& data, std::span<const std::size_t> indices);

/// Masked-token corruption of a batch: 15% of content positions (at least
/// one) are selected; of those 80% become kMask, 10% a random token, 10%
/// stay. `positions` are flat indices into the batch, `targets` the
/// original ids.
struct MaskedBatch {
  TokenBatch input;
  std::vector<std::size_t> positions;
  std::vector<int> targets;
};
MaskedBatch mask_tokens(const TokenBatch& batch, std::size_t vocab_size, Rng& rng, double mask_prob = 0.15);

/// Fixed epoch-shuffled minibatch order.
class BatchSampler {
 public:
  BatchSampler(std::size_t dataset_size, std::size_t batch_size, std::uint64_t seed);
  std::vector<std::size_t> next();

 private:
  std::size_t size_, batch_, cursor_ = 0;
  std::vector<std::size_t> order_;
  Rng rng_;
};

}  // namespace kasp
