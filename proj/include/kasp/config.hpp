// SPDX-License-Identifier: Apache-2.0
/**
 * @file   config.hpp
 * @brief  JSON run configuration. Parsing is strict: unknown keys and
 *         ill-typed values raise ConfigError with the dotted field path.
 */
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "kasp/data.hpp"
#include "kasp/encoder.hpp"
#include "kasp/pipelines.hpp"
#include "kasp/sparse.hpp"

namespace kasp {

struct BenchConfig {
  EncoderConfig model = wide_model();
  std::size_t batch = 32;
  std::size_t seq_len = 16;
  std::vector<double> ratios = {1, 2, 4, 8, 16, 20};
  std::size_t warmup = 2;
  std::size_t repetitions = 41;
  std::uint64_t seed = 0;

  /// One layer at hidden 512, intermediate 2048.
  static EncoderConfig wide_model();
};

struct ReportConfig {
  std::size_t seq_len = 128;
  FlopConvention convention = FlopConvention::TwoPerMac;
};

/// Defaults are the reference experiment: eight topics mapped onto eight
/// labels, 600 pretraining steps, a 900-step teacher, and 300-step pruning
/// runs that reach 95% sparsity halfway through.
struct RunConfig {
  EncoderConfig model = default_model();
  SyntheticTaskConfig task = default_task();  // classification
  SyntheticTaskConfig mlm = default_mlm();
  TrainConfig pretrain = default_pretrain();
  TrainConfig teacher = default_teacher();  // the finetune command
  TrainConfig train = default_train();      // the pruning commands
  BenchConfig bench;
  ReportConfig report;

  static EncoderConfig default_model();
  static SyntheticTaskConfig default_task();
  static SyntheticTaskConfig default_mlm();
  static TrainConfig default_pretrain();
  static TrainConfig default_teacher();
  static TrainConfig default_train();
  /// Applies a --seed override to every training and sampling seed.
  void override_seed(std::uint64_t seed);
};

using Json = nlohmann::ordered_json;

RunConfig parse_run_config(const Json& j);
RunConfig load_run_config(const std::string& path);

EncoderConfig parse_encoder_config(const Json& j, const std::string& path = "model");

Json to_json(const EncoderConfig& c);
Json to_json(const SyntheticTaskConfig& c);
Json to_json(const TrainConfig& c);
Json to_json(const RunConfig& c);

}  // namespace kasp
