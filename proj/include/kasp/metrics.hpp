// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace kasp {

struct MetricsRecord {
  long step = 0;
  std::string phase;  // pretrain | finetune | distill | eval
  double target_sparsity = 0.0;
  double actual_sparsity = 0.0;
  double loss_total = 0.0;
  double loss_emb = 0.0;
  double loss_att = 0.0;
  double loss_hid = 0.0;
  double loss_prd = 0.0;
  double task_loss = 0.0;
  std::optional<double> dev_accuracy;
  std::optional<double> wallclock_ms;

  bool operator==(const MetricsRecord&) const = default;
};

/// One JSON object per line, fixed key order.
std::string to_json_line(const MetricsRecord& record);
MetricsRecord parse_json_line(const std::string& line);

void write_metrics(std::ostream& out, const std::vector<MetricsRecord>& records);
std::string metrics_text(const std::vector<MetricsRecord>& records);
std::vector<MetricsRecord> read_metrics(std::istream& in);

}  // namespace kasp
