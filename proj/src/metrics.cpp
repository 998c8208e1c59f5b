// SPDX-License-Identifier: Apache-2.0
#include "kasp/metrics.hpp"

#include <istream>
#include <ostream>
#include <sstream>

#include <json.hpp>

namespace kasp {

std::string to_json_line(const MetricsRecord& r) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["phase"] = r.phase;
  j["target_sparsity"] = r.target_sparsity;
  j["actual_sparsity"] = r.actual_sparsity;
  j["loss_total"] = r.loss_total;
  j["loss_emb"] = r.loss_emb;
  j["loss_att"] = r.loss_att;
  j["loss_hid"] = r.loss_hid;
  j["loss_prd"] = r.loss_prd;
  j["task_loss"] = r.task_loss;
  j["dev_accuracy"] = r.dev_accuracy ? nlohmann::ordered_json(*r.dev_accuracy) : nlohmann::ordered_json(nullptr);
  j["wallclock_ms"] = r.wallclock_ms ? nlohmann::ordered_json(*r.wallclock_ms) : nlohmann::ordered_json(nullptr);
  return j.dump();
}

MetricsRecord parse_json_line(const std::string& line) {
  const auto j = nlohmann::json::parse(line);
  MetricsRecord r;
  r.step = j.at("step").get<long>();
  r.phase = j.at("phase").get<std::string>();
  r.target_sparsity = j.at("target_sparsity").get<double>();
  r.actual_sparsity = j.at("actual_sparsity").get<double>();
  r.loss_total = j.at("loss_total").get<double>();
  r.loss_emb = j.at("loss_emb").get<double>();
  r.loss_att = j.at("loss_att").get<double>();
  r.loss_hid = j.at("loss_hid").get<double>();
  r.loss_prd = j.at("loss_prd").get<double>();
  r.task_loss = j.at("task_loss").get<double>();
  if (!j.at("dev_accuracy").is_null()) r.dev_accuracy = j.at("dev_accuracy").get<double>();
  if (!j.at("wallclock_ms").is_null()) r.wallclock_ms = j.at("wallclock_ms").get<double>();
  return r;
}

void write_metrics(std::ostream& out, const std::vector<MetricsRecord>& records) {
  for (const auto& r : records) out << to_json_line(r) << '\n';
}

std::string metrics_text(const std::vector<MetricsRecord>& records) {
  std::ostringstream os;
  write_metrics(os, records);
  return os.str();
}

std::vector<MetricsRecord> read_metrics(std::istream& in) {
  std::vector<MetricsRecord> out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(parse_json_line(line));
  return out;
}

}  // namespace kasp
