#pragma once

#include "refground/dataset.hpp"
#include "refground/kam.hpp"
#include "refground/pipeline.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace refground {

nlohmann::json box_json(const BoundingBox& box);
BoundingBox box_from_json_array(const nlohmann::json& j);

/// Selected boxes plus the full per-candidate score ledger.
nlohmann::json prediction_to_json(const Prediction& prediction);
PredictionRecord prediction_record_from_json(const nlohmann::json& j);
PredictionRecord to_record(const Prediction& prediction);

std::vector<PredictionRecord> read_prediction_records(const std::filesystem::path& path);

nlohmann::json report_to_json(const AccuracyReport& report);

nlohmann::json pseudo_label_to_json(const PseudoLabel& label);
std::vector<PseudoLabel> read_pseudo_labels(const std::filesystem::path& path);

/// 16 hex digits of FNV-1a over the compact serialization of `config`.
std::string config_hash(const nlohmann::json& config);

/// Writes one JSON value per line, every line tagged with config_hash.
void write_jsonl(const std::filesystem::path& path, const std::vector<nlohmann::json>& lines,
                 const std::string& hash);

}  // namespace refground
