#include "refground/records.hpp"

#include <cstdio>
#include <fstream>

namespace refground {

using nlohmann::json;

json box_json(const BoundingBox& box) { return json::array({box.x1(), box.y1(), box.x2(), box.y2()}); }

BoundingBox box_from_json_array(const json& j) {
  if (!j.is_array() || j.size() != 4) throw DomainError("box must be [x1,y1,x2,y2]");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

json prediction_to_json(const Prediction& p) {
  json boxes = json::array();
  for (const auto& b : p.boxes) boxes.push_back(box_json(b));
  json candidates = json::array();
  for (const auto& c : p.candidates.candidates) {
    json entry{{"box", box_json(c.box())}, {"class_name", c.class_name()}, {"origin", to_string(c.origin())},
               {"s_pq", c.s_pq()},         {"s_cq", c.s_cq()},             {"s_bu", c.s_bu()},
               {"s_td", c.s_td()}};
    entry["s_kam"] = c.s_kam() ? json(*c.s_kam()) : json(nullptr);
    entry["fused"] = c.fused();
    candidates.push_back(std::move(entry));
  }
  json out{{"image_id", p.image_id}, {"query", p.query}, {"boxes", boxes}};
  out["top_down_box"] = p.top_down_box ? box_json(*p.top_down_box) : json(nullptr);
  out["s_iq"] = p.s_iq;
  out["map_degenerate"] = p.map_degenerate;
  out["selected"] = p.selection.members;
  out["candidates"] = std::move(candidates);
  out["warnings"] = p.warnings;
  return out;
}

PredictionRecord prediction_record_from_json(const json& j) {
  PredictionRecord r{j.at("image_id").get<std::string>(), j.at("query").get<std::string>(), {}};
  for (const auto& b : j.at("boxes")) r.boxes.push_back(box_from_json_array(b));
  return r;
}

PredictionRecord to_record(const Prediction& p) { return {p.image_id, p.query, p.boxes}; }

std::vector<PredictionRecord> read_prediction_records(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DomainError("cannot open " + path.string());
  std::vector<PredictionRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(prediction_record_from_json(json::parse(line)));
    } catch (const std::exception& e) {
      throw DomainError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

json report_to_json(const AccuracyReport& report) {
  json rows = json::array();
  for (const auto& r : report.per_instance) {
    json row{{"image_id", r.image_id}, {"query", r.query}, {"iou", r.iou}, {"correct", r.correct}};
    if (r.missing) row["missing"] = true;
    rows.push_back(std::move(row));
  }
  return {{"accuracy", report.accuracy}, {"n", report.n}, {"missing", report.missing}, {"per_instance", rows}};
}

json pseudo_label_to_json(const PseudoLabel& label) {
  return {{"image_id", label.image_id}, {"query", label.query}, {"box", box_json(label.box)}, {"score", label.score}};
}

std::vector<PseudoLabel> read_pseudo_labels(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DomainError("cannot open " + path.string());
  std::vector<PseudoLabel> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      out.push_back({j.at("image_id").get<std::string>(), j.at("query").get<std::string>(),
                     box_from_json_array(j.at("box")), j.at("score").get<double>()});
    } catch (const std::exception& e) {
      throw DomainError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

std::string config_hash(const json& config) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(config.dump())));
  return buf;
}

void write_jsonl(const std::filesystem::path& path, const std::vector<json>& lines, const std::string& hash) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DomainError("cannot write " + path.string());
  for (json line : lines) {
    line["config_hash"] = hash;
    out << line.dump() << '\n';
  }
}

}  // namespace refground
