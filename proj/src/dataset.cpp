#include "refground/dataset.hpp"

#include <boost/property_tree/ptree.hpp>
#include <boost/property_tree/xml_parser.hpp>
#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <regex>
#include <sstream>

namespace refground {

using nlohmann::json;

DatasetFormat parse_dataset_format(const std::string& text) {
  if (text == "internal") return DatasetFormat::internal;
  if (text == "flickr_entities") return DatasetFormat::flickr_entities;
  if (text == "referit") return DatasetFormat::referit;
  throw ConfigError("unknown dataset format '" + text + "'");
}

EvalMode parse_eval_mode(const std::string& text) {
  if (text == "single") return EvalMode::single;
  if (text == "merge") return EvalMode::merge;
  throw ConfigError("unknown evaluation mode '" + text + "'");
}

std::string to_string(EvalMode mode) { return mode == EvalMode::merge ? "merge" : "single"; }

namespace {

std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DomainError("cannot open " + path.string());
  return in;
}

std::ofstream open_output(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DomainError("cannot write " + path.string());
  return out;
}

BoundingBox box_from_json(const json& j) {
  if (!j.is_array() || j.size() != 4) throw DomainError("box must be [x1,y1,x2,y2]");
  return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>(), j.at(3).get<double>()};
}

json box_to_json(const BoundingBox& b) { return json::array({b.x1(), b.y1(), b.x2(), b.y2()}); }

GroundingInstance instance_from_json(const json& j) {
  GroundingInstance inst;
  inst.image_id = j.at("image_id").get<std::string>();
  inst.image_path = j.value("image_path", std::string{});
  inst.query = j.at("query").get<std::string>();
  if (inst.image_id.empty()) throw DomainError("empty image_id");
  if (inst.query.empty()) throw DomainError("empty query");
  for (const auto& b : j.at("gt_boxes")) inst.gt_boxes.push_back(box_from_json(b));
  if (inst.gt_boxes.empty()) throw DomainError("phrase has no ground-truth box");
  return inst;
}

void load_internal(const std::filesystem::path& path, LoadReport& report) {
  std::ifstream in = open_input(path);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ++report.records;
    try {
      report.instances.push_back(instance_from_json(json::parse(line)));
    } catch (const std::exception& e) {
      report.errors.push_back(path.filename().string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
}

void load_referit(const std::filesystem::path& path, LoadReport& report) {
  std::ifstream in = open_input(path);
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw DomainError(path.string() + ": " + e.what());
  }
  if (!doc.is_array()) throw DomainError(path.string() + ": expected a JSON array of triplets");
  const std::filesystem::path dir = path.parent_path();
  for (std::size_t i = 0; i < doc.size(); ++i) {
    ++report.records;
    try {
      const json& t = doc[i];
      if (!t.is_array() || t.size() < 3) throw DomainError("expected [image_file, [x,y,w,h], query]");
      const std::string file = t[0].get<std::string>();
      const json& xywh = t[1];
      if (!xywh.is_array() || xywh.size() != 4) throw DomainError("box must be [x,y,w,h]");
      const double x = xywh[0].get<double>(), y = xywh[1].get<double>();
      GroundingInstance inst;
      inst.image_id = std::filesystem::path(file).stem().string();
      inst.image_path = (dir / file).string();
      inst.query = t[2].get<std::string>();
      if (inst.query.empty()) throw DomainError("empty query");
      inst.gt_boxes.emplace_back(x, y, x + xywh[2].get<double>(), y + xywh[3].get<double>());
      report.instances.push_back(std::move(inst));
    } catch (const std::exception& e) {
      report.errors.push_back("triplet " + std::to_string(i) + ": " + e.what());
    }
  }
}

// Entity id -> boxes from one Flickr30K Entities annotation file.
std::map<std::string, std::vector<BoundingBox>> flickr_boxes(const std::filesystem::path& xml) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  pt::read_xml(xml.string(), tree);
  std::map<std::string, std::vector<BoundingBox>> boxes;
  for (const auto& [tag, obj] : tree.get_child("annotation")) {
    if (tag != "object") continue;
    const auto bnd = obj.get_child_optional("bndbox");
    if (!bnd) continue;
    const BoundingBox box(bnd->get<double>("xmin"), bnd->get<double>("ymin"), bnd->get<double>("xmax"),
                          bnd->get<double>("ymax"));
    for (const auto& [name_tag, name] : obj) {
      if (name_tag == "name") boxes[name.get_value<std::string>()].push_back(box);
    }
  }
  return boxes;
}

void load_flickr(const std::filesystem::path& root, LoadReport& report) {
  const auto sentences = root / "Sentences";
  const auto annotations = root / "Annotations";
  if (!std::filesystem::is_directory(sentences) || !std::filesystem::is_directory(annotations)) {
    throw DomainError(root.string() + ": expected Sentences/ and Annotations/ directories");
  }
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(sentences)) {
    if (entry.path().extension() == ".txt") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());

  static const std::regex phrase_re(R"(\[/EN#(\d+)/(\S+) ([^\]]+)\])");
  for (const auto& file : files) {
    const std::string id = file.stem().string();
    std::map<std::string, std::vector<BoundingBox>> boxes;
    try {
      boxes = flickr_boxes(annotations / (id + ".xml"));
    } catch (const std::exception& e) {
      ++report.records;
      report.errors.push_back(id + ": annotation unreadable: " + e.what());
      continue;
    }
    std::ifstream in = open_input(file);
    std::string line;
    while (std::getline(in, line)) {
      for (auto it = std::sregex_iterator(line.begin(), line.end(), phrase_re); it != std::sregex_iterator(); ++it) {
        const std::string entity = (*it)[1];
        const std::string types = (*it)[2];
        const std::string phrase = (*it)[3];
        if (entity == "0" || types.find("notvisual") != std::string::npos) continue;
        ++report.records;
        const auto found = boxes.find(entity);
        if (found == boxes.end()) {
          report.skipped.push_back(id + ": '" + phrase + "' has no box");
          continue;
        }
        report.instances.push_back({id, (root / "flickr30k-images" / (id + ".jpg")).string(), phrase, found->second});
      }
    }
  }
}

}  // namespace

LoadReport load_dataset(const std::filesystem::path& path, DatasetFormat format) {
  LoadReport report;
  switch (format) {
    case DatasetFormat::internal: load_internal(path, report); break;
    case DatasetFormat::referit: load_referit(path, report); break;
    case DatasetFormat::flickr_entities: load_flickr(path, report); break;
  }
  if (report.errors.size() * 100 > report.records) {
    std::ostringstream msg;
    msg << path.string() << ": " << report.errors.size() << " of " << report.records
        << " records malformed (limit 1%); first: " << report.errors.front();
    throw DomainError(msg.str());
  }
  return report;
}

void write_instances(const std::filesystem::path& path, const std::vector<GroundingInstance>& instances) {
  std::ofstream out = open_output(path);
  for (const auto& inst : instances) {
    json boxes = json::array();
    for (const auto& b : inst.gt_boxes) boxes.push_back(box_to_json(b));
    out << json{{"image_id", inst.image_id}, {"image_path", inst.image_path}, {"query", inst.query},
                {"gt_boxes", boxes}}.dump()
        << '\n';
  }
}

ProposalLoad read_proposals(const std::filesystem::path& path) {
  std::ifstream in = open_input(path);
  ProposalLoad load;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.filename().string() + ":" + std::to_string(line_no);
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      throw DomainError(where + ": " + e.what());
    }
    const std::string image_id = rec.at("image_id").get<std::string>();
    const bool has_size = rec.contains("width") && rec.contains("height");
    auto& list = load.proposals[image_id];
    for (const auto& b : rec.at("boxes")) {
      try {
        BoundingBox box(b.at("x1").get<double>(), b.at("y1").get<double>(), b.at("x2").get<double>(),
                        b.at("y2").get<double>());
        if (has_size) {
          auto c = box.clipped(rec["width"].get<double>(), rec["height"].get<double>());
          if (!c) throw DomainError("box lies outside the image");
          box = *c;
        }
        std::string name = b.at("class_name").get<std::string>();
        if (name.empty()) throw DomainError("empty class_name");
        std::optional<double> score;
        if (b.contains("score") && !b["score"].is_null()) score = b["score"].get<double>();
        list.push_back({box, std::move(name), score});
      } catch (const std::exception& e) {
        load.warnings.push_back(where + ": proposal dropped: " + e.what());
      }
    }
  }
  return load;
}

void write_proposals(const std::filesystem::path& path, const std::vector<ProposalRecord>& records) {
  std::ofstream out = open_output(path);
  for (const auto& rec : records) {
    json boxes = json::array();
    for (const auto& p : rec.boxes) {
      json b{{"x1", p.box.x1()}, {"y1", p.box.y1()}, {"x2", p.box.x2()}, {"y2", p.box.y2()},
             {"class_name", p.class_name}};
      if (p.detector_score) b["score"] = *p.detector_score;
      boxes.push_back(std::move(b));
    }
    json j{{"image_id", rec.image_id}};
    if (rec.width && rec.height) {
      j["width"] = *rec.width;
      j["height"] = *rec.height;
    }
    j["boxes"] = std::move(boxes);
    out << j.dump() << '\n';
  }
}

AccuracyReport evaluate(const std::vector<GroundingInstance>& instances,
                        const std::vector<PredictionRecord>& predictions, EvalMode mode) {
  std::map<std::pair<std::string, std::string>, std::vector<const PredictionRecord*>> by_key;
  for (const auto& p : predictions) by_key[{p.image_id, p.query}].push_back(&p);
  std::map<std::pair<std::string, std::string>, std::size_t> used;

  AccuracyReport report;
  report.n = instances.size();
  std::size_t correct = 0;
  for (const auto& inst : instances) {
    if (inst.gt_boxes.empty()) throw DomainError("evaluate: instance without ground truth");
    InstanceResult r{inst.image_id, inst.query};
    const std::pair key{inst.image_id, inst.query};
    const auto it = by_key.find(key);
    std::size_t& k = used[key];
    if (it == by_key.end() || k >= it->second.size() || it->second[k]->boxes.empty()) {
      r.missing = true;
      ++report.missing;
    } else {
      const BoundingBox gt = mode == EvalMode::merge ? union_box(inst.gt_boxes) : inst.gt_boxes.front();
      r.iou = iou(union_box(it->second[k]->boxes), gt);
      r.correct = r.iou > 0.5;
      correct += r.correct;
    }
    if (it != by_key.end()) ++k;
    report.per_instance.push_back(std::move(r));
  }
  report.accuracy = report.n == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(report.n);
  return report;
}

}  // namespace refground
