#pragma once

#include "refground/com.hpp"
#include "refground/core.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace refground {

/// One query with its ground-truth region(s). Multi-box phrases keep every
/// box; evaluation decides whether to merge them.
struct GroundingInstance {
  std::string image_id;
  std::string image_path;
  std::string query;
  std::vector<BoundingBox> gt_boxes;

  bool operator==(const GroundingInstance&) const = default;
};

enum class DatasetFormat { internal, flickr_entities, referit };

DatasetFormat parse_dataset_format(const std::string& text);

struct LoadReport {
  std::vector<GroundingInstance> instances;
  /// One line per rejected record.
  std::vector<std::string> errors;
  /// Well-formed phrases that cannot be grounded (flickr_entities phrases
  /// whose entity has no box).
  std::vector<std::string> skipped;
  std::size_t records = 0;
};

/// Reads a dataset and normalizes it to GroundingInstance records.
///
/// internal: JSON lines {image_id, image_path, query, gt_boxes:[[x1,y1,x2,y2],...]}.
/// flickr_entities: a directory with Sentences/<id>.txt, Annotations/<id>.xml
///   and optionally flickr30k-images/<id>.jpg.
/// referit: a JSON array of [image_file, [x, y, w, h], query] triplets; the
///   image directory is taken to be the file's own directory.
///
/// Malformed records are collected in `errors`. Throws DomainError when more
/// than 1% of records are malformed or the input cannot be opened.
LoadReport load_dataset(const std::filesystem::path& path, DatasetFormat format);

void write_instances(const std::filesystem::path& path, const std::vector<GroundingInstance>& instances);

struct ProposalLoad {
  std::map<std::string, std::vector<Proposal>> proposals;
  std::vector<std::string> warnings;
};

/// Reads JSON lines {image_id, width?, height?, boxes:[{x1,y1,x2,y2,class_name,score?}]}.
/// Boxes are clipped to width x height when both are present; boxes that
/// are invalid or vanish after clipping are dropped with a warning.
ProposalLoad read_proposals(const std::filesystem::path& path);

struct ProposalRecord {
  std::string image_id;
  std::optional<int> width, height;
  std::vector<Proposal> boxes;
};

void write_proposals(const std::filesystem::path& path, const std::vector<ProposalRecord>& records);

/// Boxes predicted for one query.
struct PredictionRecord {
  std::string image_id;
  std::string query;
  std::vector<BoundingBox> boxes;
};

enum class EvalMode { single, merge };

EvalMode parse_eval_mode(const std::string& text);
std::string to_string(EvalMode mode);

struct InstanceResult {
  std::string image_id;
  std::string query;
  double iou = 0.0;
  bool correct = false;
  bool missing = false;
};

struct AccuracyReport {
  double accuracy = 0.0;
  std::size_t n = 0;
  std::size_t missing = 0;
  std::vector<InstanceResult> per_instance;
};

/// A prediction is correct when its IoU with the ground truth is strictly
/// greater than 0.5. In merge mode the ground truth is the union of the
/// instance's boxes; otherwise the first box. A prediction with several
/// boxes is scored by their union. Predictions are matched to instances by
/// (image_id, query), in order for repeated keys; unmatched instances count
/// as incorrect and are flagged missing.
AccuracyReport evaluate(const std::vector<GroundingInstance>& instances,
                        const std::vector<PredictionRecord>& predictions, EvalMode mode);

}  // namespace refground
