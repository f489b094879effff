#pragma once

#include "refground/dataset.hpp"
#include "refground/kam.hpp"
#include "refground/pipeline.hpp"
#include "refground/records.hpp"
#include "refground/synthetic.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace refground {

using ProposalMap = std::map<std::string, std::vector<Proposal>>;

ProposalMap proposal_map(const std::vector<ProposalRecord>& records);

/// Renders scenes on demand.
ImageProvider scene_images(const std::vector<Scene>& scenes);

/// Reads PPM files; relative image paths resolve against `base`.
/// The image's source_id is its image_id.
ImageProvider ppm_images(const std::vector<GroundingInstance>& instances, std::filesystem::path base);

/// Grounds every instance, in instance order. Images without an entry in
/// `proposals` throw DomainError unless `allow_missing_proposals` is set,
/// in which case they run with an empty proposal set.
std::vector<Prediction> ground_all(const Grounder& grounder, const std::vector<GroundingInstance>& instances,
                                   const ProposalMap& proposals, const ImageProvider& images, int threads,
                                   bool allow_missing_proposals = false);

std::vector<PredictionRecord> to_records(const std::vector<Prediction>& predictions);

/// Pseudo-pairs every image with the query pool and mines labels with the
/// given grounder.
MiningReport mine(const Grounder& grounder, const std::vector<std::string>& image_ids,
                  const std::vector<std::string>& query_pool, const ProposalMap& proposals,
                  const ImageProvider& images, double thr_k, int threads);

}  // namespace refground
