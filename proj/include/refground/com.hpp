#pragma once

#include "refground/core.hpp"
#include "refground/encoder.hpp"

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace refground {

struct Proposal {
  BoundingBox box;
  std::string class_name;
  std::optional<double> detector_score;
};

/// Scored candidates for one image. Once augmented, the last entry is the
/// single top-down candidate.
struct CandidateSet {
  std::string image_id;
  std::vector<ScoredCandidate> candidates;

  std::size_t top_down_count() const;
};

/// S^PQ for each proposal: cosine between the encoded crop and the query.
/// Entries are nullopt when the clipped box covers no pixel.
std::vector<std::optional<double>> score_proposals(const Image& image,
                                                   std::span<const Proposal> proposals,
                                                   const FeatureVector& fq,
                                                   const EncoderBackend& backend);

/// Applies an optional "{}" template to a class name.
std::string apply_prompt(std::string_view prompt_template, const std::string& class_name);

/// S^CQ for each class name. Each distinct name is encoded once.
std::vector<double> score_class_names(std::span<const std::string> class_names,
                                      const FeatureVector& fq, const EncoderBackend& backend,
                                      std::string_view prompt_template = {});

std::vector<double> bottom_up_scores(std::span<const double> s_pq, std::span<const double> s_cq);

/// Index of the highest S^CQ among proposal candidates, first on ties.
std::optional<std::size_t> best_class_match(const CandidateSet& set);

/// Appends the top-down box as a candidate named after the proposal with the
/// highest S^CQ (the raw query when there are no proposals). Its own S^PQ
/// and S^CQ are computed like any proposal's.
CandidateSet augment_with_topdown(CandidateSet set, const BoundingBox& p_t, const Image& image,
                                  std::string_view query, const FeatureVector& fq,
                                  const EncoderBackend& backend,
                                  std::string_view prompt_template = {});

}  // namespace refground
