#pragma once

#include "refground/com.hpp"
#include "refground/core.hpp"
#include "refground/qam.hpp"

#include <span>
#include <string>
#include <vector>

namespace refground {

enum class SelectionMode { merge_union, largest_above_mean };

SelectionMode parse_selection_mode(const std::string& text);
std::string to_string(SelectionMode mode);

struct FusionConfig {
  double lambda_t = 1000.0;
  double lambda_k = 1.0;
  SelectionMode selection_mode = SelectionMode::largest_above_mean;

  void validate() const;
};

struct TopDownScore {
  double value = 0.0;
  /// Pixels averaged; zero means the clipped box covered nothing.
  int pixels = 0;
};

/// Mean map value over pixels whose centers fall inside the box.
TopDownScore topdown_score(const BoundingBox& box, const QueryAwareMap& map);

inline double fuse(double s_bu, double s_td, const FusionConfig& cfg) {
  return s_bu + cfg.lambda_t * s_td;
}

inline double fuse_with_kam(double s_bu, double s_td, double s_kam, const FusionConfig& cfg) {
  return s_bu + cfg.lambda_t * s_td + cfg.lambda_k * s_kam;
}

/// Indices whose score is strictly greater than the mean score.
std::vector<std::size_t> above_mean(std::span<const double> scores);

struct Selection {
  std::vector<BoundingBox> boxes;
  /// Candidates that contributed to `boxes`.
  std::vector<std::size_t> members;
};

/// Final prediction from fused candidate scores.
///
/// merge_union returns the union of all strictly above-mean candidates;
/// largest_above_mean returns the largest of them (first on equal area).
/// When nothing is above the mean the global argmax is used (first on ties).
Selection select_prediction(const CandidateSet& set, SelectionMode mode);

}  // namespace refground
