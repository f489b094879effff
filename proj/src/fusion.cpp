#include "refground/fusion.hpp"

#include "refground/image.hpp"

#include <algorithm>
#include <numeric>

namespace refground {

SelectionMode parse_selection_mode(const std::string& text) {
  if (text == "merge_union") return SelectionMode::merge_union;
  if (text == "largest_above_mean") return SelectionMode::largest_above_mean;
  throw ConfigError("unknown selection mode '" + text + "'");
}

std::string to_string(SelectionMode mode) {
  return mode == SelectionMode::merge_union ? "merge_union" : "largest_above_mean";
}

void FusionConfig::validate() const {
  if (!(lambda_t >= 0.0) || !(lambda_k >= 0.0)) throw ConfigError("fusion weights must be >= 0");
}

TopDownScore topdown_score(const BoundingBox& box, const QueryAwareMap& map) {
  const PixelRect r = covered_pixels(box, map.width(), map.height());
  if (r.empty()) return {0.0, 0};
  double sum = 0.0;
  for (int y = r.y_begin; y < r.y_end; ++y) {
    for (int x = r.x_begin; x < r.x_end; ++x) sum += map.values(y, x);
  }
  return {std::min(sum / r.count(), 1.0), r.count()};
}

std::vector<std::size_t> above_mean(std::span<const double> scores) {
  std::vector<std::size_t> out;
  if (scores.empty()) return out;
  const double mean = std::accumulate(scores.begin(), scores.end(), 0.0) / scores.size();
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (scores[i] > mean) out.push_back(i);
  }
  return out;
}

Selection select_prediction(const CandidateSet& set, SelectionMode mode) {
  const auto& cands = set.candidates;
  if (cands.empty()) throw DomainError("select_prediction: empty candidate set");
  std::vector<double> scores(cands.size());
  std::transform(cands.begin(), cands.end(), scores.begin(), [](const auto& c) { return c.fused(); });

  Selection sel;
  sel.members = above_mean(scores);
  if (sel.members.empty()) {
    const auto best = std::max_element(scores.begin(), scores.end()) - scores.begin();
    sel.members = {static_cast<std::size_t>(best)};
    sel.boxes = {cands[best].box()};
    return sel;
  }
  if (mode == SelectionMode::merge_union) {
    std::vector<BoundingBox> boxes;
    for (auto i : sel.members) boxes.push_back(cands[i].box());
    sel.boxes = {union_box(boxes)};
    return sel;
  }
  std::size_t largest = sel.members.front();
  for (auto i : sel.members) {
    if (cands[i].box().area() > cands[largest].box().area()) largest = i;
  }
  sel.members = {largest};
  sel.boxes = {cands[largest].box()};
  return sel;
}

}  // namespace refground
