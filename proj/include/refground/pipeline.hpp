#pragma once

#include "refground/com.hpp"
#include "refground/core.hpp"
#include "refground/encoder.hpp"
#include "refground/fusion.hpp"
#include "refground/kam.hpp"
#include "refground/qam.hpp"

#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

namespace refground {

enum class BottomUpInfo { both, class_name, visual };

BottomUpInfo parse_bottom_up_info(const std::string& text);
std::string to_string(BottomUpInfo info);
TopDownMapKind parse_top_down_map(const std::string& text);
std::string to_string(TopDownMapKind kind);

/// Stage switches and weights for one grounding run.
struct GroundingOptions {
  QamConfig qam;
  FusionConfig fusion;
  TopDownMapKind top_down = TopDownMapKind::query_aware;
  /// Add the top-down box to the proposal pool.
  bool augment_proposals = true;
  /// Add lambda_t * S^TD to the bottom-up score.
  bool use_fusion = true;
  /// Predict the top-down box directly.
  bool qam_only = false;
  BottomUpInfo bottom_up = BottomUpInfo::both;
  std::string prompt_template;

  void validate() const;
};

struct Prediction {
  std::string image_id;
  std::string query;
  std::vector<BoundingBox> boxes;
  CandidateSet candidates;
  Selection selection;
  std::optional<BoundingBox> top_down_box;
  double s_iq = 0.0;
  bool map_degenerate = false;
  std::vector<std::string> warnings;
  std::optional<QueryAwareMap> map;
};

/// Runs top-down map extraction, proposal matching, fusion and selection
/// for one image/query pair.
class Grounder {
 public:
  Grounder(const EncoderBackend& backend, GroundingOptions options, const KamModel* kam = nullptr);

  Prediction ground(const Image& image, std::string_view image_id, std::string_view query,
                    std::span<const Proposal> proposals, bool keep_map = false) const;

  const GroundingOptions& options() const { return options_; }
  const EncoderBackend& backend() const { return backend_; }

 private:
  const EncoderBackend& backend_;
  GroundingOptions options_;
  const KamModel* kam_;
};

/// Selected fused score normalized over the prediction's candidate set.
/// Single-candidate and constant-score sets normalize to 1.
double normalized_selected_fused(const Prediction& prediction);

/// Applies fn to 0..n-1 on up to `threads` workers; results keep index order.
template <typename Fn>
auto parallel_map(std::size_t n, int threads, Fn&& fn) -> std::vector<decltype(fn(std::size_t{}))> {
  using Result = decltype(fn(std::size_t{}));
  std::vector<std::optional<Result>> slots(n);
  std::vector<std::exception_ptr> errors(n);
  const std::size_t workers = std::max<std::size_t>(1, std::min<std::size_t>(threads > 0 ? threads : 1, n));
  auto run = [&](std::size_t first) {
    for (std::size_t i = first; i < n; i += workers) {
      try {
        slots[i].emplace(fn(i));
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  if (workers == 1) {
    run(0);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(run, w);
  }
  std::vector<Result> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (errors[i]) std::rethrow_exception(errors[i]);
    out.push_back(std::move(*slots[i]));
  }
  return out;
}

}  // namespace refground
