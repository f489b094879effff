#pragma once

#include "refground/core.hpp"
#include "refground/encoder.hpp"

#include <cstdint>
#include <optional>
#include <vector>

namespace refground {

struct QamConfig {
  double thr_a = 0.7;

  void validate() const;
};

/// Pixel-resolution attention map, rows = image height.
struct QueryAwareMap {
  Eigen::ArrayXXd values;
  /// Constant input; values are all zero and carry no localization.
  bool degenerate = false;
  std::optional<double> threshold_applied;

  int height() const { return static_cast<int>(values.rows()); }
  int width() const { return static_cast<int>(values.cols()); }
};

/// att * max(alpha, 0), element-wise.
template <typename DerivedA, typename DerivedB>
Eigen::ArrayXXd weight_attention(const Eigen::DenseBase<DerivedA>& att,
                                 const Eigen::DenseBase<DerivedB>& alpha) {
  if (att.rows() != alpha.rows() || att.cols() != alpha.cols()) {
    throw DomainError("weight_attention: shape mismatch");
  }
  return att.derived().array() * alpha.derived().array().max(0.0);
}

/// Mean over heads (rows) for each patch (column).
template <typename Derived>
Eigen::VectorXd aggregate_heads(const Eigen::DenseBase<Derived>& weighted) {
  if (weighted.rows() < 1) throw DomainError("aggregate_heads: no heads");
  return weighted.derived().matrix().colwise().mean().transpose();
}

/// Bilinear upsampling of a rows x cols patch grid to height x width
/// pixels followed by min-max normalization.
///
/// Patch (i,j) is anchored at ((i+0.5) height/rows, (j+0.5) width/cols);
/// pixel (y,x) samples at its center (y+0.5, x+0.5) and clamps to the
/// outermost anchors.
QueryAwareMap upsample_normalize(const Eigen::VectorXd& patch_scores, int rows, int cols,
                                 int height, int width);

struct ExtractedBox {
  BoundingBox box;
  double mass = 0.0;
};

/// Tight box of the heaviest 4-connected component of {v >= thr_a}.
///
/// Ties on mass go to the larger pixel count, then to the component whose
/// first pixel in raster order comes first. Degenerate maps yield the full
/// image with mass 0.
ExtractedBox extract_box(const QueryAwareMap& map, double thr_a);

/// 8-bit export, values scaled by 255 and rounded half-up.
std::vector<std::uint8_t> to_grayscale(const QueryAwareMap& map);

enum class TopDownMapKind { query_aware, vanilla_visual, off };

struct TopDownResult {
  QueryAwareMap map;
  ExtractedBox extracted;
  double s_iq = 0.0;
};

/// Patch scores for the requested map kind. vanilla_visual averages the raw
/// attention; query_aware weights it with the similarity gradients first.
Eigen::VectorXd patch_scores(const EncoderBackend& backend, const ImageEncoding& enc,
                             const FeatureVector& fq, TopDownMapKind kind, double* s_iq = nullptr);

/// Map and box for one image/query pair. `kind` must not be off.
TopDownResult top_down(const EncoderBackend& backend, const ImageEncoding& enc,
                       const FeatureVector& fq, int image_height, int image_width,
                       TopDownMapKind kind, const QamConfig& cfg);

}  // namespace refground
