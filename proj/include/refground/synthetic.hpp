#pragma once

#include "refground/dataset.hpp"
#include "refground/encoder.hpp"
#include "refground/image.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace refground {

enum class Shape { circle, square, triangle };

std::string to_string(Shape shape);

struct PaletteColor {
  std::string name;
  std::array<std::uint8_t, 3> rgb;
};

const std::vector<PaletteColor>& synthetic_palette();
const std::vector<std::string>& synthetic_shape_names();
/// left, right, top, bottom.
const std::vector<std::string>& synthetic_side_names();

struct SceneObject {
  Shape shape = Shape::circle;
  int color = 0;
  double cx = 0.0, cy = 0.0;
  /// Half of the bounding square's side.
  double radius = 0.0;

  BoundingBox box() const { return {cx - radius, cy - radius, cx + radius, cy + radius}; }
  /// Whether the source-frame point lies on the rendered shape.
  bool covers(double x, double y) const;
  std::string horizontal_side(int image_width) const;
  std::string vertical_side(int image_height) const;
};

struct Scene {
  std::string image_id;
  int width = 0;
  int height = 0;
  std::vector<SceneObject> objects;
  int referent = 0;
  std::string query;
};

struct SyntheticWorldConfig {
  std::uint64_t seed = 0;
  int image_width = 224;
  int image_height = 224;
  int min_objects = 2;
  int max_objects = 5;
  double min_radius = 18.0;
  double max_radius = 32.0;
  /// Free space kept between object bounding boxes.
  double gap = 6.0;
  /// Fraction of instances whose referent gets no proposal.
  double distractor_rate = 0.0;
  /// Standard deviation of the per-coordinate proposal noise, in pixels.
  double box_noise = 0.0;
  /// Probability that a proposal's class name is replaced by another shape.
  double class_noise = 0.0;
  /// Background proposals per image, none of which touches the referent.
  int background_proposals = 2;

  void validate() const;
};

struct SyntheticCorpus {
  std::vector<GroundingInstance> instances;
  std::vector<ProposalRecord> proposals;
  std::vector<Scene> scenes;
};

/// Scenes of 2-5 colored shapes, one uniquely described referent per
/// image, and jittered proposals. Unless the instance is distractor-only,
/// one proposal overlaps the referent at IoU >= 0.5; no other proposal
/// touches the referent's box. The same config yields the same corpus.
SyntheticCorpus generate_synthetic(const SyntheticWorldConfig& cfg, int n);

Image render_scene(const Scene& scene);

/// Writes instances.jsonl, proposals.jsonl, fixture.jsonl and images/<id>.ppm.
void write_synthetic(const std::filesystem::path& dir, const SyntheticCorpus& corpus);

/// Scenes by image_id, as written to fixture.jsonl.
std::map<std::string, Scene> read_fixture(const std::filesystem::path& path);

struct OracleEncoderConfig {
  std::uint64_t seed = 0;
  int grid = 56;
  int feature_dim = 512;
  /// Attention sharpness per head: logits are beta_h * objectness.
  std::vector<double> head_beta = {2.0, 4.0};
  /// Weight of the shared direction every image and text feature carries.
  double common_weight = 2.0;
  /// Sample points per patch side.
  int samples = 4;

  void validate() const;
};

/// Backend that reads scene content from a fixture instead of pixels.
///
/// Each patch's value vector is the coverage-weighted semantic embedding of
/// the shapes under it (color, shape, side and their conjunctions). The
/// classification token attends to patches in proportion to their
/// objectness and has a zero value vector, so the image feature is
/// linear in the attention and its gradient is exact. Queries built from
/// the synthetic templates embed onto the same conjunction directions, so a
/// referent's crop is always the closest proposal to its query.
///
/// Images must carry a source_id present in the fixture.
class SceneOracleEncoder final : public EncoderBackend {
 public:
  SceneOracleEncoder(std::map<std::string, Scene> scenes, OracleEncoderConfig cfg = {});

  std::string id() const override { return "oracle"; }
  int feature_dim() const override { return cfg_.feature_dim; }
  BackendCapabilities capabilities() const override { return {true, true, true}; }

  ImageEncoding encode_image(const Image& image) const override;
  FeatureVector encode_text(std::string_view text) const override;
  AttentionGradients attention_gradients(const AttentionRecord& rec, const FeatureVector& fi,
                                         const FeatureVector& fq) const override;

  /// Image feature recomputed with the attention replaced by `att`.
  FeatureVector tail_feature(const AttentionRecord& rec, const Eigen::MatrixXd& att) const;

  /// Semantic embedding of one object in its scene.
  FeatureVector object_embedding(const SceneObject& obj, const Scene& scene) const;

 private:
  const Scene& scene_of(const Image& image) const;
  FeatureVector direction(const std::string& key) const;
  const FeatureVector& atom(const std::string& key) const;

  std::map<std::string, Scene> scenes_;
  OracleEncoderConfig cfg_;
  std::map<std::string, FeatureVector> atoms_;
};

}  // namespace refground
