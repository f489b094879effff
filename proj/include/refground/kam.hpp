#pragma once

#include "refground/com.hpp"
#include "refground/core.hpp"
#include "refground/encoder.hpp"
#include "refground/mlp.hpp"

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace refground {

using KamModel = BatchNormMlp<float>;

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct KamTrainConfig {
  int epochs = 50;
  double learning_rate = 1e-4;
  /// Images per optimizer step; all candidates of those images form the
  /// normalization batch.
  int batch_size = 32;
  double thr_k = 0.9;
  std::uint64_t seed = 0;
  int hidden_dim = 512;

  void validate() const;
};

/// [fi, fp_r, fc_r, fq] as one input row.
Eigen::RowVectorXf kam_input(const FeatureVector& fi, const FeatureVector& fp,
                             const FeatureVector& fc, const FeatureVector& fq);

/// S^KAM in (0,1), inference mode.
double kam_forward(const KamModel& model, const FeatureVector& fi, const FeatureVector& fp,
                   const FeatureVector& fc, const FeatureVector& fq);

/// One S^KAM per input row.
Eigen::VectorXd kam_forward_batch(const KamModel& model, const Eigen::MatrixXf& inputs);

struct PseudoPair {
  std::string image_id;
  std::string query;
  double pair_score = 0.0;
};

/// For every image, the query with the highest cosine to its feature
/// (first in pool order on ties). Queries may be reused across images.
/// Output follows image_id order.
std::vector<PseudoPair> pseudo_pair(const std::map<std::string, FeatureVector>& image_features,
                                    std::span<const std::string> query_pool,
                                    const EncoderBackend& backend);

struct PseudoLabel {
  std::string image_id;
  std::string query;
  BoundingBox box;
  double score = 0.0;
};

/// What the grounding stack reports for one pseudo pair.
struct MiningOutcome {
  BoundingBox box;
  /// Selected candidate's fused score after min-max normalization over the
  /// image's candidate set, in [0,1].
  double normalized_fused = 0.0;
};

using MiningGrounder = std::function<MiningOutcome(const PseudoPair&)>;

/// pair_score x normalized fused score; labels are kept when it exceeds thr_k.
double mining_score(double pair_score, double normalized_fused);

struct MiningReport {
  std::vector<PseudoLabel> labels;
  std::vector<std::string> skipped;
};

/// Runs the grounding stack on each pair and keeps boxes whose mining score
/// exceeds thr_k. Pairs whose grounding throws are skipped and logged.
/// Labels are sorted by image_id.
MiningReport mine_pseudo_labels(std::span<const PseudoPair> pairs, const MiningGrounder& ground,
                                double thr_k, int threads = 1);

/// One image's candidates as KAM input rows plus the positive row.
struct KamExample {
  std::string image_id;
  Eigen::MatrixXf inputs;
  int positive = 0;
};

/// Index of the proposal with the highest IoU >= 0.5 to `box`, first on ties.
std::optional<std::size_t> positive_proposal(std::span<const Proposal> proposals,
                                             const BoundingBox& box);

using ImageProvider = std::function<Image(const std::string& image_id)>;

struct ExampleBuild {
  std::vector<KamExample> examples;
  std::vector<std::string> unusable;
};

/// Encodes every proposal of each label's image. Labels without a proposal
/// at IoU >= 0.5 are reported as unusable.
ExampleBuild build_kam_examples(std::span<const PseudoLabel> labels,
                                const std::map<std::string, std::vector<Proposal>>& proposals,
                                const ImageProvider& images, const EncoderBackend& backend);

struct KamTrainResult {
  KamModel model;
  /// Mean per-image training loss of each epoch.
  std::vector<double> loss_trace;
  /// Held-out loss per epoch; empty when no split was made.
  std::vector<double> validation_trace;
  std::size_t train_images = 0;
  std::size_t validation_images = 0;
};

/// Softmax cross-entropy over each image's candidate logits with the
/// positive as target, optimized with Adam.
///
/// With ten or more examples, images whose id hashes to 0 mod 10 are held
/// out for validation.
KamTrainResult train_kam(std::span<const KamExample> examples, const KamTrainConfig& cfg);

/// Per-image loss of `model` in inference mode.
double kam_loss(const KamModel& model, const KamExample& example);

void save_kam(const KamModel& model, const std::filesystem::path& stem,
              const std::map<std::string, std::string>& metadata);
KamModel load_kam(const std::filesystem::path& stem);

}  // namespace refground
