#pragma once

#include "refground/encoder.hpp"

#include <vector>

namespace refground {

struct MockEncoderConfig {
  std::uint64_t seed = 0;
  int grid_rows = 7;
  int grid_cols = 7;
  int embed_dim = 32;
  int heads = 4;
  int blocks = 2;
  int vocab_hash_size = 4096;
  int feature_dim = 512;
  /// Each patch is resampled to patch_samples x patch_samples RGB cells.
  int patch_samples = 4;
  int max_text_tokens = 16;
  int ffn_dim = 64;

  void validate() const;
};

/// Small seeded transformer pair (image tower + text tower) projecting into
/// a shared feature space.
///
/// Both towers are pre-norm blocks of multi-head attention and a GELU
/// feedforward; the classification token is pooled and projected. The
/// post-attention tail of the image tower's last block is differentiated
/// by hand, giving exact gradients of the image-text cosine w.r.t. the
/// classification token's attention scores.
class MockTransformerEncoder final : public EncoderBackend {
 public:
  struct LayerNorm {
    Eigen::VectorXd gamma, beta;
  };

  struct Block {
    LayerNorm ln1, ln2;
    Eigen::MatrixXd wq, wk, wv, wo;
    Eigen::VectorXd bo;
    Eigen::MatrixXd w1, w2;
    Eigen::VectorXd b1, b2;
  };

  struct Tower {
    Eigen::MatrixXd input_embed;  // image: E x (3 s^2); text: vocab x E
    Eigen::MatrixXd pos;          // tokens x E
    Eigen::VectorXd cls;
    std::vector<Block> blocks;
    LayerNorm ln_final;
    Eigen::MatrixXd proj;  // D x E
  };

  explicit MockTransformerEncoder(MockEncoderConfig cfg = {});

  std::string id() const override { return "mock"; }
  int feature_dim() const override { return cfg_.feature_dim; }
  BackendCapabilities capabilities() const override { return {true, true, true}; }
  const MockEncoderConfig& config() const { return cfg_; }

  ImageEncoding encode_image(const Image& image) const override;
  FeatureVector encode_text(std::string_view text) const override;
  AttentionGradients attention_gradients(const AttentionRecord& rec, const FeatureVector& fi,
                                         const FeatureVector& fq) const override;

  /// Re-runs the image tower after the last block's attention with the
  /// classification-token attention replaced by `att` (H x U patches; the
  /// self-attention column keeps its recorded value).
  FeatureVector tail_feature(const AttentionRecord& rec, const Eigen::MatrixXd& att) const;

  /// Patch tokens (U x 3 s^2) fed to the image tower, before embedding.
  Eigen::MatrixXd patchify(const Image& image) const;

 private:
  MockEncoderConfig cfg_;
  Tower image_;
  Tower text_;
};

}  // namespace refground
