#pragma once

#include "refground/core.hpp"
#include "refground/image.hpp"

#include <cstdint>
#include <memory>
#include <string>
#include <string_view>

namespace refground {

struct BackendCapabilities {
  bool supports_gradients = false;
  bool deterministic = false;
  /// False means callers must serialize encode calls on one instance.
  bool thread_safe = false;
};

/// Backend-private activations needed to differentiate the post-attention
/// tail. Opaque to everything except the backend that produced it.
class AttentionTail {
 public:
  virtual ~AttentionTail() = default;
};

/// Last-block attention of the classification token over the image patches.
///
/// att is H x U (heads x patches, patches in row-major grid order). The
/// softmax ranges over all U+1 tokens, so each row sums to less than one;
/// the classification token's attention to itself holds the remainder.
struct AttentionRecord {
  Eigen::MatrixXd att;
  int grid_rows = 0;
  int grid_cols = 0;
  int head_dim = 0;
  std::uint64_t producer = 0;
  std::shared_ptr<const AttentionTail> tail;

  int heads() const { return static_cast<int>(att.rows()); }
  int patches() const { return static_cast<int>(att.cols()); }

  /// Throws DomainError unless every entry is in (0,1), row sums are <= 1
  /// and the grid matches the patch count.
  void validate() const;
};

struct ImageEncoding {
  FeatureVector feature;
  AttentionRecord attention;
};

struct AttentionGradients {
  double s_iq = 0.0;
  /// d s_iq / d att[h,u], other attention entries held fixed.
  Eigen::MatrixXd alpha;
};

/// Joint image/text embedding space with attention capture.
///
/// Image and text features share feature_dim(). Features are returned
/// unnormalized.
class EncoderBackend {
 public:
  EncoderBackend();
  virtual ~EncoderBackend() = default;
  EncoderBackend(const EncoderBackend&) = delete;
  EncoderBackend& operator=(const EncoderBackend&) = delete;

  virtual std::string id() const = 0;
  virtual int feature_dim() const = 0;
  virtual BackendCapabilities capabilities() const = 0;

  virtual ImageEncoding encode_image(const Image& image) const = 0;
  virtual FeatureVector encode_image_feature(const Image& image) const {
    return encode_image(image).feature;
  }
  virtual FeatureVector encode_text(std::string_view text) const = 0;

  /// Image-query cosine and its gradient w.r.t. the post-softmax attention
  /// scores in `rec`. `rec` and `fi` must come from the same encode_image
  /// call on this instance.
  virtual AttentionGradients attention_gradients(const AttentionRecord& rec,
                                                 const FeatureVector& fi,
                                                 const FeatureVector& fq) const = 0;

  std::uint64_t instance_id() const { return instance_id_; }

 private:
  std::uint64_t instance_id_;
};

/// Lowercased alphanumeric tokens.
std::vector<std::string> tokenize(std::string_view text);

std::uint64_t fnv1a64(std::string_view bytes);

}  // namespace refground
