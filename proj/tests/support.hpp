#pragma once

#include "refground/encoder.hpp"
#include "refground/image.hpp"

#include <doctest.h>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <functional>
#include <random>
#include <string>

namespace testing {

using namespace refground;

inline Image random_image(int h, int w, std::uint64_t seed) {
  Image img(h, w);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (auto& v : img.rgb) v = u(rng);
  img.source_id = "random_" + std::to_string(seed);
  return img;
}

/// Backend whose features come from caller-supplied functions. Attention is
/// a single head over a 1x1 grid.
class FunctionBackend final : public EncoderBackend {
 public:
  std::function<FeatureVector(const Image&)> image_fn;
  std::function<FeatureVector(std::string_view)> text_fn;
  bool gradients = false;
  int dim = 2;
  mutable std::atomic<int> text_calls{0};
  mutable std::atomic<int> image_calls{0};

  std::string id() const override { return "function"; }
  int feature_dim() const override { return dim; }
  BackendCapabilities capabilities() const override { return {gradients, true, true}; }

  ImageEncoding encode_image(const Image& image) const override {
    ++image_calls;
    ImageEncoding enc;
    enc.feature = image_fn(image);
    enc.attention.att = Eigen::MatrixXd::Constant(1, 1, 0.5);
    enc.attention.grid_rows = enc.attention.grid_cols = 1;
    enc.attention.head_dim = 1;
    enc.attention.producer = instance_id();
    return enc;
  }
  FeatureVector encode_text(std::string_view text) const override {
    ++text_calls;
    return text_fn(text);
  }
  AttentionGradients attention_gradients(const AttentionRecord&, const FeatureVector&,
                                         const FeatureVector&) const override {
    throw CapabilityError("function backend has no gradients");
  }
};

inline FeatureVector vec2(double a, double b) { return (FeatureVector(2) << a, b).finished(); }

/// Scratch directory removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() /
           ("refground_" + tag + "_" + std::to_string(std::random_device{}()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
};

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace testing
