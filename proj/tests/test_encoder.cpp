#include "fd_check.hpp"
#include "support.hpp"

#include "refground/mock_encoder.hpp"
#include "refground/qam.hpp"
#include "refground/synthetic.hpp"

using namespace refground;
using testing::random_image;

TEST_CASE("mock encoder is deterministic") {
  MockTransformerEncoder a, b;
  const Image img = random_image(224, 224, 5);
  const ImageEncoding e1 = a.encode_image(img), e2 = a.encode_image(img), e3 = b.encode_image(img);
  CHECK(e1.feature == e2.feature);
  CHECK(e1.feature == e3.feature);
  CHECK(e1.attention.att == e3.attention.att);
  CHECK(a.encode_text("bird") == b.encode_text("bird"));
  const FeatureVector fq = a.encode_text("red bird");
  CHECK(a.attention_gradients(e1.attention, e1.feature, fq).alpha ==
        b.attention_gradients(e3.attention, e3.feature, fq).alpha);
  MockEncoderConfig other;
  other.seed = 1;
  CHECK(MockTransformerEncoder(other).encode_text("bird") != a.encode_text("bird"));
}

TEST_CASE("mock attention record shape and mass") {
  MockTransformerEncoder enc;
  for (auto [h, w] : {std::pair{224, 224}, std::pair{31, 97}, std::pair{5, 3}}) {
    const ImageEncoding e = enc.encode_image(random_image(h, w, 9));
    // 7 x 7 grid: 49 patches per head.
    CHECK(e.attention.heads() == 4);
    CHECK(e.attention.patches() == 7 * 7);
    CHECK(e.attention.head_dim == 32 / 4);
    CHECK_NOTHROW(e.attention.validate());
    for (Eigen::Index r = 0; r < e.attention.att.rows(); ++r) {
      CHECK(e.attention.att.row(r).sum() <= 1.0);
      CHECK(e.attention.att.row(r).minCoeff() > 0.0);
    }
  }
}

TEST_CASE("mock text encoding") {
  MockTransformerEncoder enc;
  CHECK(enc.encode_text("bird").size() == 512);
  CHECK(enc.encode_image(random_image(20, 20, 1)).feature.size() == 512);
  CHECK(enc.encode_text("bird") != enc.encode_text("left bird"));
  CHECK_THROWS_AS(enc.encode_text(""), DomainError);
  CHECK_THROWS_AS(enc.encode_text("  ,. "), DomainError);
  CHECK(enc.encode_text("Bird!") == enc.encode_text("bird"));
}

TEST_CASE("mock config validation") {
  MockEncoderConfig cfg;
  cfg.embed_dim = 30;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("mock gradients match central differences") {
  MockTransformerEncoder enc;
  for (int t = 0; t < 10; ++t) {
    const Image img = random_image(64 + 8 * t, 96 - 4 * t, 100 + t);
    const ImageEncoding e = enc.encode_image(img);
    const FeatureVector fq = enc.encode_text("query number " + std::to_string(t));
    const auto r = testing::finite_difference_check(enc, e, fq, 1e-5);
    CHECK(r.entries == 4 * 49);
    CHECK(r.max_relative_error <= 1e-3);
  }
}

TEST_CASE("self similarity has a stationary gradient") {
  MockTransformerEncoder enc;
  const ImageEncoding e = enc.encode_image(random_image(32, 32, 3));
  const AttentionGradients g = enc.attention_gradients(e.attention, e.feature, e.feature);
  CHECK(g.s_iq == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(g.alpha.cwiseAbs().maxCoeff() < 1e-9);
  // The gradient w.r.t. fi at fq = fi is orthogonal to fi: rescaling fi
  // leaves the cosine unchanged.
  const FeatureVector fq = 3.0 * e.feature;
  CHECK(enc.attention_gradients(e.attention, e.feature, fq).alpha.cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("gradients reject foreign records") {
  MockTransformerEncoder a, b;
  const ImageEncoding e = a.encode_image(random_image(16, 16, 1));
  const FeatureVector fq = a.encode_text("x");
  CHECK_THROWS_AS(b.attention_gradients(e.attention, e.feature, fq), StateError);
  const ImageEncoding other = a.encode_image(random_image(16, 16, 2));
  CHECK_THROWS_AS(a.attention_gradients(e.attention, other.feature, fq), StateError);
}

TEST_CASE("query-aware scores need a gradient-capable backend") {
  testing::FunctionBackend fb;
  fb.image_fn = [](const Image&) { return testing::vec2(1, 0); };
  fb.text_fn = [](std::string_view) { return testing::vec2(0, 1); };
  const ImageEncoding e = fb.encode_image(random_image(4, 4, 1));
  CHECK_THROWS_AS(patch_scores(fb, e, testing::vec2(0, 1), TopDownMapKind::query_aware), CapabilityError);
  CHECK_NOTHROW(patch_scores(fb, e, testing::vec2(0, 1), TopDownMapKind::vanilla_visual));
}

TEST_CASE("oracle backend gradients are exact") {
  SyntheticWorldConfig cfg;
  const SyntheticCorpus corpus = generate_synthetic(cfg, 3);
  std::map<std::string, Scene> scenes;
  for (const auto& s : corpus.scenes) scenes.emplace(s.image_id, s);
  OracleEncoderConfig oc;
  oc.grid = 8;
  SceneOracleEncoder enc(scenes, oc);
  for (const auto& s : corpus.scenes) {
    const ImageEncoding e = enc.encode_image(render_scene(s));
    CHECK_NOTHROW(e.attention.validate());
    const auto r = testing::finite_difference_check(enc, e, enc.encode_text(s.query), 1e-5);
    CHECK(r.max_relative_error <= 1e-6);
  }
}

TEST_CASE("oracle backend rejects unknown images") {
  SceneOracleEncoder enc({});
  CHECK_THROWS_AS(enc.encode_image(random_image(8, 8, 1)), BackendError);
}
