#include "support.hpp"

#include "refground/kam.hpp"
#include "refground/mock_encoder.hpp"

#include <cmath>
#include <map>

using namespace refground;
using testing::FunctionBackend;
using testing::TempDir;

namespace {

Eigen::MatrixXf random_rows(int rows, int cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n(0.0f, 1.0f);
  Eigen::MatrixXf m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = n(rng);
  return m;
}

std::vector<KamExample> random_examples(int count, int rows, int cols, std::uint64_t seed) {
  std::vector<KamExample> out;
  for (int i = 0; i < count; ++i) {
    KamExample ex;
    ex.image_id = "img" + std::to_string(i);
    ex.inputs = random_rows(rows, cols, seed + i);
    ex.positive = i % rows;
    // Make the positive row recognizable.
    ex.inputs.row(ex.positive).head(2).setConstant(3.0f);
    out.push_back(std::move(ex));
  }
  return out;
}

double logsumexp_loss(const Eigen::VectorXd& logits, int positive) {
  double m = logits.maxCoeff(), s = 0;
  for (Eigen::Index i = 0; i < logits.size(); ++i) s += std::exp(logits(i) - m);
  return m + std::log(s) - logits(positive);
}

}  // namespace

TEST_CASE("scores lie strictly inside (0,1)") {
  const KamModel model(16, 8, 1);
  const Eigen::VectorXd s = kam_forward_batch(model, random_rows(200, 16, 2) * 50.0f);
  CHECK(s.minCoeff() > 0.0);
  CHECK(s.maxCoeff() < 1.0);
}

TEST_CASE("zero input with zero biases gives one half") {
  const KamModel model(8, 4, 3);
  const FeatureVector z = FeatureVector::Zero(2);
  CHECK(kam_forward(model, z, z, z, z) == doctest::Approx(0.5).epsilon(1e-7));
  KamModel biased = model;
  biased.fc3.b(0) = 1.5f;
  CHECK(kam_forward(biased, z, z, z, z) == doctest::Approx(1.0 / (1.0 + std::exp(-1.5))).epsilon(1e-6));
}

TEST_CASE("batched and single forward agree") {
  const KamModel model(32, 16, 4);
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0, 1);
  Eigen::MatrixXf rows(10, 32);
  std::vector<double> single;
  for (int r = 0; r < 10; ++r) {
    FeatureVector f[4];
    for (auto& v : f) {
      v.resize(8);
      for (int k = 0; k < 8; ++k) v(k) = n(rng);
    }
    rows.row(r) = kam_input(f[0], f[1], f[2], f[3]);
    single.push_back(kam_forward(model, f[0], f[1], f[2], f[3]));
  }
  const Eigen::VectorXd batch = kam_forward_batch(model, rows);
  for (int r = 0; r < 10; ++r) CHECK(std::abs(batch(r) - single[r]) < 1e-6);
  CHECK_THROWS_AS(kam_input(FeatureVector::Zero(3), FeatureVector::Zero(2), FeatureVector::Zero(2),
                            FeatureVector::Zero(2)),
                  DomainError);
}

TEST_CASE("network gradients match finite differences") {
  using Mlp = BatchNormMlp<double>;
  Mlp net(6, 5, 7);
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n(0, 1);
  for (auto* bn : {&net.bn1, &net.bn2}) {
    for (Eigen::Index i = 0; i < bn->gamma.size(); ++i) {
      bn->gamma(i) = 1 + 0.3 * n(rng);
      bn->beta(i) = 0.3 * n(rng);
    }
  }
  Mlp::Matrix x(7, 6);
  for (Eigen::Index i = 0; i < x.size(); ++i) x(i) = n(rng);
  Mlp::Vector w(7);
  for (Eigen::Index i = 0; i < w.size(); ++i) w(i) = n(rng);

  auto loss = [&](Mlp& m) {
    Mlp::Cache c;
    return w.dot(m.train_forward(x, c, false));
  };
  Mlp::Cache cache;
  const Mlp::Vector logits = net.train_forward(x, cache, false);
  (void)logits;
  const Mlp::Gradients g = net.backward(cache, w);

  const double h = 1e-6;
  double worst = 0;
  auto probe = [&](double& param, double analytic) {
    const double keep = param;
    param = keep + h;
    const double up = loss(net);
    param = keep - h;
    const double down = loss(net);
    param = keep;
    const double fd = (up - down) / (2 * h);
    worst = std::max(worst, std::abs(fd - analytic) / std::max(1.0, std::max(std::abs(fd), std::abs(analytic))));
  };
  for (int r = 0; r < 5; ++r) {
    for (int c = 0; c < 6; ++c) probe(net.fc1.w(r, c), g.fc1.w(r, c));
    for (int c = 0; c < 5; ++c) probe(net.fc2.w(r, c), g.fc2.w(r, c));
    // Biases feeding batch normalization cancel out.
    CHECK(std::abs(g.fc1.b(r)) < 1e-12);
    CHECK(std::abs(g.fc2.b(r)) < 1e-12);
    probe(net.fc3.w(0, r), g.fc3.w(0, r));
    probe(net.bn1.gamma(r), g.bn1_gamma(r));
    probe(net.bn1.beta(r), g.bn1_beta(r));
    probe(net.bn2.gamma(r), g.bn2_gamma(r));
    probe(net.bn2.beta(r), g.bn2_beta(r));
  }
  probe(net.fc3.b(0), g.fc3.b(0));
  CHECK(worst < 1e-7);
}

TEST_CASE("per-image loss is the softmax cross-entropy of the logits") {
  const KamModel model(12, 6, 9);
  const auto ex = random_examples(1, 5, 12, 10)[0];
  const Eigen::VectorXd logits = model.logits(ex.inputs).cast<double>();
  CHECK(kam_loss(model, ex) == doctest::Approx(logsumexp_loss(logits, ex.positive)).epsilon(1e-5));
}

TEST_CASE("training drives the positive to the top on a single image") {
  auto examples = random_examples(1, 4, 12, 11);
  KamTrainConfig cfg;
  cfg.epochs = 300;
  cfg.learning_rate = 1e-2;
  cfg.hidden_dim = 16;
  const KamTrainResult r = train_kam(examples, cfg);
  Eigen::Index best = 0;
  kam_forward_batch(r.model, examples[0].inputs).maxCoeff(&best);
  CHECK(best == examples[0].positive);
  CHECK(r.loss_trace.back() < r.loss_trace.front());
  for (double l : r.loss_trace) CHECK(std::isfinite(l));
}

TEST_CASE("training is deterministic for a fixed seed") {
  auto examples = random_examples(12, 5, 16, 12);
  KamTrainConfig cfg;
  cfg.epochs = 5;
  cfg.batch_size = 4;
  cfg.hidden_dim = 8;
  cfg.learning_rate = 1e-3;
  const KamTrainResult a = train_kam(examples, cfg);
  const KamTrainResult b = train_kam(examples, cfg);
  CHECK(a.loss_trace == b.loss_trace);
  CHECK(a.model.fc1.w == b.model.fc1.w);
  CHECK(a.train_images + a.validation_images == 12);
  cfg.seed = 1;
  CHECK(train_kam(examples, cfg).model.fc1.w != a.model.fc1.w);
}

TEST_CASE("training on nothing is an error") {
  CHECK_THROWS_AS(train_kam({}, KamTrainConfig{}), TrainingError);
  KamTrainConfig bad;
  bad.thr_k = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("checkpoints round-trip bit-exactly") {
  TempDir dir("kam");
  auto examples = random_examples(3, 4, 12, 13);
  KamTrainConfig cfg;
  cfg.epochs = 3;
  cfg.hidden_dim = 8;
  const KamModel model = train_kam(examples, cfg).model;
  save_kam(model, dir.path / "kam", {{"backend", "mock"}});
  const KamModel back = load_kam(dir.path / "kam");
  CHECK(back.fc1.w == model.fc1.w);
  CHECK(back.fc3.b == model.fc3.b);
  CHECK(back.bn2.running_var == model.bn2.running_var);
  const Eigen::MatrixXf x = random_rows(6, 12, 14);
  CHECK(kam_forward_batch(back, x) == kam_forward_batch(model, x));
  CHECK_THROWS(load_kam(dir.path / "missing"));
}

TEST_CASE("pseudo pairing picks the closest query per image") {
  FunctionBackend b;
  const std::map<std::string, FeatureVector> text = {
      {"left", testing::vec2(1, 0)}, {"up", testing::vec2(0, 1)}, {"diag", testing::vec2(1, 1)}};
  b.text_fn = [&](std::string_view t) { return text.at(std::string(t)); };
  const std::map<std::string, FeatureVector> images = {
      {"a", testing::vec2(1, 0.1)}, {"b", testing::vec2(0.1, 1)}, {"c", testing::vec2(1, 0.9)}};
  const std::vector<std::string> pool = {"left", "up", "diag"};
  const auto pairs = pseudo_pair(images, pool, b);
  REQUIRE(pairs.size() == 3);
  CHECK(pairs[0].query == "left");
  CHECK(pairs[1].query == "up");
  CHECK(pairs[2].query == "diag");
  for (const auto& p : pairs) {
    double best = -2;
    for (const auto& q : pool) best = std::max(best, cosine_similarity(images.at(p.image_id), text.at(q)));
    CHECK(p.pair_score == best);
  }
  const std::vector<std::string> rotated = {"diag", "up", "left"};
  const auto again = pseudo_pair(images, rotated, b);
  for (std::size_t i = 0; i < 3; ++i) CHECK(again[i].query == pairs[i].query);

  const std::vector<std::string> twins = {"left", "left"};
  CHECK(pseudo_pair(images, twins, b)[1].query == "left");
}

TEST_CASE("mining threshold") {
  CHECK(mining_score(0.9, 0.5) == doctest::Approx(0.45));
  std::vector<PseudoPair> pairs;
  std::map<std::string, double> norm;
  std::mt19937_64 rng(15);
  std::uniform_real_distribution<double> u(0, 1);
  for (int i = 0; i < 100; ++i) {
    const std::string id = "im" + std::to_string(1000 + i);
    pairs.push_back({id, "q", u(rng)});
    norm[id] = u(rng);
  }
  pairs.push_back({"edge", "q", 1.0});
  norm["edge"] = 0.5;
  const MiningGrounder ground = [&](const PseudoPair& p) {
    if (p.image_id == "im1003") throw BackendError("unreadable");
    return MiningOutcome{BoundingBox(0, 0, 1, 1), norm.at(p.image_id)};
  };
  std::size_t previous = pairs.size() + 1;
  for (double thr : {0.1, 0.3, 0.5, 0.7, 0.9}) {
    const MiningReport r = mine_pseudo_labels(pairs, ground, thr, 3);
    CHECK(r.labels.size() <= previous);
    previous = r.labels.size();
    CHECK(r.skipped.size() == 1);
    std::size_t expected = 0;
    for (const auto& p : pairs) {
      if (p.image_id != "im1003" && p.pair_score * norm.at(p.image_id) > thr) ++expected;
    }
    CHECK(r.labels.size() == expected);
    for (std::size_t i = 1; i < r.labels.size(); ++i) CHECK(r.labels[i - 1].image_id <= r.labels[i].image_id);
    bool has_edge = false;
    for (const auto& l : r.labels) has_edge |= l.image_id == "edge";
    CHECK(has_edge == (thr < 0.5));
  }
  CHECK_THROWS_AS(mine_pseudo_labels(pairs, ground, 1.0), DomainError);
}

TEST_CASE("positive proposal needs IoU of at least one half") {
  const std::vector<Proposal> ps = {{{0, 0, 10, 10}, "a", {}}, {{0, 0, 10, 5}, "b", {}}, {{0, 0, 10, 5}, "c", {}}};
  CHECK(positive_proposal(ps, {0, 0, 10, 10}) == 0u);
  CHECK(positive_proposal(ps, {0, 0, 10, 4}) == 1u);
  CHECK_FALSE(positive_proposal(ps, {20, 20, 30, 30}).has_value());
}

TEST_CASE("examples built from labels") {
  MockTransformerEncoder enc;
  std::map<std::string, std::vector<Proposal>> props;
  props["x"] = {{{0, 0, 8, 8}, "cat", {}}, {{8, 8, 16, 16}, "dog", {}}};
  props["y"] = {{{0, 0, 4, 4}, "cat", {}}};
  const ImageProvider images = [](const std::string& id) {
    Image img = testing::random_image(16, 16, id == "x" ? 1 : 2);
    img.source_id = id;
    return img;
  };
  const std::vector<PseudoLabel> labels = {{"x", "a dog", {8, 8, 15, 16}, 0.95}, {"y", "a cat", {10, 10, 16, 16}, 0.95}};
  const ExampleBuild built = build_kam_examples(labels, props, images, enc);
  REQUIRE(built.examples.size() == 1);
  CHECK(built.examples[0].positive == 1);
  CHECK(built.examples[0].inputs.rows() == 2);
  CHECK(built.examples[0].inputs.cols() == 4 * enc.feature_dim());
  CHECK(built.unusable.size() == 1);
}
