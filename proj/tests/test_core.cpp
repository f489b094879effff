#include "support.hpp"

#include "refground/core.hpp"
#include "refground/image.hpp"
#include "refground/tensor_store.hpp"

#include <bit>
#include <cmath>
#include <vector>

using namespace refground;
using testing::TempDir;

namespace {

// Sum of products and square roots, written out without Eigen.
double cosine_oracle(const std::vector<double>& u, const std::vector<double>& v) {
  double dot = 0, nu = 0, nv = 0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += u[i] * v[i];
    nu += u[i] * u[i];
    nv += v[i] * v[i];
  }
  return dot / (std::sqrt(nu) * std::sqrt(nv));
}

// Counts unit cells of the integer grid inside each box (integer corners only).
double iou_raster(const BoundingBox& a, const BoundingBox& b) {
  int inter = 0, uni = 0;
  const int lo = static_cast<int>(std::min(a.x1(), b.x1())) - 1;
  const int hi = static_cast<int>(std::max(a.x2(), b.x2())) + 1;
  const int lo_y = static_cast<int>(std::min(a.y1(), b.y1())) - 1;
  const int hi_y = static_cast<int>(std::max(a.y2(), b.y2())) + 1;
  for (int y = lo_y; y < hi_y; ++y) {
    for (int x = lo; x < hi; ++x) {
      const double cx = x + 0.5, cy = y + 0.5;
      const bool in_a = cx > a.x1() && cx < a.x2() && cy > a.y1() && cy < a.y2();
      const bool in_b = cx > b.x1() && cx < b.x2() && cy > b.y1() && cy < b.y2();
      inter += in_a && in_b;
      uni += in_a || in_b;
    }
  }
  return static_cast<double>(inter) / uni;
}

Eigen::VectorXd v(std::initializer_list<double> xs) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) out(i++) = x;
  return out;
}

}  // namespace

TEST_CASE("cosine similarity examples") {
  CHECK(cosine_similarity(v({3, 4}), v({3, 4})) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(cosine_similarity(v({1, 0}), v({0, 1})) == 0.0);
  const double expected = cosine_oracle({1, 2, 2}, {2, 1, 2});
  CHECK(std::abs(expected - 8.0 / 9.0) < 1e-15);
  CHECK(std::abs(cosine_similarity(v({1, 2, 2}), v({2, 1, 2})) - expected) < 1e-9);
}

TEST_CASE("cosine similarity errors") {
  CHECK_THROWS_AS(cosine_similarity(v({0, 0}), v({1, 0})), DomainError);
  CHECK_THROWS_AS(cosine_similarity(v({1, 0}), v({1, 0, 0})), DomainError);
}

TEST_CASE("cosine similarity is symmetric and scale invariant") {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> n(0, 1);
  std::uniform_real_distribution<double> scale(1e-3, 1e3);
  for (int t = 0; t < 200; ++t) {
    Eigen::VectorXd a(16), b(16);
    for (int i = 0; i < 16; ++i) {
      a(i) = n(rng);
      b(i) = n(rng);
    }
    const double c = cosine_similarity(a, b);
    CHECK(c == cosine_similarity(b, a));
    CHECK(std::abs(cosine_similarity(Eigen::VectorXd(scale(rng) * a), b) - c) < 1e-9);
    CHECK(c >= -1.0);
    CHECK(c <= 1.0);
  }
}

TEST_CASE("bounding box validation") {
  CHECK_THROWS_AS(BoundingBox(0, 0, 0, 1), DomainError);
  CHECK_THROWS_AS(BoundingBox(0, 2, 1, 1), DomainError);
  CHECK_THROWS_AS(BoundingBox(0, 0, INFINITY, 1), DomainError);
  CHECK_THROWS_AS(BoundingBox(NAN, 0, 1, 1), DomainError);
  const BoundingBox b(1, 2, 4, 6);
  CHECK(b.area() == 12.0);
  CHECK(b.clipped(3, 3) == BoundingBox(1, 2, 3, 3));
  CHECK_FALSE(b.clipped(1, 10).has_value());
}

TEST_CASE("iou examples") {
  CHECK(iou({0, 0, 10, 10}, {0, 0, 10, 10}) == 1.0);
  CHECK(iou({0, 0, 1, 1}, {5, 5, 6, 6}) == 0.0);
  const double oracle = iou_raster({0, 0, 10, 10}, {5, 5, 15, 15});
  CHECK(std::abs(oracle - 1.0 / 7.0) < 1e-15);
  CHECK(std::abs(iou({0, 0, 10, 10}, {5, 5, 15, 15}) - oracle) < 1e-12);
}

TEST_CASE("iou agrees with rasterization on random integer boxes") {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> c(0, 20);
  for (int t = 0; t < 300; ++t) {
    auto box = [&] {
      int x1 = c(rng), x2 = c(rng), y1 = c(rng), y2 = c(rng);
      if (x1 == x2) ++x2;
      if (y1 == y2) ++y2;
      return BoundingBox(std::min(x1, x2), std::min(y1, y2), std::max(x1, x2), std::max(y1, y2));
    };
    const BoundingBox a = box(), b = box();
    const double value = iou(a, b);
    CHECK(std::abs(value - iou_raster(a, b)) < 1e-12);
    CHECK(value == iou(b, a));
    CHECK(iou(a, a) == 1.0);
    CHECK(value >= 0.0);
    CHECK(value <= 1.0);
  }
}

TEST_CASE("union box examples") {
  const std::vector<BoundingBox> one = {{0, 0, 2, 2}};
  CHECK(union_box(one) == BoundingBox(0, 0, 2, 2));
  const std::vector<BoundingBox> two = {{0, 0, 2, 2}, {1, 1, 5, 3}};
  double x1 = 1e9, y1 = 1e9, x2 = -1e9, y2 = -1e9;
  for (const auto& b : two) {
    x1 = std::min(x1, b.x1());
    y1 = std::min(y1, b.y1());
    x2 = std::max(x2, b.x2());
    y2 = std::max(y2, b.y2());
  }
  CHECK(union_box(two) == BoundingBox(x1, y1, x2, y2));
  CHECK(union_box(two) == BoundingBox(0, 0, 5, 3));
  const std::vector<BoundingBox> dup = {{0, 0, 1, 1}, {0, 0, 1, 1}};
  CHECK(union_box(dup) == BoundingBox(0, 0, 1, 1));
  CHECK_THROWS_AS(union_box(std::vector<BoundingBox>{}), DomainError);
}

TEST_CASE("union box is the minimal container") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0, 50);
  for (int t = 0; t < 100; ++t) {
    std::vector<BoundingBox> boxes;
    for (int k = 0; k < 4; ++k) {
      const double x = u(rng), y = u(rng);
      boxes.emplace_back(x, y, x + 1 + u(rng), y + 1 + u(rng));
    }
    const BoundingBox un = union_box(boxes);
    for (const auto& b : boxes) CHECK(un.contains(b));
    auto contains_all = [&](const BoundingBox& c) {
      return std::all_of(boxes.begin(), boxes.end(), [&](const BoundingBox& b) { return c.contains(b); });
    };
    CHECK_FALSE(contains_all({un.x1() + 1e-6, un.y1(), un.x2(), un.y2()}));
    CHECK_FALSE(contains_all({un.x1(), un.y1() + 1e-6, un.x2(), un.y2()}));
    CHECK_FALSE(contains_all({un.x1(), un.y1(), un.x2() - 1e-6, un.y2()}));
    CHECK_FALSE(contains_all({un.x1(), un.y1(), un.x2(), un.y2() - 1e-6}));
  }
}

TEST_CASE("scored candidate ledger") {
  ScoredCandidate c({0, 0, 1, 1}, "dog", 0.6, 0.3, CandidateOrigin::proposal);
  CHECK(c.s_bu() == 0.6 + 0.3);
  CHECK_FALSE(c.s_kam().has_value());
  CHECK_THROWS_AS(ScoredCandidate({0, 0, 1, 1}, "dog", 1.5, 0.0, CandidateOrigin::proposal), DomainError);
  CHECK_THROWS_AS(c.set_s_td(1.1), DomainError);
  CHECK_THROWS_AS(c.set_s_kam(1.0), DomainError);
  CHECK_THROWS_AS(c.set_s_kam(0.0), DomainError);
  c.set_s_kam(0.25);
  CHECK(*c.s_kam() == 0.25);
}

TEST_CASE("covered pixels use the center-in-box rule") {
  // x1 <= x + 0.5 < x2
  const PixelRect r = covered_pixels({0.5, 0.2, 2.5, 1.6}, 10, 10);
  CHECK(r.x_begin == 0);
  CHECK(r.x_end == 2);
  CHECK(r.y_begin == 0);
  CHECK(r.y_end == 2);
  CHECK(covered_pixels({0.6, 0, 1.4, 1}, 10, 10).empty());
  for (double x1 : {0.0, 0.3, 0.5, 0.51, 1.7}) {
    for (double x2 : {2.0, 2.5, 2.51, 3.9}) {
      const PixelRect p = covered_pixels({x1, 0, x2, 1}, 10, 10);
      int count = 0;
      for (int x = 0; x < 10; ++x) count += x1 <= x + 0.5 && x + 0.5 < x2;
      CHECK(p.x_end - p.x_begin == count);
    }
  }
}

TEST_CASE("crop keeps provenance") {
  Image img = testing::random_image(10, 12, 1);
  img.origin_x = 3;
  const auto c = crop(img, {2, 1, 6, 4});
  REQUIRE(c);
  CHECK(c->width == 4);
  CHECK(c->height == 3);
  CHECK(c->origin_x == 5);
  CHECK(c->origin_y == 1);
  CHECK(c->source_id == img.source_id);
  CHECK(c->at(0, 0, 1) == img.at(1, 2, 1));
  CHECK_FALSE(crop(img, {20, 20, 30, 30}).has_value());
}

TEST_CASE("ppm round trip at byte precision") {
  TempDir dir("ppm");
  Image img(5, 7);
  for (std::size_t i = 0; i < img.rgb.size(); ++i) img.rgb[i] = static_cast<float>(i % 256) / 255.0f;
  write_ppm(dir.path / "a.ppm", img);
  const Image back = read_ppm(dir.path / "a.ppm", "a");
  CHECK(back.width == 7);
  CHECK(back.height == 5);
  CHECK(back.source_id == "a");
  CHECK(back.rgb == img.rgb);
}

TEST_CASE("tensor store round trip is bit exact") {
  TempDir dir("tensor");
  TensorStore store;
  store.metadata["backend"] = "mock";
  store.metadata["feature_dim"] = "512";
  Tensor t{"odd", {2, 3}, {1.0f, -0.0f, std::nextafter(1.0f, 2.0f), 1e-38f, 3.14159f, -7.5e20f}};
  store.add(t);
  Eigen::MatrixXd m = Eigen::MatrixXd::Random(4, 5);
  store.add_matrix("m", m);
  store.save(dir.path / "cache");
  const TensorStore back = TensorStore::load(dir.path / "cache");
  CHECK(back.metadata == store.metadata);
  const Tensor& b = back.get("odd");
  CHECK(b.shape == t.shape);
  for (std::size_t i = 0; i < t.data.size(); ++i) {
    CHECK(std::bit_cast<std::uint32_t>(b.data[i]) == std::bit_cast<std::uint32_t>(t.data[i]));
  }
  CHECK(back.matrix("m") == m.cast<float>().cast<double>());
  CHECK_THROWS(back.get("missing"));
}
