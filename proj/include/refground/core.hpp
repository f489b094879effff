#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>

namespace refground {

/// Thrown when an operation's preconditions on its arguments do not hold.
class DomainError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Backend could not produce an encoding (missing weights, I/O, ...).
class BackendError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operation needs a backend capability that is not advertised.
class CapabilityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An object was used outside the state it was produced for.
class StateError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using FeatureVector = Eigen::VectorXd;

/// Axis-aligned box in image pixel coordinates, corner form.
///
/// Construction validates x1 < x2, y1 < y2 and finiteness, so every
/// BoundingBox in the program has positive area.
class BoundingBox {
 public:
  BoundingBox(double x1, double y1, double x2, double y2);

  double x1() const { return x1_; }
  double y1() const { return y1_; }
  double x2() const { return x2_; }
  double y2() const { return y2_; }
  double width() const { return x2_ - x1_; }
  double height() const { return y2_ - y1_; }
  double area() const { return width() * height(); }

  bool contains(const BoundingBox& other) const {
    return x1_ <= other.x1_ && y1_ <= other.y1_ && x2_ >= other.x2_ && y2_ >= other.y2_;
  }

  /// Intersection with [0,width]x[0,height]; nullopt when nothing remains.
  std::optional<BoundingBox> clipped(double width, double height) const;

  bool operator==(const BoundingBox&) const = default;

 private:
  double x1_, y1_, x2_, y2_;
};

/// Cosine of the angle between two equal-length, nonzero vectors.
template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar cosine_similarity(const Eigen::MatrixBase<DerivedA>& u,
                                            const Eigen::MatrixBase<DerivedB>& v) {
  using Scalar = typename DerivedA::Scalar;
  if (u.size() != v.size()) {
    throw DomainError("cosine_similarity: dimension mismatch");
  }
  const Scalar nu = u.norm();
  const Scalar nv = v.norm();
  if (!(nu > Scalar(0)) || !(nv > Scalar(0))) {
    throw DomainError("cosine_similarity: zero-norm vector");
  }
  // Rounding can push |cos| a few ulps past 1.
  const Scalar c = u.dot(v) / (nu * nv);
  return std::clamp(c, Scalar(-1), Scalar(1));
}

double iou(const BoundingBox& a, const BoundingBox& b);

/// Smallest box containing every input.
BoundingBox union_box(std::span<const BoundingBox> boxes);

enum class CandidateOrigin { proposal, top_down };

std::string to_string(CandidateOrigin origin);

/// A box plus every score the pipeline attaches to it.
///
/// s_bu is derived from s_pq and s_cq at construction and has no setter.
class ScoredCandidate {
 public:
  ScoredCandidate(BoundingBox box, std::string class_name, double s_pq, double s_cq,
                  CandidateOrigin origin);

  const BoundingBox& box() const { return box_; }
  const std::string& class_name() const { return class_name_; }
  CandidateOrigin origin() const { return origin_; }
  double s_pq() const { return s_pq_; }
  double s_cq() const { return s_cq_; }
  double s_bu() const { return s_bu_; }
  double s_td() const { return s_td_; }
  std::optional<double> s_kam() const { return s_kam_; }
  double fused() const { return fused_; }

  void set_s_td(double value);
  void set_s_kam(double value);
  void set_fused(double value) { fused_ = value; }

 private:
  BoundingBox box_;
  std::string class_name_;
  CandidateOrigin origin_;
  double s_pq_;
  double s_cq_;
  double s_bu_;
  double s_td_ = 0.0;
  std::optional<double> s_kam_;
  double fused_ = 0.0;
};

}  // namespace refground
