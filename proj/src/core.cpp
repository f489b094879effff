#include "refground/core.hpp"

#include <algorithm>

namespace refground {

BoundingBox::BoundingBox(double x1, double y1, double x2, double y2)
    : x1_(x1), y1_(y1), x2_(x2), y2_(y2) {
  if (!std::isfinite(x1) || !std::isfinite(y1) || !std::isfinite(x2) || !std::isfinite(y2)) {
    throw DomainError("BoundingBox: non-finite coordinate");
  }
  if (!(x1 < x2) || !(y1 < y2)) {
    throw DomainError("BoundingBox: requires x1 < x2 and y1 < y2");
  }
}

std::optional<BoundingBox> BoundingBox::clipped(double width, double height) const {
  const double cx1 = std::max(x1_, 0.0);
  const double cy1 = std::max(y1_, 0.0);
  const double cx2 = std::min(x2_, width);
  const double cy2 = std::min(y2_, height);
  if (!(cx1 < cx2) || !(cy1 < cy2)) return std::nullopt;
  return BoundingBox(cx1, cy1, cx2, cy2);
}

double iou(const BoundingBox& a, const BoundingBox& b) {
  const double iw = std::max(0.0, std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1()));
  const double ih = std::max(0.0, std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1()));
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

BoundingBox union_box(std::span<const BoundingBox> boxes) {
  if (boxes.empty()) throw DomainError("union_box: empty list");
  double x1 = boxes.front().x1(), y1 = boxes.front().y1();
  double x2 = boxes.front().x2(), y2 = boxes.front().y2();
  for (const auto& b : boxes.subspan(1)) {
    x1 = std::min(x1, b.x1());
    y1 = std::min(y1, b.y1());
    x2 = std::max(x2, b.x2());
    y2 = std::max(y2, b.y2());
  }
  return {x1, y1, x2, y2};
}

std::string to_string(CandidateOrigin origin) {
  return origin == CandidateOrigin::proposal ? "proposal" : "top_down";
}

ScoredCandidate::ScoredCandidate(BoundingBox box, std::string class_name, double s_pq,
                                 double s_cq, CandidateOrigin origin)
    : box_(box),
      class_name_(std::move(class_name)),
      origin_(origin),
      s_pq_(s_pq),
      s_cq_(s_cq),
      s_bu_(s_pq + s_cq) {
  if (!(s_pq >= -1.0 && s_pq <= 1.0) || !(s_cq >= -1.0 && s_cq <= 1.0)) {
    throw DomainError("ScoredCandidate: similarity outside [-1,1]");
  }
}

void ScoredCandidate::set_s_td(double value) {
  if (!(value >= 0.0 && value <= 1.0)) throw DomainError("ScoredCandidate: s_td outside [0,1]");
  s_td_ = value;
}

void ScoredCandidate::set_s_kam(double value) {
  if (!(value > 0.0 && value < 1.0)) throw DomainError("ScoredCandidate: s_kam outside (0,1)");
  s_kam_ = value;
}

}  // namespace refground
