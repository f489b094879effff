#include "refground/qam.hpp"

#include <algorithm>
#include <cmath>
#include <queue>

namespace refground {

void QamConfig::validate() const {
  if (!(thr_a > 0.0 && thr_a < 1.0)) throw ConfigError("thr_a must lie in (0,1)");
}

namespace {

struct Interp {
  int lo, hi;
  double t;
};

Interp sample(int pixel, int extent, int cells) {
  const double pos = (pixel + 0.5) * cells / static_cast<double>(extent) - 0.5;
  const double clamped = std::clamp(pos, 0.0, static_cast<double>(cells - 1));
  const int lo = static_cast<int>(std::floor(clamped));
  const int hi = std::min(lo + 1, cells - 1);
  return {lo, hi, clamped - lo};
}

}  // namespace

QueryAwareMap upsample_normalize(const Eigen::VectorXd& patch_scores, int rows, int cols,
                                 int height, int width) {
  if (rows <= 0 || cols <= 0 || patch_scores.size() != static_cast<Eigen::Index>(rows) * cols) {
    throw DomainError("upsample_normalize: grid does not match score count");
  }
  if (height <= 0 || width <= 0) throw DomainError("upsample_normalize: empty image size");
  if (!patch_scores.allFinite()) throw DomainError("upsample_normalize: non-finite score");

  QueryAwareMap map;
  map.values.resize(height, width);
  if (patch_scores.maxCoeff() == patch_scores.minCoeff()) {
    map.values.setZero();
    map.degenerate = true;
    return map;
  }

  auto at = [&](int i, int j) { return patch_scores(static_cast<Eigen::Index>(i) * cols + j); };
  std::vector<Interp> xs(width);
  for (int x = 0; x < width; ++x) xs[x] = sample(x, width, cols);
  for (int y = 0; y < height; ++y) {
    const Interp sy = sample(y, height, rows);
    for (int x = 0; x < width; ++x) {
      const Interp& sx = xs[x];
      const double top = (1.0 - sx.t) * at(sy.lo, sx.lo) + sx.t * at(sy.lo, sx.hi);
      const double bottom = (1.0 - sx.t) * at(sy.hi, sx.lo) + sx.t * at(sy.hi, sx.hi);
      map.values(y, x) = (1.0 - sy.t) * top + sy.t * bottom;
    }
  }

  const double lo = map.values.minCoeff();
  const double hi = map.values.maxCoeff();
  if (!(hi > lo)) {
    map.values.setZero();
    map.degenerate = true;
    return map;
  }
  map.values = (map.values - lo) / (hi - lo);
  return map;
}

ExtractedBox extract_box(const QueryAwareMap& map, double thr_a) {
  const int h = map.height();
  const int w = map.width();
  const BoundingBox full(0.0, 0.0, static_cast<double>(w), static_cast<double>(h));
  if (map.degenerate) return {full, 0.0};

  std::vector<int> label(static_cast<std::size_t>(h) * w, -1);
  struct Component {
    double mass = 0.0;
    long count = 0;
    int x0, y0, x1, y1;
  };
  std::optional<Component> best;
  std::queue<std::pair<int, int>> frontier;
  int next_label = 0;

  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (map.values(y, x) < thr_a || label[y * w + x] >= 0) continue;
      Component c{0.0, 0, x, y, x, y};
      label[y * w + x] = next_label;
      frontier.emplace(y, x);
      while (!frontier.empty()) {
        const auto [cy, cx] = frontier.front();
        frontier.pop();
        c.mass += map.values(cy, cx);
        ++c.count;
        c.x0 = std::min(c.x0, cx);
        c.y0 = std::min(c.y0, cy);
        c.x1 = std::max(c.x1, cx);
        c.y1 = std::max(c.y1, cy);
        constexpr int dy[4] = {-1, 1, 0, 0};
        constexpr int dx[4] = {0, 0, -1, 1};
        for (int k = 0; k < 4; ++k) {
          const int ny = cy + dy[k];
          const int nx = cx + dx[k];
          if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
          if (label[ny * w + nx] >= 0 || map.values(ny, nx) < thr_a) continue;
          label[ny * w + nx] = next_label;
          frontier.emplace(ny, nx);
        }
      }
      ++next_label;
      // Components are discovered in raster order of their first pixel, so
      // keeping the incumbent on full ties implements the top-left rule.
      if (!best || c.mass > best->mass || (c.mass == best->mass && c.count > best->count)) {
        best = c;
      }
    }
  }
  if (!best) return {full, 0.0};
  return {BoundingBox(best->x0, best->y0, best->x1 + 1.0, best->y1 + 1.0), best->mass};
}

std::vector<std::uint8_t> to_grayscale(const QueryAwareMap& map) {
  std::vector<std::uint8_t> out(static_cast<std::size_t>(map.height()) * map.width());
  for (int y = 0; y < map.height(); ++y) {
    for (int x = 0; x < map.width(); ++x) {
      const double v = std::clamp(map.values(y, x), 0.0, 1.0);
      out[static_cast<std::size_t>(y) * map.width() + x] =
          static_cast<std::uint8_t>(std::floor(v * 255.0 + 0.5));
    }
  }
  return out;
}

Eigen::VectorXd patch_scores(const EncoderBackend& backend, const ImageEncoding& enc,
                             const FeatureVector& fq, TopDownMapKind kind, double* s_iq) {
  switch (kind) {
    case TopDownMapKind::vanilla_visual:
      if (s_iq) *s_iq = cosine_similarity(enc.feature, fq);
      return aggregate_heads(enc.attention.att.array());
    case TopDownMapKind::query_aware: {
      if (!backend.capabilities().supports_gradients) {
        throw CapabilityError("backend '" + backend.id() + "' cannot compute attention gradients");
      }
      const AttentionGradients g = backend.attention_gradients(enc.attention, enc.feature, fq);
      if (s_iq) *s_iq = g.s_iq;
      return aggregate_heads(weight_attention(enc.attention.att.array(), g.alpha.array()));
    }
    case TopDownMapKind::off:
      break;
  }
  throw DomainError("patch_scores: top-down map is disabled");
}

TopDownResult top_down(const EncoderBackend& backend, const ImageEncoding& enc,
                       const FeatureVector& fq, int image_height, int image_width,
                       TopDownMapKind kind, const QamConfig& cfg) {
  TopDownResult r{QueryAwareMap{}, {BoundingBox(0, 0, 1, 1), 0.0}, 0.0};
  const Eigen::VectorXd scores = patch_scores(backend, enc, fq, kind, &r.s_iq);
  r.map = upsample_normalize(scores, enc.attention.grid_rows, enc.attention.grid_cols,
                             image_height, image_width);
  r.map.threshold_applied = cfg.thr_a;
  r.extracted = extract_box(r.map, cfg.thr_a);
  return r;
}

}  // namespace refground
