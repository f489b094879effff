#include "refground/mock_encoder.hpp"

#include <cmath>
#include <random>

namespace refground {

namespace {

using Eigen::MatrixXd;
using Eigen::RowVectorXd;
using Eigen::VectorXd;
using Tower = MockTransformerEncoder::Tower;
using Block = MockTransformerEncoder::Block;
using LayerNorm = MockTransformerEncoder::LayerNorm;

constexpr double kLnEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

class WeightSource {
 public:
  explicit WeightSource(std::uint64_t seed) : rng_(seed) {}

  MatrixXd gaussian(Eigen::Index rows, Eigen::Index cols, double scale) {
    MatrixXd m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = scale * normal_(rng_);
    }
    return m;
  }
  VectorXd gaussian(Eigen::Index n, double scale) { return gaussian(n, 1, scale).col(0); }

  LayerNorm layer_norm(Eigen::Index n) {
    return {VectorXd::Ones(n) + gaussian(n, 0.05), gaussian(n, 0.05)};
  }

 private:
  std::mt19937_64 rng_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

Block make_block(WeightSource& ws, int e, int f) {
  const double se = 1.0 / std::sqrt(static_cast<double>(e));
  const double sf = 1.0 / std::sqrt(static_cast<double>(f));
  Block b;
  b.ln1 = ws.layer_norm(e);
  b.wq = ws.gaussian(e, e, se);
  b.wk = ws.gaussian(e, e, se);
  b.wv = ws.gaussian(e, e, se);
  b.wo = ws.gaussian(e, e, se);
  b.bo = ws.gaussian(e, 0.02);
  b.ln2 = ws.layer_norm(e);
  b.w1 = ws.gaussian(f, e, se);
  b.b1 = ws.gaussian(f, 0.02);
  b.w2 = ws.gaussian(e, f, sf);
  b.b2 = ws.gaussian(e, 0.02);
  return b;
}

Tower make_tower(WeightSource& ws, const MockEncoderConfig& cfg, Eigen::Index input_rows,
                 Eigen::Index input_cols, double input_scale, int tokens) {
  Tower t;
  t.input_embed = ws.gaussian(input_rows, input_cols, input_scale);
  t.pos = ws.gaussian(tokens, cfg.embed_dim, 0.1);
  t.cls = ws.gaussian(cfg.embed_dim, 0.5);
  for (int i = 0; i < cfg.blocks; ++i) t.blocks.push_back(make_block(ws, cfg.embed_dim, cfg.ffn_dim));
  t.ln_final = ws.layer_norm(cfg.embed_dim);
  t.proj = ws.gaussian(cfg.feature_dim, cfg.embed_dim, 1.0 / std::sqrt(double(cfg.embed_dim)));
  return t;
}

struct LnCache {
  VectorXd xhat;
  double inv_std = 0.0;
};

VectorXd layer_norm(const VectorXd& x, const LayerNorm& ln, LnCache* cache = nullptr) {
  const double mu = x.mean();
  const VectorXd centered = x.array() - mu;
  const double var = centered.squaredNorm() / static_cast<double>(x.size());
  const double inv_std = 1.0 / std::sqrt(var + kLnEps);
  VectorXd xhat = centered * inv_std;
  VectorXd out = ln.gamma.cwiseProduct(xhat) + ln.beta;
  if (cache) *cache = {std::move(xhat), inv_std};
  return out;
}

VectorXd layer_norm_backward(const LnCache& c, const LayerNorm& ln, const VectorXd& dout) {
  const VectorXd dxhat = dout.cwiseProduct(ln.gamma);
  const double n = static_cast<double>(dxhat.size());
  const double mean_d = dxhat.sum() / n;
  const double mean_dx = dxhat.dot(c.xhat) / n;
  return c.inv_std * (dxhat.array() - mean_d - c.xhat.array() * mean_dx).matrix();
}

MatrixXd layer_norm_rows(const MatrixXd& x, const LayerNorm& ln) {
  MatrixXd out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) out.row(r) = layer_norm(x.row(r).transpose(), ln).transpose();
  return out;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x))); }

double gelu_grad(double x) {
  const double inner = kGeluC * (x + 0.044715 * x * x * x);
  const double t = std::tanh(inner);
  const double dinner = kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
}

MatrixXd feedforward(const MatrixXd& x, const Block& b) {
  MatrixXd h = (layer_norm_rows(x, b.ln2) * b.w1.transpose()).rowwise() + b.b1.transpose();
  h = h.unaryExpr([](double v) { return gelu(v); });
  return (h * b.w2.transpose()).rowwise() + b.b2.transpose();
}

struct AttentionOut {
  MatrixXd mixed;  // tokens x E, heads concatenated
  MatrixXd values;  // tokens x E
  MatrixXd cls_att;  // H x tokens
};

AttentionOut attend(const MatrixXd& y, const Block& b, int heads) {
  const Eigen::Index e = y.cols();
  const Eigen::Index d = e / heads;
  const MatrixXd q = y * b.wq.transpose();
  const MatrixXd k = y * b.wk.transpose();
  AttentionOut out{MatrixXd(y.rows(), e), y * b.wv.transpose(), MatrixXd(heads, y.rows())};
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  for (int h = 0; h < heads; ++h) {
    MatrixXd logits = q.middleCols(h * d, d) * k.middleCols(h * d, d).transpose() * scale;
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
      const double mx = logits.row(r).maxCoeff();
      logits.row(r) = (logits.row(r).array() - mx).exp();
      logits.row(r) /= logits.row(r).sum();
    }
    out.cls_att.row(h) = logits.row(0);
    out.mixed.middleCols(h * d, d) = logits * out.values.middleCols(h * d, d);
  }
  return out;
}

struct TowerRun {
  VectorXd feature;
  VectorXd cls_in;     // last block input, classification row
  MatrixXd values;     // last block values, tokens x E
  MatrixXd cls_att;    // last block, H x tokens
};

TowerRun run_tower(const Tower& t, MatrixXd x, int heads) {
  TowerRun run;
  for (std::size_t i = 0; i < t.blocks.size(); ++i) {
    const Block& b = t.blocks[i];
    const bool last = i + 1 == t.blocks.size();
    if (last) run.cls_in = x.row(0).transpose();
    AttentionOut a = attend(layer_norm_rows(x, b.ln1), b, heads);
    x += (a.mixed * b.wo.transpose()).rowwise() + b.bo.transpose();
    x += feedforward(x, b);
    if (last) {
      run.values = std::move(a.values);
      run.cls_att = std::move(a.cls_att);
    }
  }
  run.feature = t.proj * layer_norm(x.row(0).transpose(), t.ln_final);
  return run;
}

class MockTail final : public AttentionTail {
 public:
  VectorXd cls_in;
  MatrixXd values;
  MatrixXd cls_att;  // H x (U+1), column 0 is self-attention
  VectorXd feature;
};

// Intermediates of the classification-token tail needed for backprop.
struct TailPass {
  VectorXd y;
  LnCache ln2;
  VectorXd pre;  // w1 * ln2(y) + b1
  VectorXd f;
  LnCache ln_final;
  VectorXd feature;
};

TailPass tail_forward(const Tower& t, const MockTail& tail, const MatrixXd& cls_att, int heads) {
  const Block& b = t.blocks.back();
  const Eigen::Index e = tail.values.cols();
  const Eigen::Index d = e / heads;
  VectorXd z(e);
  for (int h = 0; h < heads; ++h) {
    z.segment(h * d, d) = tail.values.middleCols(h * d, d).transpose() * cls_att.row(h).transpose();
  }
  TailPass p;
  p.y = tail.cls_in + b.wo * z + b.bo;
  p.pre = b.w1 * layer_norm(p.y, b.ln2, &p.ln2) + b.b1;
  p.f = p.y + b.w2 * p.pre.unaryExpr([](double v) { return gelu(v); }) + b.b2;
  p.feature = t.proj * layer_norm(p.f, t.ln_final, &p.ln_final);
  return p;
}

const MockTail& checked_tail(const AttentionRecord& rec, std::uint64_t self) {
  if (rec.producer != self) throw StateError("attention record was produced by another backend");
  const auto* tail = dynamic_cast<const MockTail*>(rec.tail.get());
  if (!tail) throw StateError("attention record carries no mock activations");
  return *tail;
}

}  // namespace

void MockEncoderConfig::validate() const {
  if (grid_rows <= 0 || grid_cols <= 0) throw ConfigError("mock encoder: grid must be positive");
  if (embed_dim <= 0 || heads <= 0 || embed_dim % heads != 0) {
    throw ConfigError("mock encoder: embed_dim must be a positive multiple of heads");
  }
  if (blocks <= 0 || vocab_hash_size <= 0 || feature_dim <= 0 || patch_samples <= 0 ||
      max_text_tokens <= 0 || ffn_dim <= 0) {
    throw ConfigError("mock encoder: sizes must be positive");
  }
}

MockTransformerEncoder::MockTransformerEncoder(MockEncoderConfig cfg) : cfg_(cfg) {
  cfg_.validate();
  WeightSource ws(cfg_.seed);
  const int patch_in = 3 * cfg_.patch_samples * cfg_.patch_samples;
  image_ = make_tower(ws, cfg_, cfg_.embed_dim, patch_in, 1.0 / std::sqrt(double(patch_in)) * 2.0,
                      cfg_.grid_rows * cfg_.grid_cols + 1);
  text_ = make_tower(ws, cfg_, cfg_.vocab_hash_size, cfg_.embed_dim, 1.0, cfg_.max_text_tokens + 1);
}

Eigen::MatrixXd MockTransformerEncoder::patchify(const Image& image) const {
  if (image.empty()) throw DomainError("encode_image: empty image");
  const int s = cfg_.patch_samples;
  const int cells_y = cfg_.grid_rows * s;
  const int cells_x = cfg_.grid_cols * s;
  // Box-filter resample onto a cells_y x cells_x lattice.
  auto bounds = [](int k, int cells, int extent) {
    const int lo = static_cast<int>(static_cast<long long>(k) * extent / cells);
    const int hi = static_cast<int>(static_cast<long long>(k + 1) * extent / cells);
    return std::pair{lo, std::max(hi, lo + 1)};
  };
  MatrixXd patches(cfg_.grid_rows * cfg_.grid_cols, 3 * s * s);
  for (int cy = 0; cy < cells_y; ++cy) {
    const auto [y0, y1] = bounds(cy, cells_y, image.height);
    for (int cx = 0; cx < cells_x; ++cx) {
      const auto [x0, x1] = bounds(cx, cells_x, image.width);
      double sum[3] = {0, 0, 0};
      for (int y = y0; y < y1; ++y) {
        for (int x = x0; x < x1; ++x) {
          for (int c = 0; c < 3; ++c) sum[c] += image.at(y, x, c);
        }
      }
      const double n = static_cast<double>((y1 - y0) * (x1 - x0));
      const int patch = (cy / s) * cfg_.grid_cols + cx / s;
      const int cell = (cy % s) * s + cx % s;
      for (int c = 0; c < 3; ++c) patches(patch, cell * 3 + c) = sum[c] / n - 0.5;
    }
  }
  return patches;
}

ImageEncoding MockTransformerEncoder::encode_image(const Image& image) const {
  const MatrixXd patches = patchify(image);
  const Eigen::Index u = patches.rows();
  MatrixXd x(u + 1, cfg_.embed_dim);
  x.row(0) = image_.cls.transpose();
  x.bottomRows(u) = patches * image_.input_embed.transpose();
  x += image_.pos;

  TowerRun run = run_tower(image_, std::move(x), cfg_.heads);

  auto tail = std::make_shared<MockTail>();
  tail->cls_in = std::move(run.cls_in);
  tail->values = std::move(run.values);
  tail->cls_att = std::move(run.cls_att);
  tail->feature = run.feature;

  ImageEncoding enc;
  enc.feature = std::move(run.feature);
  enc.attention.att = tail->cls_att.rightCols(u);
  enc.attention.grid_rows = cfg_.grid_rows;
  enc.attention.grid_cols = cfg_.grid_cols;
  enc.attention.head_dim = cfg_.embed_dim / cfg_.heads;
  enc.attention.producer = instance_id();
  enc.attention.tail = std::move(tail);
  return enc;
}

FeatureVector MockTransformerEncoder::encode_text(std::string_view text) const {
  std::vector<std::string> tokens = tokenize(text);
  if (tokens.empty()) throw DomainError("encode_text: empty text");
  if (tokens.size() > static_cast<std::size_t>(cfg_.max_text_tokens)) tokens.resize(cfg_.max_text_tokens);
  const auto n = static_cast<Eigen::Index>(tokens.size());
  MatrixXd x(n + 1, cfg_.embed_dim);
  x.row(0) = text_.cls.transpose();
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto slot = static_cast<Eigen::Index>(fnv1a64(tokens[i]) % cfg_.vocab_hash_size);
    x.row(i + 1) = text_.input_embed.row(slot);
  }
  x += text_.pos.topRows(n + 1);
  return run_tower(text_, std::move(x), cfg_.heads).feature;
}

FeatureVector MockTransformerEncoder::tail_feature(const AttentionRecord& rec,
                                                   const Eigen::MatrixXd& att) const {
  const MockTail& tail = checked_tail(rec, instance_id());
  if (att.rows() != tail.cls_att.rows() || att.cols() + 1 != tail.cls_att.cols()) {
    throw DomainError("tail_feature: attention shape mismatch");
  }
  MatrixXd full = tail.cls_att;
  full.rightCols(att.cols()) = att;
  return tail_forward(image_, tail, full, cfg_.heads).feature;
}

AttentionGradients MockTransformerEncoder::attention_gradients(const AttentionRecord& rec,
                                                               const FeatureVector& fi,
                                                               const FeatureVector& fq) const {
  const MockTail& tail = checked_tail(rec, instance_id());
  if (fi.size() != tail.feature.size() || fi != tail.feature) {
    throw StateError("attention record does not belong to this image feature");
  }
  const Block& b = image_.blocks.back();
  const TailPass p = tail_forward(image_, tail, tail.cls_att, cfg_.heads);

  AttentionGradients out;
  out.s_iq = cosine_similarity(fi, fq);
  const double nf = p.feature.norm();
  const double s_tail = cosine_similarity(p.feature, fq);
  const VectorXd dfeature = fq / (nf * fq.norm()) - s_tail * p.feature / (nf * nf);

  const VectorXd df = layer_norm_backward(p.ln_final, image_.ln_final, image_.proj.transpose() * dfeature);
  const VectorXd dpre = (b.w2.transpose() * df).cwiseProduct(p.pre.unaryExpr([](double v) { return gelu_grad(v); }));
  const VectorXd dy = df + layer_norm_backward(p.ln2, b.ln2, b.w1.transpose() * dpre);
  const VectorXd dz = b.wo.transpose() * dy;

  const int heads = cfg_.heads;
  const Eigen::Index d = tail.values.cols() / heads;
  const Eigen::Index u = tail.cls_att.cols() - 1;
  out.alpha.resize(heads, u);
  for (int h = 0; h < heads; ++h) {
    out.alpha.row(h) = (tail.values.bottomRows(u).middleCols(h * d, d) * dz.segment(h * d, d)).transpose();
  }
  return out;
}

}  // namespace refground
