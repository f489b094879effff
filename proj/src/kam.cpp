#include "refground/kam.hpp"

#include "refground/pipeline.hpp"
#include "refground/tensor_store.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

namespace refground {

void KamTrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(thr_k > 0.0 && thr_k < 1.0)) throw ConfigError("thr_k must lie in (0,1)");
  if (hidden_dim < 1) throw ConfigError("hidden_dim must be >= 1");
}

Eigen::RowVectorXf kam_input(const FeatureVector& fi, const FeatureVector& fp,
                             const FeatureVector& fc, const FeatureVector& fq) {
  const Eigen::Index d = fi.size();
  if (fp.size() != d || fc.size() != d || fq.size() != d) {
    throw DomainError("kam_input: feature dimension mismatch");
  }
  Eigen::RowVectorXf row(4 * d);
  row << fi.transpose().cast<float>(), fp.transpose().cast<float>(), fc.transpose().cast<float>(),
      fq.transpose().cast<float>();
  return row;
}

double kam_forward(const KamModel& model, const FeatureVector& fi, const FeatureVector& fp,
                   const FeatureVector& fc, const FeatureVector& fq) {
  if (4 * fi.size() != model.input_dim()) throw DomainError("kam_forward: feature dimension mismatch");
  return kam_forward_batch(model, kam_input(fi, fp, fc, fq))(0);
}

Eigen::VectorXd kam_forward_batch(const KamModel& model, const Eigen::MatrixXf& inputs) {
  return model.scores(inputs).cast<double>();
}

std::vector<PseudoPair> pseudo_pair(const std::map<std::string, FeatureVector>& image_features,
                                    std::span<const std::string> query_pool,
                                    const EncoderBackend& backend) {
  if (image_features.empty() || query_pool.empty()) throw DomainError("pseudo_pair: empty input");
  std::vector<FeatureVector> query_features;
  query_features.reserve(query_pool.size());
  for (const auto& q : query_pool) query_features.push_back(backend.encode_text(q));

  std::vector<PseudoPair> pairs;
  for (const auto& [image_id, fi] : image_features) {
    std::size_t best = 0;
    double best_score = cosine_similarity(fi, query_features[0]);
    for (std::size_t j = 1; j < query_features.size(); ++j) {
      const double s = cosine_similarity(fi, query_features[j]);
      if (s > best_score) {
        best = j;
        best_score = s;
      }
    }
    pairs.push_back({image_id, query_pool[best], best_score});
  }
  return pairs;
}

double mining_score(double pair_score, double normalized_fused) { return pair_score * normalized_fused; }

MiningReport mine_pseudo_labels(std::span<const PseudoPair> pairs, const MiningGrounder& ground,
                                double thr_k, int threads) {
  if (!(thr_k > 0.0 && thr_k < 1.0)) throw DomainError("mine_pseudo_labels: thr_k must lie in (0,1)");
  struct Attempt {
    std::optional<PseudoLabel> label;
    std::optional<std::string> error;
  };
  const auto attempts = parallel_map(pairs.size(), threads, [&](std::size_t i) {
    const PseudoPair& pair = pairs[i];
    Attempt a;
    try {
      const MiningOutcome out = ground(pair);
      const double score = mining_score(pair.pair_score, out.normalized_fused);
      if (score > thr_k) a.label = PseudoLabel{pair.image_id, pair.query, out.box, score};
    } catch (const std::exception& e) {
      a.error = pair.image_id + ": " + e.what();
    }
    return a;
  });
  MiningReport report;
  for (const auto& a : attempts) {
    if (a.label) report.labels.push_back(*a.label);
    if (a.error) report.skipped.push_back(*a.error);
  }
  std::stable_sort(report.labels.begin(), report.labels.end(),
                   [](const PseudoLabel& a, const PseudoLabel& b) { return a.image_id < b.image_id; });
  return report;
}

std::optional<std::size_t> positive_proposal(std::span<const Proposal> proposals, const BoundingBox& box) {
  std::optional<std::size_t> best;
  double best_iou = 0.5;
  for (std::size_t i = 0; i < proposals.size(); ++i) {
    const double v = iou(proposals[i].box, box);
    if (v > best_iou || (!best && v >= best_iou)) {
      best = i;
      best_iou = v;
    }
  }
  return best;
}

ExampleBuild build_kam_examples(std::span<const PseudoLabel> labels,
                                const std::map<std::string, std::vector<Proposal>>& proposals,
                                const ImageProvider& images, const EncoderBackend& backend) {
  ExampleBuild out;
  std::map<std::string, FeatureVector> name_cache;
  for (const PseudoLabel& label : labels) {
    const auto it = proposals.find(label.image_id);
    if (it == proposals.end() || it->second.empty()) {
      out.unusable.push_back(label.image_id + ": no proposals");
      continue;
    }
    const Image image = images(label.image_id);
    std::vector<Proposal> usable;
    for (const auto& p : it->second) {
      if (auto c = p.box.clipped(image.width, image.height); c && !covered_pixels(*c, image.width, image.height).empty()) {
        usable.push_back({*c, p.class_name, p.detector_score});
      }
    }
    const std::optional<std::size_t> pos = positive_proposal(usable, label.box);
    if (!pos) {
      out.unusable.push_back(label.image_id + ": no proposal with IoU >= 0.5");
      continue;
    }
    const FeatureVector fi = backend.encode_image_feature(image);
    const FeatureVector fq = backend.encode_text(label.query);
    KamExample ex{label.image_id, Eigen::MatrixXf(static_cast<Eigen::Index>(usable.size()), 4 * fi.size()),
                  static_cast<int>(*pos)};
    for (std::size_t r = 0; r < usable.size(); ++r) {
      auto nit = name_cache.find(usable[r].class_name);
      if (nit == name_cache.end()) {
        nit = name_cache.emplace(usable[r].class_name, backend.encode_text(usable[r].class_name)).first;
      }
      const FeatureVector fp = backend.encode_image_feature(*crop(image, usable[r].box));
      ex.inputs.row(static_cast<Eigen::Index>(r)) = kam_input(fi, fp, nit->second, fq);
    }
    out.examples.push_back(std::move(ex));
  }
  return out;
}

namespace {

// Softmax cross-entropy of one image; writes d(loss)/d(logits) when asked.
double image_loss(const Eigen::Ref<const Eigen::VectorXf>& logits, int positive,
                  Eigen::Ref<Eigen::VectorXf> dlogits, float weight) {
  const double mx = logits.cast<double>().maxCoeff();
  const Eigen::VectorXd e = (logits.cast<double>().array() - mx).exp();
  const double z = e.sum();
  const double loss = std::log(z) + mx - logits(positive);
  if (dlogits.size() > 0) {
    dlogits = (e / z).cast<float>() * weight;
    dlogits(positive) -= weight;
  }
  return loss;
}

struct AdamSlot {
  Eigen::MatrixXf m, v;
};

class Adam {
 public:
  explicit Adam(float lr) : lr_(lr) {}

  void begin_step() { ++t_; }

  void update(Eigen::Ref<Eigen::MatrixXf> param, const Eigen::Ref<const Eigen::MatrixXf>& grad, AdamSlot& s) const {
    if (s.m.size() == 0) {
      s.m = Eigen::MatrixXf::Zero(param.rows(), param.cols());
      s.v = Eigen::MatrixXf::Zero(param.rows(), param.cols());
    }
    s.m = kBeta1 * s.m + (1.0f - kBeta1) * grad;
    s.v = kBeta2 * s.v + (1.0f - kBeta2) * grad.cwiseAbs2();
    const float c1 = 1.0f - std::pow(kBeta1, static_cast<float>(t_));
    const float c2 = 1.0f - std::pow(kBeta2, static_cast<float>(t_));
    param.array() -= lr_ * (s.m.array() / c1) / ((s.v.array() / c2).sqrt() + kEps);
  }

 private:
  static constexpr float kBeta1 = 0.9f;
  static constexpr float kBeta2 = 0.999f;
  static constexpr float kEps = 1e-8f;
  float lr_;
  int t_ = 0;
};

}  // namespace

double kam_loss(const KamModel& model, const KamExample& example) {
  const Eigen::VectorXf logits = model.logits(example.inputs);
  Eigen::VectorXf none;
  return image_loss(logits, example.positive, none, 1.0f);
}

KamTrainResult train_kam(std::span<const KamExample> examples, const KamTrainConfig& cfg) {
  cfg.validate();
  if (examples.empty()) throw TrainingError("no usable labels");
  const Eigen::Index input_dim = examples.front().inputs.cols();
  for (const auto& ex : examples) {
    if (ex.inputs.cols() != input_dim || ex.inputs.rows() < 1 || ex.positive < 0 ||
        ex.positive >= ex.inputs.rows()) {
      throw TrainingError("malformed training example for image " + ex.image_id);
    }
  }

  std::vector<std::size_t> train, validation;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const bool held_out = examples.size() >= 10 && fnv1a64(examples[i].image_id) % 10 == 0;
    (held_out ? validation : train).push_back(i);
  }
  if (train.empty()) {
    train.swap(validation);
  }

  KamTrainResult result;
  result.model = KamModel(static_cast<int>(input_dim), cfg.hidden_dim, cfg.seed);
  result.train_images = train.size();
  result.validation_images = validation.size();
  KamModel& model = result.model;

  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
  Adam adam(static_cast<float>(cfg.learning_rate));
  std::vector<AdamSlot> slots(10);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order = train;
    std::shuffle(order.begin(), order.end(), rng);

    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(cfg.batch_size)) {
      batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                           order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + cfg.batch_size)));
    }
    auto rows_of = [&](const std::vector<std::size_t>& b) {
      Eigen::Index n = 0;
      for (auto i : b) n += examples[i].inputs.rows();
      return n;
    };
    if (batches.size() > 1 && rows_of(batches.back()) < 2) {
      auto tail = std::move(batches.back());
      batches.pop_back();
      batches.back().insert(batches.back().end(), tail.begin(), tail.end());
    }

    double epoch_loss = 0.0;
    for (const auto& batch : batches) {
      const Eigen::Index rows = rows_of(batch);
      if (rows < 2) throw TrainingError("batch normalization needs at least 2 candidate rows per batch");
      Eigen::MatrixXf x(rows, input_dim);
      std::vector<Eigen::Index> offsets;
      Eigen::Index r = 0;
      for (auto i : batch) {
        offsets.push_back(r);
        x.middleRows(r, examples[i].inputs.rows()) = examples[i].inputs;
        r += examples[i].inputs.rows();
      }
      KamModel::Cache cache;
      const Eigen::VectorXf logits = model.train_forward(x, cache, true);
      Eigen::VectorXf dlogits(rows);
      const float weight = 1.0f / static_cast<float>(batch.size());
      for (std::size_t k = 0; k < batch.size(); ++k) {
        const KamExample& ex = examples[batch[k]];
        epoch_loss += image_loss(logits.segment(offsets[k], ex.inputs.rows()), ex.positive,
                                 dlogits.segment(offsets[k], ex.inputs.rows()), weight);
      }
      if (!std::isfinite(epoch_loss) || !logits.allFinite()) {
        std::ostringstream msg;
        msg << "non-finite loss at epoch " << epoch + 1 << " (batch of " << batch.size() << " images, "
            << rows << " rows, max |logit| " << logits.cwiseAbs().maxCoeff() << ")";
        throw TrainingError(msg.str());
      }
      const KamModel::Gradients g = model.backward(cache, dlogits);
      adam.begin_step();
      adam.update(model.fc1.w, g.fc1.w, slots[0]);
      adam.update(model.fc1.b, g.fc1.b, slots[1]);
      adam.update(model.fc2.w, g.fc2.w, slots[2]);
      adam.update(model.fc2.b, g.fc2.b, slots[3]);
      adam.update(model.fc3.w, g.fc3.w, slots[4]);
      adam.update(model.fc3.b, g.fc3.b, slots[5]);
      adam.update(model.bn1.gamma, g.bn1_gamma, slots[6]);
      adam.update(model.bn1.beta, g.bn1_beta, slots[7]);
      adam.update(model.bn2.gamma, g.bn2_gamma, slots[8]);
      adam.update(model.bn2.beta, g.bn2_beta, slots[9]);
    }
    result.loss_trace.push_back(epoch_loss / static_cast<double>(train.size()));

    if (!validation.empty()) {
      double v = 0.0;
      for (auto i : validation) v += kam_loss(model, examples[i]);
      result.validation_trace.push_back(v / static_cast<double>(validation.size()));
    }
  }
  return result;
}

namespace {

Tensor to_tensor(const std::string& name, const Eigen::MatrixXf& m) {
  Tensor t{name, {m.rows(), m.cols()}, {}};
  t.data.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) t.data.push_back(m(r, c));
  }
  return t;
}

Tensor to_tensor(const std::string& name, const Eigen::VectorXf& v) {
  return {name, {v.size()}, std::vector<float>(v.data(), v.data() + v.size())};
}

Eigen::MatrixXf matrix_from(const Tensor& t) {
  if (t.shape.size() != 2) throw DomainError("checkpoint tensor " + t.name + " is not rank 2");
  Eigen::MatrixXf m(t.shape[0], t.shape[1]);
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = t.data[r * m.cols() + c];
  }
  return m;
}

Eigen::VectorXf vector_from(const Tensor& t) {
  if (t.shape.size() != 1) throw DomainError("checkpoint tensor " + t.name + " is not rank 1");
  return Eigen::Map<const Eigen::VectorXf>(t.data.data(), static_cast<Eigen::Index>(t.data.size()));
}

}  // namespace

void save_kam(const KamModel& model, const std::filesystem::path& stem,
              const std::map<std::string, std::string>& metadata) {
  TensorStore store;
  store.metadata = metadata;
  store.metadata["kind"] = "kam_mlp";
  store.metadata["input_dim"] = std::to_string(model.input_dim());
  store.metadata["hidden_dim"] = std::to_string(model.hidden_dim());
  store.add(to_tensor("fc1.w", model.fc1.w));
  store.add(to_tensor("fc1.b", model.fc1.b));
  store.add(to_tensor("bn1.gamma", model.bn1.gamma));
  store.add(to_tensor("bn1.beta", model.bn1.beta));
  store.add(to_tensor("bn1.running_mean", model.bn1.running_mean));
  store.add(to_tensor("bn1.running_var", model.bn1.running_var));
  store.add(to_tensor("fc2.w", model.fc2.w));
  store.add(to_tensor("fc2.b", model.fc2.b));
  store.add(to_tensor("bn2.gamma", model.bn2.gamma));
  store.add(to_tensor("bn2.beta", model.bn2.beta));
  store.add(to_tensor("bn2.running_mean", model.bn2.running_mean));
  store.add(to_tensor("bn2.running_var", model.bn2.running_var));
  store.add(to_tensor("fc3.w", model.fc3.w));
  store.add(to_tensor("fc3.b", model.fc3.b));
  store.save(stem);
}

KamModel load_kam(const std::filesystem::path& stem) {
  const TensorStore store = TensorStore::load(stem);
  const auto kind = store.metadata.find("kind");
  if (kind == store.metadata.end() || kind->second != "kam_mlp") {
    throw DomainError("not a KAM checkpoint: " + stem.string());
  }
  KamModel m;
  m.fc1 = {matrix_from(store.get("fc1.w")), vector_from(store.get("fc1.b"))};
  m.bn1 = {vector_from(store.get("bn1.gamma")), vector_from(store.get("bn1.beta")),
           vector_from(store.get("bn1.running_mean")), vector_from(store.get("bn1.running_var"))};
  m.fc2 = {matrix_from(store.get("fc2.w")), vector_from(store.get("fc2.b"))};
  m.bn2 = {vector_from(store.get("bn2.gamma")), vector_from(store.get("bn2.beta")),
           vector_from(store.get("bn2.running_mean")), vector_from(store.get("bn2.running_var"))};
  m.fc3 = {matrix_from(store.get("fc3.w")), vector_from(store.get("fc3.b"))};
  if (m.fc2.w.cols() != m.fc1.w.rows() || m.fc3.w.cols() != m.fc2.w.rows() || m.fc3.w.rows() != 1) {
    throw DomainError("KAM checkpoint has inconsistent layer shapes");
  }
  return m;
}

}  // namespace refground
