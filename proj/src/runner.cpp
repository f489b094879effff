#include "refground/runner.hpp"

#include <memory>

namespace refground {

ProposalMap proposal_map(const std::vector<ProposalRecord>& records) {
  ProposalMap out;
  for (const auto& r : records) {
    auto& list = out[r.image_id];
    list.insert(list.end(), r.boxes.begin(), r.boxes.end());
  }
  return out;
}

ImageProvider scene_images(const std::vector<Scene>& scenes) {
  auto index = std::make_shared<std::map<std::string, Scene>>();
  for (const auto& s : scenes) index->emplace(s.image_id, s);
  return [index](const std::string& image_id) {
    const auto it = index->find(image_id);
    if (it == index->end()) throw DomainError("no scene for image '" + image_id + "'");
    return render_scene(it->second);
  };
}

ImageProvider ppm_images(const std::vector<GroundingInstance>& instances, std::filesystem::path base) {
  auto paths = std::make_shared<std::map<std::string, std::filesystem::path>>();
  for (const auto& inst : instances) {
    std::filesystem::path p = inst.image_path.empty() ? std::filesystem::path("images") / (inst.image_id + ".ppm")
                                                      : std::filesystem::path(inst.image_path);
    if (p.is_relative()) p = base / p;
    paths->emplace(inst.image_id, p);
  }
  return [paths](const std::string& image_id) {
    const auto it = paths->find(image_id);
    if (it == paths->end()) throw DomainError("no image path for '" + image_id + "'");
    return read_ppm(it->second, image_id);
  };
}

std::vector<Prediction> ground_all(const Grounder& grounder, const std::vector<GroundingInstance>& instances,
                                   const ProposalMap& proposals, const ImageProvider& images, int threads,
                                   bool allow_missing_proposals) {
  if (!grounder.backend().capabilities().thread_safe) threads = 1;
  static const std::vector<Proposal> none;
  return parallel_map(instances.size(), threads, [&](std::size_t i) {
    const GroundingInstance& inst = instances[i];
    const auto it = proposals.find(inst.image_id);
    if (it == proposals.end() && !allow_missing_proposals) {
      throw DomainError("no proposals for image '" + inst.image_id + "'");
    }
    const Image image = images(inst.image_id);
    return grounder.ground(image, inst.image_id, inst.query, it == proposals.end() ? none : it->second);
  });
}

std::vector<PredictionRecord> to_records(const std::vector<Prediction>& predictions) {
  std::vector<PredictionRecord> out;
  out.reserve(predictions.size());
  for (const auto& p : predictions) out.push_back(to_record(p));
  return out;
}

MiningReport mine(const Grounder& grounder, const std::vector<std::string>& image_ids,
                  const std::vector<std::string>& query_pool, const ProposalMap& proposals,
                  const ImageProvider& images, double thr_k, int threads) {
  const EncoderBackend& backend = grounder.backend();
  if (!backend.capabilities().thread_safe) threads = 1;
  const auto features = parallel_map(image_ids.size(), threads,
                                     [&](std::size_t i) { return backend.encode_image_feature(images(image_ids[i])); });
  std::map<std::string, FeatureVector> by_id;
  for (std::size_t i = 0; i < image_ids.size(); ++i) by_id.emplace(image_ids[i], features[i]);
  const std::vector<PseudoPair> pairs = pseudo_pair(by_id, query_pool, backend);

  static const std::vector<Proposal> none;
  const MiningGrounder ground = [&](const PseudoPair& pair) {
    const auto it = proposals.find(pair.image_id);
    const Prediction p =
        grounder.ground(images(pair.image_id), pair.image_id, pair.query, it == proposals.end() ? none : it->second);
    return MiningOutcome{union_box(p.boxes), normalized_selected_fused(p)};
  };
  return mine_pseudo_labels(pairs, ground, thr_k, threads);
}

}  // namespace refground
