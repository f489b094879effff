#include "refground/com.hpp"

#include <algorithm>
#include <map>

namespace refground {

std::size_t CandidateSet::top_down_count() const {
  return static_cast<std::size_t>(std::count_if(candidates.begin(), candidates.end(), [](const auto& c) {
    return c.origin() == CandidateOrigin::top_down;
  }));
}

std::vector<std::optional<double>> score_proposals(const Image& image,
                                                   std::span<const Proposal> proposals,
                                                   const FeatureVector& fq,
                                                   const EncoderBackend& backend) {
  if (proposals.empty()) throw DomainError("score_proposals: no proposals");
  std::vector<std::optional<double>> out;
  out.reserve(proposals.size());
  for (const auto& p : proposals) {
    const std::optional<Image> region = crop(image, p.box);
    if (!region) {
      out.emplace_back();
      continue;
    }
    out.emplace_back(cosine_similarity(backend.encode_image_feature(*region), fq));
  }
  return out;
}

std::string apply_prompt(std::string_view prompt_template, const std::string& class_name) {
  if (prompt_template.empty()) return class_name;
  std::string out(prompt_template);
  const auto pos = out.find("{}");
  if (pos == std::string::npos) throw ConfigError("prompt template needs a {} placeholder");
  out.replace(pos, 2, class_name);
  return out;
}

std::vector<double> score_class_names(std::span<const std::string> class_names,
                                      const FeatureVector& fq, const EncoderBackend& backend,
                                      std::string_view prompt_template) {
  if (class_names.empty()) throw DomainError("score_class_names: no names");
  std::map<std::string, double> cache;
  std::vector<double> out;
  out.reserve(class_names.size());
  for (const auto& name : class_names) {
    auto it = cache.find(name);
    if (it == cache.end()) {
      const double s = cosine_similarity(backend.encode_text(apply_prompt(prompt_template, name)), fq);
      it = cache.emplace(name, s).first;
    }
    out.push_back(it->second);
  }
  return out;
}

std::vector<double> bottom_up_scores(std::span<const double> s_pq, std::span<const double> s_cq) {
  if (s_pq.size() != s_cq.size()) throw DomainError("bottom_up_scores: length mismatch");
  std::vector<double> out(s_pq.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = s_pq[i] + s_cq[i];
  return out;
}

std::optional<std::size_t> best_class_match(const CandidateSet& set) {
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < set.candidates.size(); ++i) {
    const auto& c = set.candidates[i];
    if (c.origin() != CandidateOrigin::proposal) continue;
    if (!best || c.s_cq() > set.candidates[*best].s_cq()) best = i;
  }
  return best;
}

CandidateSet augment_with_topdown(CandidateSet set, const BoundingBox& p_t, const Image& image,
                                  std::string_view query, const FeatureVector& fq,
                                  const EncoderBackend& backend, std::string_view prompt_template) {
  if (set.top_down_count() != 0) throw DomainError("augment_with_topdown: set already augmented");
  const std::optional<std::size_t> donor = best_class_match(set);
  // Without proposals the query itself stands in for the class name.
  const std::string name = donor ? set.candidates[*donor].class_name() : std::string(query);
  const std::string text = donor ? apply_prompt(prompt_template, name) : name;

  const std::optional<Image> region = crop(image, p_t);
  if (!region) throw DomainError("augment_with_topdown: top-down box covers no pixel");
  const double s_pq = cosine_similarity(backend.encode_image_feature(*region), fq);
  const double s_cq = cosine_similarity(backend.encode_text(text), fq);
  set.candidates.emplace_back(p_t, name, s_pq, s_cq, CandidateOrigin::top_down);
  return set;
}

}  // namespace refground
