#include "refground/pipeline.hpp"

#include <algorithm>
#include <map>

namespace refground {

BottomUpInfo parse_bottom_up_info(const std::string& text) {
  if (text == "both") return BottomUpInfo::both;
  if (text == "class_name") return BottomUpInfo::class_name;
  if (text == "visual") return BottomUpInfo::visual;
  throw ConfigError("unknown bottom_up_info '" + text + "'");
}

std::string to_string(BottomUpInfo info) {
  switch (info) {
    case BottomUpInfo::both: return "both";
    case BottomUpInfo::class_name: return "class_name";
    case BottomUpInfo::visual: return "visual";
  }
  return "both";
}

TopDownMapKind parse_top_down_map(const std::string& text) {
  if (text == "query_aware") return TopDownMapKind::query_aware;
  if (text == "vanilla_visual") return TopDownMapKind::vanilla_visual;
  if (text == "off") return TopDownMapKind::off;
  throw ConfigError("unknown use_topdown_map '" + text + "'");
}

std::string to_string(TopDownMapKind kind) {
  switch (kind) {
    case TopDownMapKind::query_aware: return "query_aware";
    case TopDownMapKind::vanilla_visual: return "vanilla_visual";
    case TopDownMapKind::off: return "off";
  }
  return "off";
}

void GroundingOptions::validate() const {
  qam.validate();
  fusion.validate();
  if (qam_only && top_down == TopDownMapKind::off) {
    throw ConfigError("qam_only needs a top-down map");
  }
  if (!prompt_template.empty() && prompt_template.find("{}") == std::string::npos) {
    throw ConfigError("prompt template needs a {} placeholder");
  }
}

Grounder::Grounder(const EncoderBackend& backend, GroundingOptions options, const KamModel* kam)
    : backend_(backend), options_(std::move(options)), kam_(kam) {
  options_.validate();
  if (kam_ && kam_->input_dim() != 4 * backend_.feature_dim()) {
    throw ConfigError("KAM checkpoint input size does not match the backend feature size");
  }
}

namespace {

ScoredCandidate restrict_bottom_up(const ScoredCandidate& c, BottomUpInfo info) {
  switch (info) {
    case BottomUpInfo::both: return c;
    case BottomUpInfo::class_name: return {c.box(), c.class_name(), 0.0, c.s_cq(), c.origin()};
    case BottomUpInfo::visual: return {c.box(), c.class_name(), c.s_pq(), 0.0, c.origin()};
  }
  return c;
}

}  // namespace

Prediction Grounder::ground(const Image& image, std::string_view image_id, std::string_view query,
                            std::span<const Proposal> proposals, bool keep_map) const {
  const GroundingOptions& opt = options_;
  Prediction pred;
  pred.image_id = image_id;
  pred.query = query;
  pred.candidates.image_id = image_id;

  const FeatureVector fq = backend_.encode_text(query);
  std::optional<ImageEncoding> enc;
  std::optional<TopDownResult> td;
  if (opt.top_down != TopDownMapKind::off) {
    enc = backend_.encode_image(image);
    td = top_down(backend_, *enc, fq, image.height, image.width, opt.top_down, opt.qam);
    pred.top_down_box = td->extracted.box;
    pred.s_iq = td->s_iq;
    pred.map_degenerate = td->map.degenerate;
    if (td->map.degenerate) pred.warnings.push_back("degenerate attention map; top-down box is the full image");
  } else if (proposals.empty()) {
    throw DomainError("no proposals for image '" + std::string(image_id) + "' and the top-down map is off");
  }

  // Proposal crops and class names; features are kept for the KAM scorer.
  std::vector<FeatureVector> crop_features;
  std::map<std::string, FeatureVector> name_features;
  auto name_feature = [&](const std::string& name) -> const FeatureVector& {
    auto it = name_features.find(name);
    if (it == name_features.end()) {
      it = name_features.emplace(name, backend_.encode_text(apply_prompt(opt.prompt_template, name))).first;
    }
    return it->second;
  };

  if (!opt.qam_only) {
    for (std::size_t i = 0; i < proposals.size(); ++i) {
      const Proposal& p = proposals[i];
      const std::optional<BoundingBox> clipped = p.box.clipped(image.width, image.height);
      const std::optional<Image> region = clipped ? crop(image, *clipped) : std::nullopt;
      if (!region) {
        pred.warnings.push_back("proposal " + std::to_string(i) + " dropped: crop covers no pixel");
        continue;
      }
      FeatureVector fp = backend_.encode_image_feature(*region);
      const double s_pq = cosine_similarity(fp, fq);
      const double s_cq = cosine_similarity(name_feature(p.class_name), fq);
      pred.candidates.candidates.emplace_back(*clipped, p.class_name, s_pq, s_cq, CandidateOrigin::proposal);
      crop_features.push_back(std::move(fp));
    }
  }

  const bool add_top_down = td && (opt.augment_proposals || opt.qam_only || pred.candidates.candidates.empty());
  bool top_down_named_by_query = false;
  if (add_top_down) {
    top_down_named_by_query = pred.candidates.candidates.empty();
    if (top_down_named_by_query && !opt.qam_only) {
      pred.warnings.push_back("no usable proposals; top-down box named after the query");
    }
    pred.candidates = augment_with_topdown(std::move(pred.candidates), td->extracted.box, image, query, fq,
                                           backend_, opt.prompt_template);
    if (kam_) crop_features.push_back(backend_.encode_image_feature(*crop(image, td->extracted.box)));
  }
  if (pred.candidates.candidates.empty()) {
    throw DomainError("no candidates for image '" + std::string(image_id) + "'");
  }

  for (auto& c : pred.candidates.candidates) c = restrict_bottom_up(c, opt.bottom_up);

  const bool fuse_top_down = td && opt.use_fusion;
  if (fuse_top_down) {
    for (std::size_t i = 0; i < pred.candidates.candidates.size(); ++i) {
      auto& c = pred.candidates.candidates[i];
      const TopDownScore s = topdown_score(c.box(), td->map);
      if (s.pixels == 0) pred.warnings.push_back("candidate " + std::to_string(i) + " covers no map pixel");
      c.set_s_td(s.value);
    }
  }

  if (kam_) {
    const FeatureVector fi = enc ? enc->feature : backend_.encode_image_feature(image);
    Eigen::MatrixXf inputs(static_cast<Eigen::Index>(pred.candidates.candidates.size()), kam_->input_dim());
    for (std::size_t i = 0; i < pred.candidates.candidates.size(); ++i) {
      const auto& c = pred.candidates.candidates[i];
      const FeatureVector fc = (c.origin() == CandidateOrigin::top_down && top_down_named_by_query)
                                   ? backend_.encode_text(c.class_name())
                                   : name_feature(c.class_name());
      inputs.row(static_cast<Eigen::Index>(i)) = kam_input(fi, crop_features[i], fc, fq);
    }
    const Eigen::VectorXd s_kam = kam_forward_batch(*kam_, inputs);
    for (std::size_t i = 0; i < pred.candidates.candidates.size(); ++i) {
      pred.candidates.candidates[i].set_s_kam(s_kam(static_cast<Eigen::Index>(i)));
    }
  }

  for (auto& c : pred.candidates.candidates) {
    const double s_td = fuse_top_down ? c.s_td() : 0.0;
    FusionConfig weights = opt.fusion;
    if (!fuse_top_down) weights.lambda_t = 0.0;
    c.set_fused(c.s_kam() ? fuse_with_kam(c.s_bu(), s_td, *c.s_kam(), weights) : fuse(c.s_bu(), s_td, weights));
  }

  if (opt.qam_only) {
    pred.selection = {{td->extracted.box}, {pred.candidates.candidates.size() - 1}};
  } else {
    pred.selection = select_prediction(pred.candidates, opt.fusion.selection_mode);
  }
  pred.boxes = pred.selection.boxes;
  if (keep_map && td) pred.map = std::move(td->map);
  return pred;
}

double normalized_selected_fused(const Prediction& prediction) {
  const auto& cands = prediction.candidates.candidates;
  if (cands.empty() || prediction.selection.members.empty()) {
    throw DomainError("normalized_selected_fused: empty prediction");
  }
  double lo = cands.front().fused(), hi = lo;
  for (const auto& c : cands) {
    lo = std::min(lo, c.fused());
    hi = std::max(hi, c.fused());
  }
  double selected = cands[prediction.selection.members.front()].fused();
  for (auto i : prediction.selection.members) selected = std::max(selected, cands[i].fused());
  if (!(hi > lo)) return 1.0;
  return (selected - lo) / (hi - lo);
}

}  // namespace refground
