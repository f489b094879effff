#include "refground/synthetic.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace refground {

using nlohmann::json;

std::string to_string(Shape shape) {
  switch (shape) {
    case Shape::circle: return "circle";
    case Shape::square: return "square";
    case Shape::triangle: return "triangle";
  }
  return "circle";
}

namespace {

Shape parse_shape(const std::string& name) {
  if (name == "circle") return Shape::circle;
  if (name == "square") return Shape::square;
  if (name == "triangle") return Shape::triangle;
  throw DomainError("unknown shape '" + name + "'");
}

int palette_index(const std::string& name) {
  const auto& p = synthetic_palette();
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i].name == name) return static_cast<int>(i);
  }
  throw DomainError("unknown color '" + name + "'");
}

constexpr std::array<std::uint8_t, 3> kBackground = {128, 128, 128};

}  // namespace

const std::vector<PaletteColor>& synthetic_palette() {
  static const std::vector<PaletteColor> palette = {
      {"red", {220, 40, 40}},    {"green", {40, 180, 60}},  {"blue", {40, 80, 220}},
      {"yellow", {235, 215, 40}}, {"purple", {150, 60, 190}}, {"orange", {245, 140, 30}},
  };
  return palette;
}

const std::vector<std::string>& synthetic_shape_names() {
  static const std::vector<std::string> names = {"circle", "square", "triangle"};
  return names;
}

const std::vector<std::string>& synthetic_side_names() {
  static const std::vector<std::string> names = {"left", "right", "top", "bottom"};
  return names;
}

bool SceneObject::covers(double x, double y) const {
  const double dx = x - cx, dy = y - cy;
  switch (shape) {
    case Shape::circle: return dx * dx + dy * dy <= radius * radius;
    case Shape::square: return std::abs(dx) <= radius && std::abs(dy) <= radius;
    case Shape::triangle:
      // Apex at the top center, base along the bottom edge.
      return dy <= radius && dy >= -radius && std::abs(dx) <= (dy + radius) / 2.0;
  }
  return false;
}

std::string SceneObject::horizontal_side(int image_width) const {
  return cx < image_width / 2.0 ? "left" : "right";
}

std::string SceneObject::vertical_side(int image_height) const {
  return cy < image_height / 2.0 ? "top" : "bottom";
}

void SyntheticWorldConfig::validate() const {
  if (image_width < 32 || image_height < 32) throw ConfigError("synthetic images must be at least 32x32");
  if (min_objects < 2 || max_objects < min_objects) throw ConfigError("need 2 <= min_objects <= max_objects");
  if (!(min_radius >= 4.0 && max_radius >= min_radius)) throw ConfigError("need 4 <= min_radius <= max_radius");
  if (2.0 * max_radius + 2.0 > std::min(image_width, image_height)) throw ConfigError("objects do not fit the image");
  if (!(gap >= 0.0)) throw ConfigError("gap must be >= 0");
  if (!(distractor_rate >= 0.0 && distractor_rate <= 1.0)) throw ConfigError("distractor_rate must lie in [0,1]");
  if (!(box_noise >= 0.0)) throw ConfigError("box_noise must be >= 0");
  if (!(class_noise >= 0.0 && class_noise <= 1.0)) throw ConfigError("class_noise must lie in [0,1]");
  if (background_proposals < 0) throw ConfigError("background_proposals must be >= 0");
}

namespace {

bool boxes_apart(const BoundingBox& a, const BoundingBox& b, double gap) {
  return a.x2() + gap <= b.x1() || b.x2() + gap <= a.x1() || a.y2() + gap <= b.y1() || b.y2() + gap <= a.y1();
}

bool intersects(const BoundingBox& a, const BoundingBox& b) { return !boxes_apart(a, b, 0.0); }

std::vector<std::string> unique_descriptions(const Scene& s, int r) {
  const SceneObject& ref = s.objects[r];
  const auto& palette = synthetic_palette();
  std::vector<std::string> out;
  auto unique_if = [&](auto same, std::string text) {
    for (std::size_t j = 0; j < s.objects.size(); ++j) {
      if (static_cast<int>(j) != r && same(s.objects[j])) return;
    }
    out.push_back(std::move(text));
  };
  unique_if([&](const SceneObject& o) { return o.color == ref.color && o.shape == ref.shape; },
            palette[ref.color].name + " " + to_string(ref.shape));
  const std::string h = ref.horizontal_side(s.width), v = ref.vertical_side(s.height);
  unique_if([&](const SceneObject& o) { return o.shape == ref.shape && o.horizontal_side(s.width) == h; },
            to_string(ref.shape) + " on " + h);
  unique_if([&](const SceneObject& o) { return o.shape == ref.shape && o.vertical_side(s.height) == v; },
            to_string(ref.shape) + " on " + v);
  return out;
}

double round_tenth(double v) { return std::round(v * 10.0) / 10.0; }

}  // namespace

SyntheticCorpus generate_synthetic(const SyntheticWorldConfig& cfg, int n) {
  cfg.validate();
  if (n < 1) throw DomainError("generate_synthetic: n must be >= 1");
  std::mt19937_64 rng(cfg.seed);
  auto uniform = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  auto uniform_int = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  std::normal_distribution<double> noise(0.0, 1.0);
  const int n_colors = static_cast<int>(synthetic_palette().size());
  const int n_shapes = static_cast<int>(synthetic_shape_names().size());

  SyntheticCorpus corpus;
  for (int i = 0; i < n; ++i) {
    std::ostringstream id;
    id << "syn_" << std::setw(5) << std::setfill('0') << i;

    Scene scene;
    std::vector<std::string> queries;
    while (true) {
      scene = Scene{id.str(), cfg.image_width, cfg.image_height, {}, 0, {}};
      const int k = uniform_int(cfg.min_objects, cfg.max_objects);
      for (int attempt = 0; attempt < 2000 && static_cast<int>(scene.objects.size()) < k; ++attempt) {
        SceneObject o;
        o.radius = std::round(uniform(cfg.min_radius, cfg.max_radius));
        o.cx = std::round(uniform(o.radius + 1.0, cfg.image_width - o.radius - 1.0));
        o.cy = std::round(uniform(o.radius + 1.0, cfg.image_height - o.radius - 1.0));
        o.shape = static_cast<Shape>(uniform_int(0, n_shapes - 1));
        o.color = uniform_int(0, n_colors - 1);
        const bool apart = std::all_of(scene.objects.begin(), scene.objects.end(),
                                       [&](const SceneObject& p) { return boxes_apart(p.box(), o.box(), cfg.gap); });
        if (apart) scene.objects.push_back(o);
      }
      if (static_cast<int>(scene.objects.size()) < cfg.min_objects) continue;
      std::vector<int> order(scene.objects.size());
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), rng);
      for (int r : order) {
        queries = unique_descriptions(scene, r);
        if (!queries.empty()) {
          scene.referent = r;
          break;
        }
      }
      if (!queries.empty()) break;
    }
    scene.query = queries[static_cast<std::size_t>(uniform_int(0, static_cast<int>(queries.size()) - 1))];

    const BoundingBox ref_box = scene.objects[scene.referent].box();
    const bool distractor_only = uniform(0.0, 1.0) < cfg.distractor_rate;
    ProposalRecord rec{scene.image_id, cfg.image_width, cfg.image_height, {}};
    auto jittered = [&](const BoundingBox& b) -> std::optional<BoundingBox> {
      const double x1 = round_tenth(b.x1() + cfg.box_noise * noise(rng));
      const double y1 = round_tenth(b.y1() + cfg.box_noise * noise(rng));
      const double x2 = round_tenth(b.x2() + cfg.box_noise * noise(rng));
      const double y2 = round_tenth(b.y2() + cfg.box_noise * noise(rng));
      if (!(x1 < x2 && y1 < y2)) return std::nullopt;
      return BoundingBox(x1, y1, x2, y2).clipped(cfg.image_width, cfg.image_height);
    };
    auto class_name = [&](Shape s) {
      int idx = static_cast<int>(s);
      if (uniform(0.0, 1.0) < cfg.class_noise) idx = (idx + uniform_int(1, n_shapes - 1)) % n_shapes;
      return synthetic_shape_names()[static_cast<std::size_t>(idx)];
    };
    for (int j = 0; j < static_cast<int>(scene.objects.size()); ++j) {
      const SceneObject& o = scene.objects[j];
      const bool is_ref = j == scene.referent;
      if (is_ref && distractor_only) continue;
      std::optional<BoundingBox> box;
      for (int attempt = 0; attempt < 100 && !box; ++attempt) {
        box = jittered(o.box());
        if (box && is_ref && iou(*box, ref_box) < 0.5) box.reset();
        if (box && !is_ref && intersects(*box, ref_box)) box.reset();
      }
      if (!box) box = o.box();
      rec.boxes.push_back({*box, class_name(o.shape), round_tenth(uniform(0.5, 1.0) * 100.0) / 100.0});
    }
    for (int b = 0; b < cfg.background_proposals; ++b) {
      for (int attempt = 0; attempt < 200; ++attempt) {
        const double w = std::round(uniform(24.0, 80.0)), h = std::round(uniform(24.0, 80.0));
        const double x = std::round(uniform(0.0, cfg.image_width - w)), y = std::round(uniform(0.0, cfg.image_height - h));
        const BoundingBox box(x, y, x + w, y + h);
        if (intersects(box, ref_box)) continue;
        rec.boxes.push_back({box, "background", round_tenth(uniform(0.1, 0.5) * 100.0) / 100.0});
        break;
      }
    }
    std::shuffle(rec.boxes.begin(), rec.boxes.end(), rng);

    corpus.instances.push_back({scene.image_id, "images/" + scene.image_id + ".ppm", scene.query, {ref_box}});
    corpus.proposals.push_back(std::move(rec));
    corpus.scenes.push_back(std::move(scene));
  }
  return corpus;
}

Image render_scene(const Scene& scene) {
  Image img(scene.height, scene.width);
  img.source_id = scene.image_id;
  const auto& palette = synthetic_palette();
  for (int y = 0; y < scene.height; ++y) {
    for (int x = 0; x < scene.width; ++x) {
      std::array<std::uint8_t, 3> rgb = kBackground;
      for (const auto& o : scene.objects) {
        if (o.covers(x + 0.5, y + 0.5)) {
          rgb = palette[o.color].rgb;
          break;
        }
      }
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = rgb[c] / 255.0f;
    }
  }
  return img;
}

namespace {

json scene_to_json(const Scene& s) {
  json objects = json::array();
  for (const auto& o : s.objects) {
    objects.push_back({{"shape", to_string(o.shape)},
                       {"color", synthetic_palette()[o.color].name},
                       {"cx", o.cx},
                       {"cy", o.cy},
                       {"radius", o.radius}});
  }
  return {{"image_id", s.image_id}, {"width", s.width},     {"height", s.height},
          {"referent", s.referent}, {"query", s.query},     {"objects", objects}};
}

Scene scene_from_json(const json& j) {
  Scene s;
  s.image_id = j.at("image_id").get<std::string>();
  s.width = j.at("width").get<int>();
  s.height = j.at("height").get<int>();
  s.referent = j.value("referent", 0);
  s.query = j.value("query", std::string{});
  for (const auto& o : j.at("objects")) {
    s.objects.push_back({parse_shape(o.at("shape").get<std::string>()), palette_index(o.at("color").get<std::string>()),
                         o.at("cx").get<double>(), o.at("cy").get<double>(), o.at("radius").get<double>()});
  }
  return s;
}

}  // namespace

void write_synthetic(const std::filesystem::path& dir, const SyntheticCorpus& corpus) {
  std::filesystem::create_directories(dir / "images");
  write_instances(dir / "instances.jsonl", corpus.instances);
  write_proposals(dir / "proposals.jsonl", corpus.proposals);
  std::ofstream fixture(dir / "fixture.jsonl", std::ios::binary);
  if (!fixture) throw DomainError("cannot write " + (dir / "fixture.jsonl").string());
  for (const auto& s : corpus.scenes) {
    fixture << scene_to_json(s).dump() << '\n';
    write_ppm(dir / "images" / (s.image_id + ".ppm"), render_scene(s));
  }
}

std::map<std::string, Scene> read_fixture(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DomainError("cannot open " + path.string());
  std::map<std::string, Scene> scenes;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      Scene s = scene_from_json(json::parse(line));
      scenes.emplace(s.image_id, std::move(s));
    } catch (const std::exception& e) {
      throw DomainError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return scenes;
}

void OracleEncoderConfig::validate() const {
  if (grid < 1) throw ConfigError("oracle grid must be >= 1");
  if (feature_dim < 8) throw ConfigError("oracle feature_dim must be >= 8");
  if (head_beta.empty()) throw ConfigError("oracle needs at least one head");
  for (double b : head_beta) {
    if (!std::isfinite(b) || b < 0.0) throw ConfigError("oracle head_beta must be finite and >= 0");
  }
  if (!(common_weight > 0.0)) throw ConfigError("oracle common_weight must be > 0");
  if (samples < 1) throw ConfigError("oracle samples must be >= 1");
}

namespace {

struct OracleTail final : AttentionTail {
  // Patch values are coverage * sources: U x (K+1) times (K+1) x D, the
  // last source being the background direction.
  Eigen::MatrixXd coverage;
  Eigen::MatrixXd sources;
  FeatureVector feature;
};

const std::set<std::string> kStopWords = {"a", "an", "the", "on", "of", "at", "in", "to"};

}  // namespace

SceneOracleEncoder::SceneOracleEncoder(std::map<std::string, Scene> scenes, OracleEncoderConfig cfg)
    : scenes_(std::move(scenes)), cfg_(std::move(cfg)) {
  cfg_.validate();
  std::vector<std::string> keys = {"bg", "common"};
  for (const auto& c : synthetic_palette()) keys.push_back("color:" + c.name);
  for (const auto& s : synthetic_shape_names()) {
    keys.push_back("shape:" + s);
    for (const auto& c : synthetic_palette()) keys.push_back("cs:" + c.name + ":" + s);
    for (const auto& side : synthetic_side_names()) keys.push_back("ss:" + s + ":" + side);
  }
  for (const auto& side : synthetic_side_names()) keys.push_back("side:" + side);
  for (const auto& k : keys) atoms_.emplace(k, direction(k));
}

FeatureVector SceneOracleEncoder::direction(const std::string& key) const {
  std::mt19937_64 rng(cfg_.seed ^ fnv1a64(key));
  std::normal_distribution<double> normal(0.0, 1.0);
  FeatureVector v(cfg_.feature_dim);
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = normal(rng);
  return v / v.norm();
}

const FeatureVector& SceneOracleEncoder::atom(const std::string& key) const { return atoms_.at(key); }

const Scene& SceneOracleEncoder::scene_of(const Image& image) const {
  const auto it = scenes_.find(image.source_id);
  if (it == scenes_.end()) {
    throw BackendError("oracle backend: no fixture entry for image '" + image.source_id + "'");
  }
  return it->second;
}

FeatureVector SceneOracleEncoder::object_embedding(const SceneObject& obj, const Scene& scene) const {
  const std::string color = synthetic_palette()[obj.color].name;
  const std::string shape = to_string(obj.shape);
  const std::string h = obj.horizontal_side(scene.width), v = obj.vertical_side(scene.height);
  FeatureVector e = atom("color:" + color) + atom("shape:" + shape) + atom("side:" + h) + atom("side:" + v) +
                    atom("cs:" + color + ":" + shape) + atom("ss:" + shape + ":" + h) + atom("ss:" + shape + ":" + v);
  return e / e.norm();
}

ImageEncoding SceneOracleEncoder::encode_image(const Image& image) const {
  if (image.empty()) throw DomainError("encode_image: empty image");
  const Scene& scene = scene_of(image);
  std::vector<FeatureVector> embeddings;
  for (const auto& o : scene.objects) embeddings.push_back(object_embedding(o, scene));

  const int g = cfg_.grid, s = cfg_.samples, u_count = g * g;
  const int heads = static_cast<int>(cfg_.head_beta.size());
  const Eigen::Index k_count = static_cast<Eigen::Index>(scene.objects.size());
  const BoundingBox region = image.region();
  const double cell_w = region.width() / g, cell_h = region.height() / g;
  const double per_sample = 1.0 / (s * s);

  auto tail = std::make_shared<OracleTail>();
  tail->sources.resize(k_count + 1, cfg_.feature_dim);
  for (Eigen::Index k = 0; k < k_count; ++k) tail->sources.row(k) = embeddings[static_cast<std::size_t>(k)].transpose();
  tail->sources.row(k_count) = atom("bg").transpose();
  tail->coverage = Eigen::MatrixXd::Zero(u_count, k_count + 1);
  for (int i = 0; i < g; ++i) {
    for (int j = 0; j < g; ++j) {
      const int u = i * g + j;
      for (int a = 0; a < s; ++a) {
        const double y = region.y1() + (i + (a + 0.5) / s) * cell_h;
        for (int b = 0; b < s; ++b) {
          const double x = region.x1() + (j + (b + 0.5) / s) * cell_w;
          Eigen::Index hit = k_count;
          for (Eigen::Index k = 0; k < k_count; ++k) {
            if (scene.objects[static_cast<std::size_t>(k)].covers(x, y)) {
              hit = k;
              break;
            }
          }
          tail->coverage(u, hit) += per_sample;
        }
      }
    }
  }
  const Eigen::VectorXd objectness = 1.0 - tail->coverage.col(k_count).array();

  ImageEncoding enc;
  AttentionRecord& rec = enc.attention;
  rec.att.resize(heads, u_count);
  for (int h = 0; h < heads; ++h) {
    const Eigen::ArrayXd e = (cfg_.head_beta[static_cast<std::size_t>(h)] * objectness.array()).exp();
    rec.att.row(h) = (e / (1.0 + e.sum())).matrix().transpose();
  }
  rec.grid_rows = g;
  rec.grid_cols = g;
  rec.head_dim = std::max(1, cfg_.feature_dim / heads);
  rec.producer = instance_id();

  const Eigen::RowVectorXd mixed = (rec.att.colwise().mean() * tail->coverage) * tail->sources;
  enc.feature = cfg_.common_weight * atom("common") + mixed.transpose();
  tail->feature = enc.feature;
  rec.tail = tail;
  return enc;
}

FeatureVector SceneOracleEncoder::encode_text(std::string_view text) const {
  const std::vector<std::string> tokens = tokenize(text);
  if (tokens.empty()) throw DomainError("encode_text: text has no tokens");
  std::vector<std::string> colors, shapes, sides;
  FeatureVector content = FeatureVector::Zero(cfg_.feature_dim);
  for (const auto& t : tokens) {
    if (atoms_.count("color:" + t)) {
      colors.push_back(t);
    } else if (atoms_.count("shape:" + t)) {
      shapes.push_back(t);
    } else if (atoms_.count("side:" + t)) {
      sides.push_back(t);
    } else if (!kStopWords.count(t)) {
      content += 0.5 * direction("word:" + t);
    }
  }
  for (const auto& c : colors) content += atom("color:" + c);
  for (const auto& side : sides) content += atom("side:" + side);
  for (const auto& s : shapes) {
    content += atom("shape:" + s);
    for (const auto& c : colors) content += atom("cs:" + c + ":" + s);
    for (const auto& side : sides) content += atom("ss:" + s + ":" + side);
  }
  const double norm = content.norm();
  if (norm > 0.0) content /= norm;
  return cfg_.common_weight * atom("common") + content;
}

FeatureVector SceneOracleEncoder::tail_feature(const AttentionRecord& rec, const Eigen::MatrixXd& att) const {
  const auto tail = std::dynamic_pointer_cast<const OracleTail>(rec.tail);
  if (!tail) throw StateError("attention record carries no oracle activations");
  if (att.rows() != rec.att.rows() || att.cols() != rec.att.cols()) throw DomainError("tail_feature: shape mismatch");
  const Eigen::RowVectorXd mixed = (att.colwise().mean() * tail->coverage) * tail->sources;
  return cfg_.common_weight * atom("common") + mixed.transpose();
}

AttentionGradients SceneOracleEncoder::attention_gradients(const AttentionRecord& rec, const FeatureVector& fi,
                                                           const FeatureVector& fq) const {
  if (rec.producer != instance_id()) throw StateError("attention record was produced by another backend instance");
  const auto tail = std::dynamic_pointer_cast<const OracleTail>(rec.tail);
  if (!tail) throw StateError("attention record carries no oracle activations");
  if (fi.size() != tail->feature.size() || fi != tail->feature) {
    throw StateError("image feature does not belong to this attention record");
  }
  AttentionGradients out;
  out.s_iq = cosine_similarity(fi, fq);
  const double ni = fi.norm();
  const FeatureVector g = (fq / fq.norm() - out.s_iq * fi / ni) / ni;
  const Eigen::RowVectorXd per_patch =
      (tail->coverage * (tail->sources * g)).transpose() / static_cast<double>(rec.heads());
  out.alpha = per_patch.replicate(rec.heads(), 1);
  return out;
}

}  // namespace refground
