#include "refground/mock_encoder.hpp"
#include "refground/records.hpp"
#include "refground/runner.hpp"
#include "refground/tensor_store.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <set>

#ifndef REFGROUND_VERSION
#define REFGROUND_VERSION "0.0.0"
#endif

namespace fs = std::filesystem;
using nlohmann::json;
using namespace refground;

namespace {

json default_config() {
  return {
      {"backend", "mock"},
      {"seed", 0},
      {"fixture", ""},
      {"threads", 1},
      {"qam", {{"thr_a", 0.7}}},
      {"fusion", {{"lambda_t", 1000.0}, {"lambda_k", 1.0}, {"selection_mode", "largest_above_mean"}}},
      {"use_topdown_map", "query_aware"},
      {"bottom_up_info", "both"},
      {"augment_proposals", true},
      {"use_fusion", true},
      {"qam_only", false},
      {"prompt_template", ""},
      {"eval_mode", "single"},
      {"kam",
       {{"enabled", false},
        {"checkpoint", ""},
        {"thr_k", 0.9},
        {"epochs", 50},
        {"learning_rate", 1e-4},
        {"batch_size", 32},
        {"hidden_dim", 512}}},
  };
}

/// Flag values; unset flags leave the config file untouched.
struct Overrides {
  std::optional<std::string> backend, fixture, selection_mode, use_topdown_map, bottom_up_info, prompt_template,
      eval_mode, kam_checkpoint;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads, epochs, batch_size, hidden_dim;
  std::optional<double> thr_a, lambda_t, lambda_k, thr_k, learning_rate;
  std::optional<bool> augment_proposals, use_fusion, qam_only, kam_enabled;

  void apply(json& cfg) const {
    auto set = [](json& slot, const auto& value) {
      if (value) slot = *value;
    };
    set(cfg["backend"], backend);
    set(cfg["fixture"], fixture);
    set(cfg["seed"], seed);
    set(cfg["threads"], threads);
    set(cfg["qam"]["thr_a"], thr_a);
    set(cfg["fusion"]["lambda_t"], lambda_t);
    set(cfg["fusion"]["lambda_k"], lambda_k);
    set(cfg["fusion"]["selection_mode"], selection_mode);
    set(cfg["use_topdown_map"], use_topdown_map);
    set(cfg["bottom_up_info"], bottom_up_info);
    set(cfg["augment_proposals"], augment_proposals);
    set(cfg["use_fusion"], use_fusion);
    set(cfg["qam_only"], qam_only);
    set(cfg["prompt_template"], prompt_template);
    set(cfg["eval_mode"], eval_mode);
    set(cfg["kam"]["enabled"], kam_enabled);
    set(cfg["kam"]["checkpoint"], kam_checkpoint);
    set(cfg["kam"]["thr_k"], thr_k);
    set(cfg["kam"]["epochs"], epochs);
    set(cfg["kam"]["learning_rate"], learning_rate);
    set(cfg["kam"]["batch_size"], batch_size);
    set(cfg["kam"]["hidden_dim"], hidden_dim);
  }
};

void add_pipeline_flags(CLI::App& cmd, Overrides& o) {
  cmd.add_option("--backend", o.backend, "Encoder backend: mock or oracle");
  cmd.add_option("--fixture", o.fixture, "Scene fixture for the oracle backend");
  cmd.add_option("--seed", o.seed, "Backend and training seed");
  cmd.add_option("--threads", o.threads, "Worker threads");
  cmd.add_option("--thr-a", o.thr_a, "Attention map threshold");
  cmd.add_option("--lambda-t", o.lambda_t, "Weight of the top-down score");
  cmd.add_option("--lambda-k", o.lambda_k, "Weight of the KAM score");
  cmd.add_option("--selection-mode", o.selection_mode, "merge_union or largest_above_mean");
  cmd.add_option("--use-topdown-map", o.use_topdown_map, "query_aware, vanilla_visual or off");
  cmd.add_option("--bottom-up-info", o.bottom_up_info, "both, class_name or visual");
  cmd.add_option("--augment-proposals", o.augment_proposals, "Add the top-down box to the proposals");
  cmd.add_option("--use-fusion", o.use_fusion, "Add the weighted top-down score");
  cmd.add_option("--qam-only", o.qam_only, "Predict the top-down box directly");
  cmd.add_option("--prompt-template", o.prompt_template, "Class-name template containing {}");
  cmd.add_option("--eval-mode", o.eval_mode, "single or merge");
  cmd.add_option("--kam", o.kam_enabled, "Score candidates with a KAM checkpoint");
  cmd.add_option("--kam-checkpoint", o.kam_checkpoint, "KAM checkpoint stem");
  cmd.add_option("--thr-k", o.thr_k, "Pseudo-label threshold");
  cmd.add_option("--epochs", o.epochs, "KAM training epochs");
  cmd.add_option("--learning-rate", o.learning_rate, "KAM learning rate");
  cmd.add_option("--batch-size", o.batch_size, "Images per KAM step");
  cmd.add_option("--hidden-dim", o.hidden_dim, "KAM hidden width");
}

template <typename T>
T get(const json& cfg, const json::json_pointer& ptr) {
  try {
    return cfg.at(ptr).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("config key " + ptr.to_string() + ": " + e.what());
  }
}

json resolve_config(const std::string& config_file, const Overrides& overrides) {
  json cfg = default_config();
  if (!config_file.empty()) {
    std::ifstream in(config_file);
    if (!in) throw ConfigError("cannot open config file " + config_file);
    json user;
    try {
      in >> user;
    } catch (const json::exception& e) {
      throw ConfigError("config file " + config_file + ": " + e.what());
    }
    if (!user.is_object()) throw ConfigError("config file must hold an object");
    cfg.merge_patch(user);
  }
  overrides.apply(cfg);
  return cfg;
}

GroundingOptions grounding_options(const json& cfg) {
  GroundingOptions opt;
  opt.qam.thr_a = get<double>(cfg, "/qam/thr_a"_json_pointer);
  opt.fusion.lambda_t = get<double>(cfg, "/fusion/lambda_t"_json_pointer);
  opt.fusion.lambda_k = get<double>(cfg, "/fusion/lambda_k"_json_pointer);
  opt.fusion.selection_mode = parse_selection_mode(get<std::string>(cfg, "/fusion/selection_mode"_json_pointer));
  opt.top_down = parse_top_down_map(get<std::string>(cfg, "/use_topdown_map"_json_pointer));
  opt.bottom_up = parse_bottom_up_info(get<std::string>(cfg, "/bottom_up_info"_json_pointer));
  opt.augment_proposals = get<bool>(cfg, "/augment_proposals"_json_pointer);
  opt.use_fusion = get<bool>(cfg, "/use_fusion"_json_pointer);
  opt.qam_only = get<bool>(cfg, "/qam_only"_json_pointer);
  opt.prompt_template = get<std::string>(cfg, "/prompt_template"_json_pointer);
  opt.validate();
  return opt;
}

KamTrainConfig train_config(const json& cfg) {
  KamTrainConfig k;
  k.epochs = get<int>(cfg, "/kam/epochs"_json_pointer);
  k.learning_rate = get<double>(cfg, "/kam/learning_rate"_json_pointer);
  k.batch_size = get<int>(cfg, "/kam/batch_size"_json_pointer);
  k.thr_k = get<double>(cfg, "/kam/thr_k"_json_pointer);
  k.hidden_dim = get<int>(cfg, "/kam/hidden_dim"_json_pointer);
  k.seed = get<std::uint64_t>(cfg, "/seed"_json_pointer);
  k.validate();
  return k;
}

int threads_of(const json& cfg) {
  const int t = get<int>(cfg, "/threads"_json_pointer);
  if (t < 1) throw ConfigError("threads must be >= 1");
  return t;
}

void require_path(const std::string& path, const std::string& what) {
  if (path.empty()) throw ConfigError(what + " is required");
  if (!fs::exists(path)) throw ConfigError(what + " not found: " + path);
}

std::unique_ptr<EncoderBackend> make_backend(const json& cfg) {
  const auto name = get<std::string>(cfg, "/backend"_json_pointer);
  const auto seed = get<std::uint64_t>(cfg, "/seed"_json_pointer);
  if (name == "mock") {
    MockEncoderConfig m;
    m.seed = seed;
    return std::make_unique<MockTransformerEncoder>(m);
  }
  if (name == "oracle") {
    const auto fixture = get<std::string>(cfg, "/fixture"_json_pointer);
    require_path(fixture, "fixture");
    OracleEncoderConfig o;
    o.seed = seed;
    return std::make_unique<SceneOracleEncoder>(read_fixture(fixture), o);
  }
  throw ConfigError("unknown backend '" + name + "'");
}

std::optional<KamModel> load_kam_if_enabled(const json& cfg) {
  if (!get<bool>(cfg, "/kam/enabled"_json_pointer)) return std::nullopt;
  const auto stem = get<std::string>(cfg, "/kam/checkpoint"_json_pointer);
  require_path(stem + ".manifest", "kam checkpoint");
  return load_kam(stem);
}

/// Resolved config, its hash and the output directory of one run.
struct Run {
  std::string command;
  json config;
  std::string hash;
  fs::path out_dir;
  std::vector<std::string> outputs;

  Run(std::string cmd, json cfg, const std::string& out) : command(std::move(cmd)), config(std::move(cfg)) {
    if (out.empty()) throw ConfigError("--out-dir is required");
    out_dir = out;
    fs::create_directories(out_dir);
    hash = config_hash(json{{"command", command}, {"config", config}});
  }

  fs::path output(const std::string& name) {
    outputs.push_back(name);
    return out_dir / name;
  }

  void write_json(const std::string& name, json value) {
    value["config_hash"] = hash;
    std::ofstream(output(name), std::ios::binary) << value.dump(2) << '\n';
  }

  void write_manifest() const {
    const json manifest = {{"command", command},
                           {"config", config},
                           {"config_hash", hash},
                           {"seed", config.at("seed")},
                           {"version", REFGROUND_VERSION},
                           {"outputs", outputs}};
    std::ofstream(out_dir / "manifest.json", std::ios::binary) << manifest.dump(2) << '\n';
  }
};

std::vector<GroundingInstance> load_instances(const std::string& path, const std::string& format) {
  require_path(path, "dataset");
  const LoadReport r = load_dataset(path, parse_dataset_format(format));
  for (const auto& e : r.errors) std::cerr << "warning: " << e << '\n';
  if (!r.skipped.empty()) std::cerr << "note: " << r.skipped.size() << " phrases without boxes skipped\n";
  return r.instances;
}

ProposalMap load_proposals(const std::string& path) {
  require_path(path, "proposals");
  ProposalLoad p = read_proposals(path);
  for (const auto& w : p.warnings) std::cerr << "warning: " << w << '\n';
  return std::move(p.proposals);
}

fs::path image_root(const std::string& images_root, const std::string& dataset) {
  if (!images_root.empty()) return images_root;
  const fs::path p(dataset);
  return fs::is_directory(p) ? p : p.parent_path();
}

struct CommonArgs {
  std::string config_file;
  std::string out_dir;
  Overrides overrides;
};

void add_common(CLI::App& cmd, CommonArgs& a) {
  cmd.add_option("-c,--config", a.config_file, "JSON config file");
  cmd.add_option("-o,--out-dir", a.out_dir, "Directory for outputs and the run manifest")->required();
  add_pipeline_flags(cmd, a.overrides);
}

struct GroundArgs : CommonArgs {
  std::string image, image_id, query, proposals, export_map;
  bool allow_missing = false;
};

int cmd_ground(const GroundArgs& a) {
  Run run("ground", resolve_config(a.config_file, a.overrides), a.out_dir);
  const GroundingOptions opt = grounding_options(run.config);
  require_path(a.image, "image");
  const auto backend = make_backend(run.config);
  const auto kam = load_kam_if_enabled(run.config);
  const std::string id = a.image_id.empty() ? fs::path(a.image).stem().string() : a.image_id;

  std::vector<Proposal> props;
  if (!a.proposals.empty()) {
    const ProposalMap all = load_proposals(a.proposals);
    const auto it = all.find(id);
    if (it != all.end()) {
      props = it->second;
    } else if (!a.allow_missing) {
      throw DomainError("proposal file has no entry for image '" + id + "'");
    }
  } else if (!a.allow_missing) {
    throw DomainError("no proposal file given; pass --allow-missing-proposals for a top-down-only run");
  }

  const Grounder grounder(*backend, opt, kam ? &*kam : nullptr);
  const Image image = read_ppm(a.image, id);
  Prediction pred = grounder.ground(image, id, a.query, props, !a.export_map.empty());
  const json record = prediction_to_json(pred);
  run.write_json("prediction.json", record);
  if (!a.export_map.empty()) {
    if (!pred.map) throw DomainError("--export-map needs a top-down map");
    write_pgm(run.output(a.export_map + ".pgm"), to_grayscale(*pred.map), static_cast<int>(pred.map->values.cols()),
              static_cast<int>(pred.map->values.rows()), "config_hash " + run.hash);
    TensorStore store;
    store.metadata = {{"config_hash", run.hash}, {"image_id", id}, {"query", a.query}};
    store.add_matrix("map", pred.map->values.matrix());
    store.save(run.out_dir / a.export_map);
    run.outputs.push_back(a.export_map + ".manifest");
    run.outputs.push_back(a.export_map + ".bin");
  }
  run.write_manifest();
  std::cout << record.dump() << '\n';
  return 0;
}

struct EvaluateArgs : CommonArgs {
  std::string dataset, format = "internal", proposals, images_root, predictions;
  bool allow_missing = false;
};

int cmd_evaluate(const EvaluateArgs& a) {
  Run run("evaluate", resolve_config(a.config_file, a.overrides), a.out_dir);
  const EvalMode mode = parse_eval_mode(get<std::string>(run.config, "/eval_mode"_json_pointer));
  const auto instances = load_instances(a.dataset, a.format);
  std::vector<PredictionRecord> records;
  if (!a.predictions.empty()) {
    require_path(a.predictions, "predictions");
    records = read_prediction_records(a.predictions);
  } else {
    const GroundingOptions opt = grounding_options(run.config);
    const int threads = threads_of(run.config);
    const auto backend = make_backend(run.config);
    const auto kam = load_kam_if_enabled(run.config);
    const ProposalMap proposals = load_proposals(a.proposals);
    const Grounder grounder(*backend, opt, kam ? &*kam : nullptr);
    const auto preds = ground_all(grounder, instances, proposals, ppm_images(instances, image_root(a.images_root, a.dataset)),
                                  threads, a.allow_missing);
    std::vector<json> lines;
    for (const auto& p : preds) lines.push_back(prediction_to_json(p));
    write_jsonl(run.output("predictions.jsonl"), lines, run.hash);
    records = to_records(preds);
  }
  const AccuracyReport report = evaluate(instances, records, mode);
  run.write_json("report.json", report_to_json(report));
  run.write_manifest();
  std::cout << "accuracy " << report.accuracy << " over " << report.n << " instances";
  if (report.missing) std::cout << " (" << report.missing << " missing)";
  std::cout << '\n';
  return 0;
}

struct MineArgs : CommonArgs {
  std::string dataset, format = "internal", proposals, images_root, queries;
};

std::vector<std::string> read_query_pool(const std::string& path) {
  require_path(path, "query pool");
  std::ifstream in(path);
  std::vector<std::string> pool;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) pool.push_back(line);
  }
  if (pool.empty()) throw DomainError("query pool is empty");
  return pool;
}

int cmd_mine(const MineArgs& a) {
  Run run("mine-pseudo-labels", resolve_config(a.config_file, a.overrides), a.out_dir);
  const GroundingOptions opt = grounding_options(run.config);
  const KamTrainConfig kcfg = train_config(run.config);
  const int threads = threads_of(run.config);
  const auto instances = load_instances(a.dataset, a.format);
  const auto backend = make_backend(run.config);
  const ProposalMap proposals = load_proposals(a.proposals);

  std::set<std::string> ids;
  std::vector<std::string> pool;
  std::set<std::string> seen;
  for (const auto& inst : instances) {
    ids.insert(inst.image_id);
    if (seen.insert(inst.query).second) pool.push_back(inst.query);
  }
  if (!a.queries.empty()) pool = read_query_pool(a.queries);

  const Grounder grounder(*backend, opt);
  const MiningReport r = mine(grounder, {ids.begin(), ids.end()}, pool, proposals,
                              ppm_images(instances, image_root(a.images_root, a.dataset)), kcfg.thr_k, threads);
  for (const auto& s : r.skipped) std::cerr << "skipped: " << s << '\n';
  std::vector<json> lines;
  for (const auto& l : r.labels) lines.push_back(pseudo_label_to_json(l));
  write_jsonl(run.output("pseudo_labels.jsonl"), lines, run.hash);
  run.write_manifest();
  std::cout << r.labels.size() << " pseudo labels at thr_k " << kcfg.thr_k << '\n';
  return 0;
}

struct TrainArgs : CommonArgs {
  std::string labels, dataset, format = "internal", proposals, images_root;
};

int cmd_train(const TrainArgs& a) {
  Run run("train-kam", resolve_config(a.config_file, a.overrides), a.out_dir);
  const KamTrainConfig kcfg = train_config(run.config);
  require_path(a.labels, "labels");
  const auto labels = read_pseudo_labels(a.labels);
  if (labels.empty()) throw TrainingError("no usable labels in " + a.labels);
  const auto instances = load_instances(a.dataset, a.format);
  const auto backend = make_backend(run.config);
  const ProposalMap proposals = load_proposals(a.proposals);
  const ExampleBuild built =
      build_kam_examples(labels, proposals, ppm_images(instances, image_root(a.images_root, a.dataset)), *backend);
  for (const auto& u : built.unusable) std::cerr << "unusable: " << u << '\n';
  const KamTrainResult result = train_kam(built.examples, kcfg);
  save_kam(result.model, run.out_dir / "kam",
           {{"config_hash", run.hash}, {"backend", backend->id()}, {"seed", std::to_string(kcfg.seed)},
            {"epochs", std::to_string(kcfg.epochs)}});
  run.outputs.push_back("kam.manifest");
  run.outputs.push_back("kam.bin");
  run.write_json("training.json", {{"loss_trace", result.loss_trace},
                                   {"validation_trace", result.validation_trace},
                                   {"train_images", result.train_images},
                                   {"validation_images", result.validation_images},
                                   {"unusable", built.unusable}});
  run.write_manifest();
  std::cout << "trained on " << result.train_images << " images; loss " << result.loss_trace.front() << " -> "
            << result.loss_trace.back() << '\n';
  return 0;
}

struct SyntheticArgs {
  std::string config_file, out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<int> n;
  std::optional<double> box_noise, class_noise, distractor_rate;
};

int cmd_gen_synthetic(const SyntheticArgs& a) {
  json cfg = {{"seed", 0}, {"n", 200}, {"box_noise", 0.0}, {"class_noise", 0.0}, {"distractor_rate", 0.0}};
  if (!a.config_file.empty()) {
    const json full = resolve_config(a.config_file, {});
    for (const char* key : {"seed", "box_noise", "class_noise", "distractor_rate", "n"}) {
      if (full.contains(key)) cfg[key] = full[key];
    }
  }
  if (a.n) cfg["n"] = *a.n;
  if (a.seed) cfg["seed"] = *a.seed;
  if (a.box_noise) cfg["box_noise"] = *a.box_noise;
  if (a.class_noise) cfg["class_noise"] = *a.class_noise;
  if (a.distractor_rate) cfg["distractor_rate"] = *a.distractor_rate;

  Run run("gen-synthetic", cfg, a.out_dir);
  SyntheticWorldConfig w;
  w.seed = get<std::uint64_t>(cfg, "/seed"_json_pointer);
  w.box_noise = get<double>(cfg, "/box_noise"_json_pointer);
  w.class_noise = get<double>(cfg, "/class_noise"_json_pointer);
  w.distractor_rate = get<double>(cfg, "/distractor_rate"_json_pointer);
  w.validate();
  const int n = get<int>(cfg, "/n"_json_pointer);
  if (n < 1) throw ConfigError("instance count must be >= 1");
  write_synthetic(run.out_dir, generate_synthetic(w, n));
  run.outputs = {"instances.jsonl", "proposals.jsonl", "fixture.jsonl", "images/"};
  run.write_manifest();
  std::cout << "wrote " << n << " instances to " << run.out_dir.string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Referring expression grounding without paired training data"};
  app.set_version_flag("--version", std::string(REFGROUND_VERSION));
  app.require_subcommand(1);

  GroundArgs ground;
  auto* g = app.add_subcommand("ground", "Ground one query in one image");
  add_common(*g, ground);
  g->add_option("--image", ground.image, "PPM image")->required();
  g->add_option("--image-id", ground.image_id, "Image id used to look up proposals (default: file stem)");
  g->add_option("--query", ground.query, "Referring expression")->required();
  g->add_option("--proposals", ground.proposals, "Proposal file");
  g->add_flag("--allow-missing-proposals", ground.allow_missing, "Fall back to the top-down box alone");
  g->add_option("--export-map", ground.export_map, "Write the attention map as <name>.pgm plus a tensor file");

  EvaluateArgs eval;
  auto* e = app.add_subcommand("evaluate", "Ground a dataset and report accuracy");
  add_common(*e, eval);
  e->add_option("--dataset", eval.dataset, "Dataset file or directory")->required();
  e->add_option("--format", eval.format, "internal, flickr_entities or referit");
  e->add_option("--proposals", eval.proposals, "Proposal file");
  e->add_option("--images-root", eval.images_root, "Base directory for relative image paths");
  e->add_option("--predictions", eval.predictions, "Score an existing prediction file instead of grounding");
  e->add_flag("--allow-missing-proposals", eval.allow_missing, "Ground images without proposals top-down only");

  MineArgs mine_args;
  auto* m = app.add_subcommand("mine-pseudo-labels", "Pair images with queries and keep confident boxes");
  add_common(*m, mine_args);
  m->add_option("--dataset", mine_args.dataset, "Image pool (dataset file)")->required();
  m->add_option("--format", mine_args.format, "internal, flickr_entities or referit");
  m->add_option("--proposals", mine_args.proposals, "Proposal file")->required();
  m->add_option("--images-root", mine_args.images_root, "Base directory for relative image paths");
  m->add_option("--queries", mine_args.queries, "Query pool, one per line (default: the dataset's queries)");

  TrainArgs train;
  auto* t = app.add_subcommand("train-kam", "Train the adaptation scorer on pseudo labels");
  add_common(*t, train);
  t->add_option("--labels", train.labels, "Pseudo-label file")->required();
  t->add_option("--dataset", train.dataset, "Dataset giving the image paths")->required();
  t->add_option("--format", train.format, "internal, flickr_entities or referit");
  t->add_option("--proposals", train.proposals, "Proposal file")->required();
  t->add_option("--images-root", train.images_root, "Base directory for relative image paths");

  SyntheticArgs syn;
  auto* s = app.add_subcommand("gen-synthetic", "Write a synthetic shapes corpus");
  s->add_option("-c,--config", syn.config_file, "JSON config file");
  s->add_option("-o,--out-dir", syn.out_dir, "Output directory")->required();
  s->add_option("-n,--count", syn.n, "Number of instances");
  s->add_option("--seed", syn.seed, "Generator seed");
  s->add_option("--box-noise", syn.box_noise, "Proposal jitter in pixels");
  s->add_option("--class-noise", syn.class_noise, "Probability of a wrong class name");
  s->add_option("--distractor-rate", syn.distractor_rate, "Fraction of referents without a proposal");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*g) return cmd_ground(ground);
    if (*e) return cmd_evaluate(eval);
    if (*m) return cmd_mine(mine_args);
    if (*t) return cmd_train(train);
    if (*s) return cmd_gen_synthetic(syn);
  } catch (const ConfigError& err) {
    std::cerr << "config error: " << err.what() << '\n';
    return 2;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 1;
  }
  return 2;
}
