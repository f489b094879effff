#include "support.hpp"

#include "refground/records.hpp"
#include "refground/tensor_store.hpp"

#include <json.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <sstream>

using nlohmann::json;
using testing::TempDir;
using testing::slurp;
namespace fs = std::filesystem;

namespace {

std::string quote(const std::string& s) { return "'" + s + "'"; }

int cli(const std::string& args, const fs::path& log = "/dev/null") {
  const std::string cmd = std::string(REFGROUND_CLI) + " " + args + " >" + quote(log.string()) + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

std::vector<json> read_lines(const fs::path& p) {
  std::vector<json> out;
  std::istringstream in(slurp(p));
  for (std::string line; std::getline(in, line);) {
    if (!line.empty()) out.push_back(json::parse(line));
  }
  return out;
}

/// A small synthetic corpus shared by the cases below.
struct Corpus {
  TempDir dir{"cli"};
  fs::path syn = dir.path / "syn";

  Corpus() { REQUIRE(cli("gen-synthetic -n 24 --seed 9 --box-noise 2 -o " + quote(syn.string())) == 0); }

  std::string oracle() const {
    return "--backend oracle --fixture " + quote((syn / "fixture.jsonl").string()) + " --dataset " +
           quote((syn / "instances.jsonl").string()) + " --proposals " + quote((syn / "proposals.jsonl").string());
  }
  std::string first_query() const { return read_lines(syn / "instances.jsonl").at(0).at("query"); }
};

}  // namespace

TEST_CASE("synthetic generation is byte-reproducible") {
  Corpus c;
  const fs::path again = c.dir.path / "again";
  REQUIRE(cli("gen-synthetic -n 24 --seed 9 --box-noise 2 -o " + quote(again.string())) == 0);
  for (const char* f : {"instances.jsonl", "proposals.jsonl", "fixture.jsonl", "manifest.json"}) {
    CHECK(slurp(c.syn / f) == slurp(again / f));
  }
  CHECK(read_json(c.syn / "manifest.json").at("seed") == 9);
}

TEST_CASE("evaluate writes a hashed report and is reproducible") {
  Corpus c;
  const fs::path a = c.dir.path / "a", b = c.dir.path / "b";
  REQUIRE(cli("evaluate " + c.oracle() + " -o " + quote(a.string())) == 0);
  REQUIRE(cli("evaluate " + c.oracle() + " --threads 3 -o " + quote(b.string())) == 0);
  const json report = read_json(a / "report.json");
  CHECK(report.at("accuracy") == 1.0);
  CHECK(report.at("n") == 24);

  const json manifest = read_json(a / "manifest.json");
  const std::string hash = manifest.at("config_hash");
  CHECK(hash.size() == 16);
  CHECK(report.at("config_hash") == hash);
  CHECK(manifest.contains("version"));
  for (const auto& line : read_lines(a / "predictions.jsonl")) CHECK(line.at("config_hash") == hash);

  // Thread count is part of the config, so only the predictions compare equal.
  CHECK(slurp(a / "predictions.jsonl").size() == slurp(b / "predictions.jsonl").size());
  const fs::path a2 = c.dir.path / "a2";
  REQUIRE(cli("evaluate " + c.oracle() + " -o " + quote(a2.string())) == 0);
  CHECK(slurp(a / "predictions.jsonl") == slurp(a2 / "predictions.jsonl"));
  CHECK(slurp(a / "report.json") == slurp(a2 / "report.json"));
}

TEST_CASE("mock backend runs are byte-reproducible") {
  Corpus c;
  const std::string args = "evaluate --backend mock --seed 4 --dataset " + quote((c.syn / "instances.jsonl").string()) +
                           " --proposals " + quote((c.syn / "proposals.jsonl").string());
  const fs::path a = c.dir.path / "ma", b = c.dir.path / "mb";
  REQUIRE(cli(args + " -o " + quote(a.string())) == 0);
  REQUIRE(cli(args + " -o " + quote(b.string())) == 0);
  CHECK(slurp(a / "predictions.jsonl") == slurp(b / "predictions.jsonl"));
  CHECK(slurp(a / "report.json") == slurp(b / "report.json"));
}

TEST_CASE("ground emits the ledger and exports the map") {
  Corpus c;
  const fs::path out = c.dir.path / "g";
  const std::string image = quote((c.syn / "images" / "syn_00000.ppm").string());
  REQUIRE(cli("ground " + c.oracle().substr(0, c.oracle().find(" --dataset")) + " --proposals " +
              quote((c.syn / "proposals.jsonl").string()) + " --image " + image + " --query " + quote(c.first_query()) +
              " --lambda-t 0 --lambda-k 0 --export-map attention -o " + quote(out.string())) == 0);
  const json pred = read_json(out / "prediction.json");
  REQUIRE(pred.at("candidates").size() > 1);
  for (const auto& cand : pred.at("candidates")) CHECK(cand.at("fused") == cand.at("s_bu"));

  const std::string pgm = slurp(out / "attention.pgm");
  CHECK(pgm.rfind("P5\n", 0) == 0);
  CHECK(pgm.find(read_json(out / "manifest.json").at("config_hash").get<std::string>()) != std::string::npos);
  const refground::TensorStore map = refground::TensorStore::load(out / "attention");
  CHECK(map.matrix("map").rows() == 224);
  CHECK(pgm.size() == std::string("P5\n# config_hash 0123456789abcdef\n224 224\n255\n").size() + 224 * 224);
}

TEST_CASE("ground without proposals needs the fallback flag") {
  Corpus c;
  const std::string base = "ground --backend oracle --fixture " + quote((c.syn / "fixture.jsonl").string()) +
                           " --image " + quote((c.syn / "images" / "syn_00001.ppm").string()) + " --query 'red circle'";
  CHECK(cli(base + " -o " + quote((c.dir.path / "n1").string())) == 1);
  CHECK(cli(base + " --allow-missing-proposals -o " + quote((c.dir.path / "n2").string())) == 0);
  CHECK(read_json(c.dir.path / "n2" / "prediction.json").at("candidates").size() == 1);
}

TEST_CASE("mined label counts do not grow with the threshold") {
  Corpus c;
  std::size_t previous = SIZE_MAX;
  for (const char* thr : {"0.6", "0.7", "0.8", "0.9"}) {
    const fs::path out = c.dir.path / (std::string("mine") + thr);
    REQUIRE(cli("mine-pseudo-labels " + c.oracle() + " --thr-k " + thr + " -o " + quote(out.string())) == 0);
    const auto lines = read_lines(out / "pseudo_labels.jsonl");
    CHECK(lines.size() <= previous);
    previous = lines.size();
  }
}

TEST_CASE("train-kam produces a checkpoint, and refuses empty label files") {
  Corpus c;
  const fs::path mined = c.dir.path / "mined", model = c.dir.path / "model";
  REQUIRE(cli("mine-pseudo-labels " + c.oracle() + " --thr-k 0.6 -o " + quote(mined.string())) == 0);
  REQUIRE(cli("train-kam " + c.oracle() + " --epochs 5 --hidden-dim 32 --labels " +
              quote((mined / "pseudo_labels.jsonl").string()) + " -o " + quote(model.string())) == 0);
  CHECK(fs::exists(model / "kam.manifest"));
  CHECK(read_json(model / "training.json").at("loss_trace").size() == 5);
  CHECK(cli("evaluate " + c.oracle() + " --kam true --kam-checkpoint " + quote((model / "kam").string()) + " -o " +
            quote((c.dir.path / "withkam").string())) == 0);

  const fs::path empty = c.dir.path / "empty.jsonl";
  { std::ofstream touch(empty); }
  const fs::path log = c.dir.path / "log.txt";
  CHECK(cli("train-kam " + c.oracle() + " --labels " + quote(empty.string()) + " -o " +
                quote((c.dir.path / "none").string()),
            log) != 0);
  CHECK(slurp(log).find("no usable labels") != std::string::npos);
}

TEST_CASE("config files are overridden by flags, and bad config exits with 2") {
  Corpus c;
  const fs::path cfg = c.dir.path / "cfg.json";
  std::ofstream(cfg) << R"({"fusion": {"lambda_t": 0.0, "selection_mode": "merge_union"}, "seed": 3})";
  const fs::path out = c.dir.path / "cfgrun";
  REQUIRE(cli("evaluate " + c.oracle() + " -c " + quote(cfg.string()) + " --lambda-t 5 -o " + quote(out.string())) == 0);
  const json used = read_json(out / "manifest.json").at("config");
  CHECK(used.at("fusion").at("lambda_t") == 5.0);
  CHECK(used.at("fusion").at("selection_mode") == "merge_union");
  CHECK(used.at("seed") == 3);

  CHECK(cli("evaluate " + c.oracle() + " --lambda-t -1 -o " + quote((c.dir.path / "x").string())) == 2);
  CHECK(cli("evaluate " + c.oracle() + " --selection-mode widest -o " + quote((c.dir.path / "x").string())) == 2);
  CHECK(cli("evaluate --dataset /nonexistent.jsonl -o " + quote((c.dir.path / "x").string())) == 2);
  CHECK(cli("evaluate " + c.oracle() + " --no-such-flag -o " + quote((c.dir.path / "x").string())) == 2);
  std::ofstream(cfg) << "{ not json";
  CHECK(cli("evaluate " + c.oracle() + " -c " + quote(cfg.string()) + " -o " + quote((c.dir.path / "x").string())) == 2);
}
