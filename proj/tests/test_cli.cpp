#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "gdream/checkpoint.hpp"
#include "gdream/cli.hpp"
#include "gdream/error.hpp"
#include "gdream/report.hpp"

using namespace gdream;
namespace fs = std::filesystem;

namespace {

const fs::path kData = GDREAM_DATA_DIR;

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result gdream_cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string bytes_of(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::vector<std::string> pair_args() {
  return {"--motion",
          (kData / "walk.json").string(),
          "--source",
          (kData / "biped.urdf").string(),
          "--source-keys",
          (kData / "biped_keys.json").string(),
          "--target",
          (kData / "biped_tall.urdf").string(),
          "--target-keys",
          (kData / "biped_tall_keys.json").string()};
}

std::vector<std::string> operator+(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& leaf) const { return (path / leaf).string(); }
};

}  // namespace

TEST_CASE("parse-urdf output parses back to the same graph") {
  TempDir dir("gdream_cli_urdf");
  const auto first = gdream_cli({"parse-urdf", (kData / "biped.urdf").string(), "--key-joints",
                                 (kData / "biped_keys.json").string(), "--out", dir / "g.json"});
  REQUIRE(first.code == 0);
  CHECK(first.out.find("7 joints, 6 key joints") != std::string::npos);
  REQUIRE(gdream_cli({"parse-urdf", dir / "g.json", "--out", dir / "g2.json"}).code == 0);

  const SkeletonGraph a = load_graph(dir / "g.json");
  CHECK(a == load_graph(dir / "g2.json"));
  CHECK(bytes_of(dir / "g.json") == bytes_of(dir / "g2.json"));
  CHECK(a.name == "biped");
  CHECK(a.joint_names[a.key_joint("LeftKnee")] == "left_knee");

  REQUIRE(gdream_cli({"parse-urdf", dir / "g.json", "--name", "renamed", "--out", dir / "g3.json"}).code == 0);
  CHECK(load_graph(dir / "g3.json").name == "renamed");
}

TEST_CASE("config files") {
  const RunConfig c = load_run_config((kData / "config.json").string());
  CHECK(c.graphs.size() == 2);
  CHECK(c.new_graphs.size() == 1);
  CHECK(c.model.latent == 32);
  CHECK(c.training.adam.decay_steps == 2000);
  CHECK(c.training.seed == c.seed);
  CHECK(fs::path(c.motions[0]).is_absolute() == fs::path(GDREAM_DATA_DIR).is_absolute());

  SUBCASE("defaults follow the training table") {
    const RunConfig d = parse_run_config(nlohmann::json::object());
    CHECK(d.model.latent == 240);
    CHECK(d.model.layers == 4);
    CHECK(d.model.heads == 6);
    CHECK(d.model.ffn_dim == 1024);
    CHECK(d.model.temporal_window == 31);
    CHECK(d.model.dropout == 0.1);
    CHECK(d.training.batch_size == 16);
    CHECK(d.training.adam.learning_rate == 1e-4);
    CHECK(d.guidance.lambda == 1e4);
    CHECK(d.guidance.similar == 100.0);
    CHECK(d.guidance.velocity == 900.0);
    CHECK(d.schedule_steps == 1000);
  }
  SUBCASE("bad configs") {
    CHECK_THROWS_AS(parse_run_config({{"grafs", nlohmann::json::array()}}), ConfigError);
    CHECK_THROWS_AS(parse_run_config({{"model", {{"latent", 30}, {"heads", 4}}}}), ConfigError);
    CHECK_THROWS_AS(parse_run_config({{"training", {{"batch_size", "many"}}}}), ConfigError);
    CHECK_THROWS_AS(parse_run_config({{"motions", {"no/such/clip.json"}}}), ConfigError);
    CHECK_THROWS_AS(parse_run_config({{"schedule", {{"sigma_min", 5.0}, {"sigma_max", 1.0}}}}), ConfigError);
  }
}

TEST_CASE("train, retarget, baseline, evaluate and report") {
  TempDir dir("gdream_cli_flow");
  const std::string config = (kData / "config.json").string();

  const auto manifest = gdream_cli({"build-dataset", "--config", config, "--out", dir / "manifest.json"});
  REQUIRE(manifest.code == 0);
  const auto m = nlohmann::json::parse(bytes_of(dir / "manifest.json"));
  // One motion, two targets, one augmented copy each.
  CHECK(m["samples"].size() == 4);

  const auto trained = gdream_cli({"train", "--config", config, "--steps", "4", "--out", dir / "run"});
  REQUIRE_MESSAGE(trained.code == 0, trained.err);
  const Checkpoint ckpt = load_checkpoint(dir / "run/model.ckpt");
  CHECK(ckpt.step == 4);
  CHECK(fs::exists(dir / "run/metrics.jsonl"));

  const auto resumed = gdream_cli({"train", "--config", config, "--steps", "2", "--checkpoint", dir / "run/model.ckpt",
                                   "--out", dir / "resumed"});
  REQUIRE(resumed.code == 0);
  CHECK(load_checkpoint(dir / "resumed/model.ckpt").step == 6);

  const auto retarget = [&](const std::string& out) {
    return gdream_cli(std::vector<std::string>{"retarget", "--checkpoint", dir / "run/model.ckpt", "--seed", "7",
                                               "--steps", "5", "--out", out} +
                      pair_args());
  };
  REQUIRE(retarget(dir / "a.json").code == 0);
  REQUIRE(retarget(dir / "b.json").code == 0);
  CHECK(bytes_of(dir / "a.json") == bytes_of(dir / "b.json"));

  const auto baseline = gdream_cli(std::vector<std::string>{"baseline", "--steps", "300", "--out", dir / "base.json"} +
                                   pair_args());
  REQUIRE(baseline.code == 0);

  const auto evaluated = gdream_cli(std::vector<std::string>{"evaluate", "--pred", "diffusion=" + dir / "a.json",
                                                             "--pred", "baseline=" + dir / "base.json", "--out",
                                                             dir / "eval.json"} +
                                    pair_args());
  REQUIRE(evaluated.code == 0);
  const Evaluation e = evaluation_from_json(nlohmann::json::parse(bytes_of(dir / "eval.json")));
  CHECK(e.embodiment == "biped_tall");
  REQUIRE(e.mse.count("diffusion") == 1);
  REQUIRE(e.mse.count("baseline") == 1);
  CHECK(e.mse.at("baseline") < e.mse.at("diffusion"));
  CHECK(e.alpha == doctest::Approx(2.0).epsilon(1e-12));

  const auto report = gdream_cli({"report", "--eval", dir / "eval.json", "--out", dir / "report"});
  REQUIRE(report.code == 0);
  const std::string table = bytes_of(dir / "report/table.md");
  CHECK(table.find("| baseline |") != std::string::npos);
  CHECK(table.find("| diffusion |") != std::string::npos);
  CHECK(bytes_of(dir / "report/table.csv").rfind("method,biped_tall\n", 0) == 0);
  const std::string svg = bytes_of(dir / "report/biped_tall.svg");
  CHECK(svg.rfind("<svg", 0) == 0);
  // Six key joints, reference and prediction, in each of two panels.
  std::size_t lines = 0;
  for (auto at = svg.find("<polyline"); at != std::string::npos; at = svg.find("<polyline", at + 1)) ++lines;
  CHECK(lines == 24);

  const auto adapted = gdream_cli({"adapt", "--config", config, "--checkpoint", dir / "run/model.ckpt", "--steps", "2",
                                   "--out", dir / "adapted"});
  REQUIRE_MESSAGE(adapted.code == 0, adapted.err);
  const Checkpoint a = load_checkpoint(dir / "adapted/model.ckpt");
  CHECK(a.step == 6);
  CHECK(a.meta["adapted_embodiments"] == nlohmann::json::array({"biped_short"}));
}

TEST_CASE("errors exit nonzero with a message") {
  TempDir dir("gdream_cli_errors");
  CHECK(gdream_cli({}).code == 2);
  CHECK(gdream_cli({"frobnicate"}).code == 2);
  CHECK(gdream_cli({"parse-urdf", "--out", dir / "g.json"}).code == 2);
  CHECK(gdream_cli({"parse-urdf", dir / "missing.urdf", "--out", dir / "g.json"}).code == 2);
  CHECK(gdream_cli({"--help"}).code == 0);

  std::ofstream(dir / "bad.urdf") << "<robot name='x'><link name='a'/><link name='b'/>"
                                     "<joint name='j' type='prismatic'><parent link='a'/><child link='b'/></joint>"
                                     "</robot>";
  const auto unsupported = gdream_cli({"parse-urdf", dir / "bad.urdf", "--out", dir / "g.json"});
  CHECK(unsupported.code == 1);
  CHECK(unsupported.err.find("prismatic") != std::string::npos);
  CHECK(!fs::exists(dir / "g.json"));

  std::ofstream(dir / "config.json") << R"({"seed": 1, "modle": {}})";
  const auto bad_config = gdream_cli({"train", "--config", dir / "config.json", "--out", dir / "run"});
  CHECK(bad_config.code == 1);
  CHECK(bad_config.err.find("modle") != std::string::npos);
  CHECK(!fs::exists(dir / "run"));

  const auto bad_pred = gdream_cli(std::vector<std::string>{"evaluate", "--pred", "nolabel", "--out", dir / "e.json"} +
                                   pair_args());
  CHECK(bad_pred.code == 1);
  CHECK(bad_pred.err.find("label=path") != std::string::npos);
}
