#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <filesystem>
#include <map>
#include <fstream>
#include <sstream>
#include <unistd.h>

#include "cli.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = mactn::cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("mactn_cli_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string &sub) const { return (path / sub).string(); }
};

std::string slurp(const fs::path &p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// All files under `dir` with their bytes, keyed by relative path.
std::map<std::string, std::string> tree(const fs::path &dir) {
  std::map<std::string, std::string> files;
  for (const auto &e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files[fs::relative(e.path(), dir).string()] = slurp(e.path());
  return files;
}

} // namespace

TEST_CASE("help lists training flags with their defaults") {
  auto r = run({"train", "--help"});
  CHECK(r.code == 0);
  for (const char *s : {"--lr FLOAT [0.001]", "--batch-size UINT [16]", "--epochs UINT [100]",
                        "--flooding-b FLOAT [1.3]", "--weight-decay FLOAT [0.0001]", "--plateau-patience UINT [10]",
                        "--plateau-factor FLOAT [0.1]", "--early-stop-patience UINT [15]", "--scheme", "--workers",
                        "--set"})
    CHECK_MESSAGE(r.out.find(s) != std::string::npos, s);
  auto top = run({"--help"});
  for (const char *s : {"synth", "preprocess", "train", "eval", "explain", "flops", "splits"})
    CHECK(top.out.find(s) != std::string::npos);
}

TEST_CASE("exit codes") {
  TempDir tmp;
  CHECK(run({}).code == mactn::cli::kUsage);
  CHECK(run({"train", "--bogus", "1"}).code == mactn::cli::kUsage);
  CHECK(run({"dance"}).code == mactn::cli::kUsage);
  CHECK(run({"train", "--data", tmp / "absent", "--run-dir", tmp / "r0"}).code == mactn::cli::kMissingInput);
  CHECK(run({"eval", "--checkpoint", tmp / "absent", "--data", tmp / "absent"}).code == mactn::cli::kMissingInput);
  CHECK(run({"flops", "--set", "model.n_layers=3", "--run-dir", tmp / "r1"}).code == mactn::cli::kUsage);
  CHECK(run({"flops", "--set", "train.lr=3", "--run-dir", tmp / "r2"}).code == mactn::cli::kUsage);
  CHECK(run({"flops", "--set", "model.n_heads=\"many\"", "--run-dir", tmp / "r3"}).code == mactn::cli::kUsage);
  CHECK(run({"splits", "--scheme", "kfold", "--ids", "10", "--run-dir", tmp / "r4"}).code == mactn::cli::kUsage);
}

TEST_CASE("range syntax") {
  CHECK(mactn::cli::parse_range("4..18:2") == std::vector<double>{4, 6, 8, 10, 12, 14, 16, 18});
  CHECK(mactn::cli::parse_range("1..3") == std::vector<double>{1, 2, 3});
  CHECK(mactn::cli::parse_range("2,8") == std::vector<double>{2, 8});
  CHECK(mactn::cli::parse_range("0.5..1.5:0.5") == std::vector<double>{0.5, 1.0, 1.5});
}

TEST_CASE("flops sweep is monotone with a run record") {
  TempDir tmp;
  auto r = run({"flops", "--profile", "thu_ep", "--window-s", "4..18:2", "--run-dir", tmp / "f"});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("monotone yes") != std::string::npos);
  const auto csv = slurp(tmp.path / "f" / "flops.csv");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 9);
  CHECK(csv.find("\n14,1750,86,") != std::string::npos);
  auto rec = json::parse(slurp(tmp.path / "f" / "run_config.json"));
  CHECK(rec["command"] == "flops");
  CHECK(rec["model"]["input_len"] == 1750);
}

TEST_CASE("synth, preprocess, train, eval and explain end to end") {
  TempDir tmp;
  auto synth = [&](const std::string &dir) {
    return run({"synth", "--subjects", "3", "--classes", "3", "--channels", "4", "--trial-len-s", "10", "--seed", "1",
                "--run-dir", tmp / dir});
  };
  REQUIRE(synth("a").code == 0);
  REQUIRE(synth("b").code == 0);
  CHECK(tree(tmp.path / "a" / "data") == tree(tmp.path / "b" / "data"));

  auto prep = run({"preprocess", "--input", tmp / "a/data", "--profile", "custom", "--set", "pipeline.window_s=4",
                   "--set", "pipeline.step_s=2", "--run-dir", tmp / "p"});
  REQUIRE(prep.code == 0);
  CHECK(prep.out.find("wrote 72 segments") != std::string::npos);
  CHECK(run({"preprocess", "--input", tmp / "a/data", "--set", "pipeline.window=4", "--run-dir", tmp / "p2"}).code ==
        mactn::cli::kUsage);

  auto train = [&](const std::string &dir) {
    return run({"train", "--data", tmp / "p/segments", "--profile", "miniature", "--scheme", "loso", "--epochs", "2",
                "--seed", "7", "--workers", "2", "--run-dir", tmp / dir});
  };
  auto t1 = train("t1");
  REQUIRE(t1.code == 0);
  CHECK(t1.out.find("mean ± std") != std::string::npos);
  REQUIRE(train("t2").code == 0);
  CHECK(slurp(tmp.path / "t1" / "report.json") == slurp(tmp.path / "t2" / "report.json"));
  CHECK(slurp(tmp.path / "t1" / "fold_1" / "model.blob") == slurp(tmp.path / "t2" / "fold_1" / "model.blob"));
  auto rec = json::parse(slurp(tmp.path / "t1" / "run_config.json"));
  CHECK(rec["seed"] == 7);
  CHECK(rec["train"]["flooding_b"] == 1.3);
  CHECK(rec["model"]["n_channels"] == 4);
  CHECK(rec["scheme"] == "loso");

  // A model head too small for the data is an invariant violation.
  CHECK(run({"train", "--data", tmp / "p/segments", "--profile", "miniature", "--scheme", "loso", "--epochs", "1",
             "--set", "model.n_classes=2", "--run-dir", tmp / "t3"})
            .code == mactn::cli::kInvariant);

  auto ev = run({"eval", "--checkpoint", tmp / "t1/fold_0", "--data", tmp / "p/segments", "--subjects", "s00",
                 "--run-dir", tmp / "e"});
  REQUIRE(ev.code == 0);
  CHECK(json::parse(slurp(tmp.path / "e" / "metrics.json"))["n"] == 24);

  auto ex = run({"explain", "--checkpoint", tmp / "t1/fold_0", "--data", tmp / "p/segments", "--run-dir", tmp / "x"});
  REQUIRE(ex.code == 0);
  for (const char *f : {"explain_channel_all.csv", "explain_channel_all.svg", "explain_kernels_depth.csv",
                        "explain_features_post_gtfe.csv", "explain_selfattn_s00_t000_s00.csv"})
    CHECK_MESSAGE(fs::exists(tmp.path / "x" / f), f);
}

TEST_CASE("splits command") {
  TempDir tmp;
  auto r = run({"splits", "--scheme", "loso", "--ids", "80", "--seed", "3", "--run-dir", tmp / "s"});
  REQUIRE(r.code == 0);
  auto j = json::parse(slurp(tmp.path / "s" / "splits.json"));
  CHECK(j["folds"].size() == 80);
  for (const auto &f : j["folds"]) {
    CHECK(f["train"].size() == 63);
    CHECK(f["val"].size() == 16);
    CHECK(f["test"].size() == 1);
  }
}
