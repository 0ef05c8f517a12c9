#include <sys/wait.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "doctest.h"

namespace fs = std::filesystem;

namespace {

const std::string kCast = CAST_BINARY;
const std::string kSmoke = CAST_SOURCE_DIR "/configs/smoke.yaml";
const std::string kDefault = CAST_SOURCE_DIR "/configs/default.yaml";

int run(const std::string& args) {
  const std::string cmd = kCast + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

struct Workdir {
  fs::path path;
  explicit Workdir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~Workdir() { fs::remove_all(path); }
  std::string str() const { return path.string(); }
};

}  // namespace

TEST_CASE("usage errors exit 2") {
  CHECK(run("") == 2);
  CHECK(run("pretrain") == 2);
  CHECK(run("pretrain --config /nonexistent/cast.yaml") == 2);
  CHECK(run("train --config " + kSmoke + " --strategy middle") == 2);
  CHECK(run("diagnose --config " + kSmoke + " --score gradient") == 2);
  CHECK(run("frobnicate --config " + kSmoke) == 2);
}

TEST_CASE("bad config contents exit 2") {
  Workdir w("cast_cli_badcfg");
  std::ofstream(w.path / "bad.yaml") << "train: {learning_rate: 1}\n";
  CHECK(run("pretrain --config " + (w.path / "bad.yaml").string()) == 2);
}

TEST_CASE("pretrain, diagnose, train and eval chain through the CLI") {
  Workdir w("cast_cli_chain");
  const std::string out = " --out " + w.str();
  REQUIRE(run("pretrain --config " + kSmoke + out) == 0);
  REQUIRE(fs::exists(w.path / "base.ckpt"));
  CHECK(fs::exists(w.path / "base_eval.json"));
  const std::string ckpt = slurp(w.path / "base.ckpt");

  SUBCASE("pretraining is byte-reproducible") {
    Workdir w2("cast_cli_chain2");
    REQUIRE(run("pretrain --config " + kSmoke + " --out " + w2.str()) == 0);
    CHECK(slurp(w2.path / "base.ckpt") == ckpt);
  }

  SUBCASE("diagnose writes one row per head, reproducibly") {
    REQUIRE(run("diagnose --config " + kSmoke + out) == 0);
    const std::string csv = slurp(w.path / "conflict_map.csv");
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 4);
    REQUIRE(run("diagnose --config " + kSmoke + out) == 0);
    CHECK(slurp(w.path / "conflict_map.csv") == csv);
    CHECK(run("diagnose --config " + kSmoke + out + " --score o_only") == 0);
    CHECK(run("diagnose --config " + kSmoke + out + " --score s_only") == 0);
    CHECK(fs::exists(w.path / "conflict_map_o_only.csv"));
    CHECK(fs::exists(w.path / "conflict_map_s_only.json"));
  }

  SUBCASE("train writes an aligned checkpoint and history") {
    REQUIRE(run("diagnose --config " + kSmoke + out) == 0);
    REQUIRE(run("train --config " + kSmoke + out + " --strategy bucket --bucket 2 --pcgrad") == 0);
    CHECK(fs::exists(w.path / "aligned.ckpt"));
    const auto h = nlohmann::json::parse(slurp(w.path / "history.json"));
    CHECK(h["heads"].size() == 2);
    CHECK(h["config"]["pcgrad"] == true);
    CHECK(h["reference_dots"].size() == h["step_losses"].size());

    // A map computed for the base does not match the aligned checkpoint.
    CHECK(run("train --config " + kSmoke + out + " --checkpoint " +
              (w.path / "aligned.ckpt").string()) == 3);
    CHECK(run("eval --config " + kSmoke + " --checkpoint " + (w.path / "aligned.ckpt").string()) ==
          0);
  }

  SUBCASE("checkpoint built for another model config is an integrity error") {
    CHECK(run("eval --config " + kDefault + " --checkpoint " + (w.path / "base.ckpt").string()) ==
          3);
  }

  SUBCASE("corrupt checkpoint is an integrity error") {
    std::string bad = ckpt;
    bad[bad.size() - 3] ^= 0x10;
    std::ofstream(w.path / "bad.ckpt", std::ios::binary) << bad;
    CHECK(run("eval --config " + kSmoke + " --checkpoint " + (w.path / "bad.ckpt").string()) == 3);
  }

  SUBCASE("missing map is an input error") {
    CHECK(run("train --config " + kSmoke + out + " --map " + (w.path / "none.json").string()) ==
          2);
  }
}

TEST_CASE("unreachable pretraining target exits 1") {
  Workdir w("cast_cli_target");
  std::string text = slurp(kSmoke);
  const auto pos = text.find("target_accuracy: 0.5");
  REQUIRE(pos != std::string::npos);
  text.replace(pos, 20, "target_accuracy: 1.0");
  const auto steps = text.find("max_steps: 1500");
  REQUIRE(steps != std::string::npos);
  text.replace(steps, 15, "max_steps: 10");
  std::ofstream(w.path / "hard.yaml") << text;
  CHECK(run("pretrain --config " + (w.path / "hard.yaml").string() + " --out " + w.str()) == 1);
}

TEST_CASE("experiment writes the consolidated outputs") {
  Workdir w("cast_cli_experiment");
  REQUIRE(run("experiment --config " + kSmoke + " --out " + w.str()) == 0);
  for (const char* f : {"report.json", "arms.csv", "conflict_map.csv", "conflict_map.json",
                        "histories.json", "base.ckpt"}) {
    CHECK(fs::exists(w.path / f));
  }
  const auto r = nlohmann::json::parse(slurp(w.path / "report.json"));
  CHECK(r["runs"].size() == 5 * 2);
  const std::string csv = slurp(w.path / "arms.csv");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 10);
}
