// SPDX-License-Identifier: Apache-2.0
//
// End-to-end checks of the command-line surface: artifact layout, exit
// codes, and the generate/train/decode/evaluate pipeline. The binary path
// arrives via the RNNTAUX_CLI environment variable.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "doctest.h"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string cli() {
  const char* path = std::getenv("RNNTAUX_CLI");
  REQUIRE_MESSAGE(path != nullptr, "RNNTAUX_CLI must point at the binary");
  return path;
}

struct Sandbox {
  fs::path dir;
  Sandbox() {
    dir = fs::temp_directory_path() / ("rnntaux_cli_" + std::to_string(::getpid()));
    fs::create_directories(dir);
  }
  ~Sandbox() { fs::remove_all(dir); }
  std::string path(const std::string& name) const { return (dir / name).string(); }
};

int run(const std::string& args) {
  const std::string cmd = cli() + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  REQUIRE(status != -1);
  return WEXITSTATUS(status);
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
}

const char* kTinyConfig = R"({
  "seed": 5,
  "model": {"encoder_hidden": 16, "pred_hidden": 12, "joint_hidden": 24,
            "aux_mlp_hidden": 16},
  "train": {"max_steps": 30, "batch_size": 2, "eval_every": 15},
  "data": {"task": {"base_symbols": 4, "feature_dim": 8, "u_min": 2, "u_max": 4,
                    "noise_std": 0.1},
           "n_train": 12, "n_valid": 6, "n_test": 6},
  "decode": {"beam": 2}
})";

}  // namespace

TEST_CASE("usage errors exit with code 1") {
  CHECK(run("no-such-command") == 1);
  CHECK(run("train") == 1);  // missing required flags
  CHECK(run("--help") == 0);
}

TEST_CASE("rejected config keys exit with code 1") {
  Sandbox sb;
  write_file(sb.path("bad.json"), R"({"seed": 1, "typo_section": {}})");
  CHECK(run("generate-data --config " + sb.path("bad.json") + " --out " + sb.path("d")) ==
        1);
  write_file(sb.path("bad2.json"), R"({"train": {"max_stepz": 10}})");
  CHECK(run("generate-data --config " + sb.path("bad2.json") + " --out " + sb.path("d")) ==
        1);
}

TEST_CASE("missing files exit with code 2") {
  Sandbox sb;
  CHECK(run("decode --checkpoint " + sb.path("nope.bin") + " --data " +
            sb.path("nope.jsonl") + " --out " + sb.path("d")) == 2);
}

TEST_CASE("verification commands succeed on the shipped defaults") {
  CHECK(run("oracle-check --instances 60") == 0);
  CHECK(run("gradcheck --mode baseline") == 0);
}

TEST_CASE("the full pipeline produces the documented artifacts") {
  Sandbox sb;
  write_file(sb.path("config.json"), kTinyConfig);
  const std::string cfg = " --config " + sb.path("config.json");

  REQUIRE(run("generate-data" + cfg + " --out " + sb.path("data")) == 0);
  CHECK(fs::exists(sb.path("data/train.jsonl")));
  CHECK(fs::exists(sb.path("data/valid.jsonl")));
  CHECK(fs::exists(sb.path("data/test.jsonl")));
  CHECK(fs::exists(sb.path("data/config.json")));

  // config echo materializes every default
  {
    std::ifstream in(sb.path("data/config.json"));
    json echoed = json::parse(in);
    CHECK(echoed.at("train").at("lambda_aux").get<double>() == 0.3);
    CHECK(echoed.at("train").at("lambda_ce").get<double>() == 0.6);
    CHECK(echoed.at("train").at("warmup_steps").get<int>() == 3);
  }

  REQUIRE(run("train" + cfg + " --data-dir " + sb.path("data") + " --out " +
              sb.path("run")) == 0);
  CHECK(fs::exists(sb.path("run/checkpoint.bin")));
  CHECK(fs::exists(sb.path("run/metrics.jsonl")));

  REQUIRE(run("decode --checkpoint " + sb.path("run/checkpoint.bin") + " --data " +
              sb.path("data/test.jsonl") + " --out " + sb.path("dec") + " --beam 2") == 0);
  CHECK(fs::exists(sb.path("dec/nbest.jsonl")));
  {
    std::ifstream in(sb.path("dec/nbest.jsonl"));
    std::string line;
    std::size_t lines = 0;
    while (std::getline(in, line)) {
      json j = json::parse(line);
      CHECK(j.contains("id"));
      REQUIRE(j.at("hyps").is_array());
      CHECK(j.at("hyps").size() >= 1);
      ++lines;
    }
    CHECK(lines == 6);
  }

  REQUIRE(run("evaluate --refs " + sb.path("data/test.jsonl") + " --hyps " +
              sb.path("dec/nbest.jsonl") + " --out " + sb.path("eval") +
              " --set-name test") == 0);
  {
    std::ifstream in(sb.path("eval/metrics.json"));
    json metrics = json::parse(in);
    CHECK(metrics.at("test").contains("wer"));
  }

  // relative reduction against itself is zero
  REQUIRE(run("evaluate --refs " + sb.path("data/test.jsonl") + " --hyps " +
              sb.path("dec/nbest.jsonl") + " --out " + sb.path("eval2") +
              " --set-name test --baseline " + sb.path("eval/metrics.json")) == 0);
  {
    std::ifstream in(sb.path("eval2/metrics.json"));
    json metrics = json::parse(in);
    CHECK(metrics.at("werr").get<double>() == doctest::Approx(0.0));
  }

  // ce-pretrain emits an encoder checkpoint usable as a warm start
  REQUIRE(run("ce-pretrain" + cfg + " --data-dir " + sb.path("data") + " --out " +
              sb.path("pre")) == 0);
  CHECK(fs::exists(sb.path("pre/encoder.bin")));
  REQUIRE(run("train" + cfg + " --data-dir " + sb.path("data") + " --out " +
              sb.path("warm") + " --init-encoder " + sb.path("pre/encoder.bin")) == 0);

  // fused decoding with a unigram trained on the training transcripts
  REQUIRE(run("decode --checkpoint " + sb.path("run/checkpoint.bin") + " --data " +
              sb.path("data/test.jsonl") + " --out " + sb.path("dec_lm") +
              " --beam 2 --fusion-mu 0.2 --lm-order 1 --lm-data " +
              sb.path("data/train.jsonl")) == 0);
  CHECK(fs::exists(sb.path("dec_lm/nbest.jsonl")));
}

TEST_CASE("sweep tabulates a lambda grid with relative reductions") {
  Sandbox sb;
  write_file(sb.path("config.json"), kTinyConfig);
  const std::string cfg = " --config " + sb.path("config.json");
  REQUIRE(run("generate-data" + cfg + " --out " + sb.path("data")) == 0);
  REQUIRE(run("sweep" + cfg + " --data-dir " + sb.path("data") + " --out " +
              sb.path("sweep") + " --lambda-aux 0.1,0.3") == 0);
  std::ifstream in(sb.path("sweep/sweep.json"));
  json table = json::parse(in);
  REQUIRE(table.size() == 3);  // baseline + two weights
  CHECK(table.at(0).at("run").get<std::string>() == "baseline");
  CHECK(table.at(1).contains("werr"));
  CHECK(table.at(1).contains("valid_wer"));
}
