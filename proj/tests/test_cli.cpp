// Copyright 2026 The ovseg Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>

#include "ovseg/experiment.hpp"
#include "ovseg/json_io.hpp"

namespace ovseg {
namespace {

namespace fs = std::filesystem;
using Json = nlohmann::json;

ErrorKind KindOf(const std::function<void()>& fn, std::string* message = nullptr) {
  try {
    fn();
  } catch (const Error& e) {
    if (message) *message = e.what();
    return e.kind();
  }
  ADD_FAILURE() << "expected an error";
  return ErrorKind::kIo;
}

TEST(Config, EmptyObjectGivesDefaults) {
  const RunConfig c = ParseConfig(Json::object());
  const RunConfig d;
  EXPECT_EQ(ConfigToJson(c), ConfigToJson(d));
  EXPECT_EQ(c.seed, 42u);
  EXPECT_EQ(c.threads, 1);
  EXPECT_EQ(c.ensemble_lambda, 0.5);
}

TEST(Config, OverridesWinOverTheFile) {
  const Json file = {{"ensemble", {{"lambda", 0.5}}}, {"vlm", {{"steps", 10}}}};
  const RunConfig c = ParseConfig(file, {{"ensemble.lambda", "0.7"}, {"crop.fill", "zero"}});
  EXPECT_EQ(c.ensemble_lambda, 0.7);
  EXPECT_EQ(c.vlm.steps, 10);
  EXPECT_EQ(c.crop_fill, "zero");
}

TEST(Config, UnknownKeysAreRejectedByName) {
  std::string msg;
  EXPECT_EQ(KindOf([] { ParseConfig(Json{{"lr_schedual", 1}}); }, &msg), ErrorKind::kInvalidConfig);
  EXPECT_NE(msg.find("lr_schedual"), std::string::npos) << msg;
  EXPECT_EQ(KindOf([] { ParseConfig(Json{{"vlm", {{"lr_schedual", 1}}}}); }, &msg), ErrorKind::kInvalidConfig);
  EXPECT_NE(msg.find("vlm.lr_schedual"), std::string::npos) << msg;
  EXPECT_EQ(KindOf([] { ParseConfig(Json::object(), {{"fcn.lr_schedual", "1"}}); }, &msg),
            ErrorKind::kInvalidConfig);
  EXPECT_NE(msg.find("fcn.lr_schedual"), std::string::npos) << msg;
}

TEST(Config, TypeMismatchNamesTheKey) {
  std::string msg;
  EXPECT_EQ(KindOf([] { ParseConfig(Json{{"vlm", {{"steps", "many"}}}}); }, &msg), ErrorKind::kInvalidConfig);
  EXPECT_NE(msg.find("vlm.steps"), std::string::npos) << msg;
  EXPECT_EQ(KindOf([] { ParseConfig(Json{{"vlm", 3}}); }, &msg), ErrorKind::kInvalidConfig);
  EXPECT_NE(msg.find("vlm"), std::string::npos) << msg;
  EXPECT_EQ(KindOf([] { ParseConfig(Json::object(), {{"data.n_train", "1.5"}}); }, &msg),
            ErrorKind::kInvalidConfig);
  EXPECT_NE(msg.find("data.n_train"), std::string::npos) << msg;
}

TEST(Config, InvalidValuesAreRejectedByName) {
  std::string msg;
  EXPECT_EQ(KindOf([] { ParseConfig(Json{{"ensemble", {{"lambda", 1.5}}}}); }, &msg), ErrorKind::kInvalidConfig);
  EXPECT_NE(msg.find("ensemble.lambda"), std::string::npos) << msg;
  EXPECT_EQ(KindOf([] { ParseConfig(Json{{"threads", 0}}); }, &msg), ErrorKind::kInvalidConfig);
  EXPECT_NE(msg.find("threads"), std::string::npos) << msg;
  EXPECT_EQ(KindOf([] { ParseConfig(Json{{"eval", {{"protocol", "everything"}}}}); }),
            ErrorKind::kInvalidConfig);
}

TEST(Config, MissingFileIsAConfigError) {
  std::string msg;
  EXPECT_EQ(KindOf([] { LoadConfigFile("/nonexistent/ovseg.json"); }, &msg), ErrorKind::kInvalidConfig);
  EXPECT_NE(msg.find("/nonexistent/ovseg.json"), std::string::npos);
}

TEST(Config, JsonRoundTripIsLossless) {
  RunConfig c;
  c.seed = 7;
  c.templates = {"a {}", "b {}"};
  c.crop_fill = "preserve";
  c.ensemble_lambda = 0.25;
  const RunConfig back = ParseConfig(ConfigToJson(c));
  EXPECT_EQ(ConfigToJson(back), ConfigToJson(c));
  EXPECT_EQ(ConfigHash(back), ConfigHash(c));
}

TEST(Config, HashCoversTrainingKeysOnly) {
  const RunConfig base;
  const std::string h = ConfigHash(base);
  EXPECT_EQ(h, ConfigHash(RunConfig{}));
  EXPECT_EQ(h.size(), 16u);
  RunConfig inference = base;
  inference.ensemble_lambda = 0.9;
  inference.crop_fill = "zero";
  inference.threads = 8;
  inference.output = "elsewhere";
  EXPECT_EQ(ConfigHash(inference), h);
  for (auto mutate : std::vector<std::function<void(RunConfig&)>>{
           [](RunConfig& c) { c.seed = 43; }, [](RunConfig& c) { c.vlm.steps = 1; },
           [](RunConfig& c) { c.query.lr = 0.5; }, [](RunConfig& c) { c.self_train_confidence = 0.6; }}) {
    RunConfig c = base;
    mutate(c);
    EXPECT_NE(ConfigHash(c), h);
  }
}

TEST(Config, RunDirectoryHonoursTheEnvironment) {
  RunConfig c;
  c.output = "out";
  ::unsetenv("OVSEG_OUT");
  EXPECT_EQ(RunDirectory(c), fs::path("out") / ("run-" + ConfigHash(c)));
  ::setenv("OVSEG_OUT", "/tmp/elsewhere", 1);
  EXPECT_EQ(RunDirectory(c), fs::path("/tmp/elsewhere") / ("run-" + ConfigHash(c)));
  ::unsetenv("OVSEG_OUT");
}

// --- the CLI binary --------------------------------------------------------

struct CliRun {
  int status = -1;
  std::string out;
};

CliRun Cli(const fs::path& root, const std::string& args) {
  const fs::path log = root / "cli.log";
  const std::string cmd = "OVSEG_OUT='" + root.string() + "' '" OVSEG_CLI_PATH "' " + args + " > '" +
                          log.string() + "' 2>&1";
  const int raw = std::system(cmd.c_str());
  CliRun r;
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  std::ifstream in(log);
  std::stringstream ss;
  ss << in.rdbuf();
  r.out = ss.str();
  return r;
}

fs::path FreshDir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("ovseg_cli_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string ReadFile(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

TEST(Cli, ExitCodes) {
  const fs::path root = FreshDir("exit");
  CliRun r = Cli(root, "eval");
  EXPECT_EQ(r.status, 3) << r.out;
  EXPECT_NE(r.out.find("missing artifact"), std::string::npos) << r.out;
  r = Cli(root, "ablate --axis fill");
  EXPECT_EQ(r.status, 3) << r.out;
  r = Cli(root, "eval --set lr_schedual=1");
  EXPECT_EQ(r.status, 2) << r.out;
  EXPECT_NE(r.out.find("lr_schedual"), std::string::npos) << r.out;
  r = Cli(root, "eval --ensemble-lambda 2");
  EXPECT_EQ(r.status, 2) << r.out;
  r = Cli(root, "no-such-command");
  EXPECT_EQ(r.status, 2) << r.out;
  r = Cli(root, "eval --config /nonexistent.json");
  EXPECT_EQ(r.status, 2) << r.out;
  fs::remove_all(root);
}

// A miniature configuration exercising every stage in a few seconds.
constexpr const char* kTinyConfig = R"({
  "data": {"n_train": 6, "n_val": 3, "n_cross_val": 3, "corpus_scenes": 40, "corpus_closeups": 20,
           "corpus_val": 4},
  "vlm": {"steps": 40},
  "prompts": {"steps": 10, "samples_per_class": 4},
  "proposals": {"steps": 10},
  "fcn": {"steps": 10},
  "self_train": {"rounds": 1}
})";

TEST(Cli, TinyChainIsIdempotentAndEchoesItsConfig) {
  const fs::path root = FreshDir("chain");
  {
    std::ofstream(root / "tiny.json") << kTinyConfig;
  }
  const std::string cfg = "--config '" + (root / "tiny.json").string() + "' ";
  const std::vector<std::string> chain = {"gen-data", "pretrain", "select-prompt", "tune-prompt",
                                          "train-proposals", "train-fcn", "self-train", "eval"};
  const RunConfig config = LoadConfigFile(root / "tiny.json");
  const fs::path dir = root / ("run-" + ConfigHash(config));
  std::string first_summary;
  for (int pass = 0; pass < 2; ++pass) {
    for (const auto& command : chain) {
      const CliRun r = Cli(root, cfg + command);
      ASSERT_EQ(r.status, 0) << command << "\n" << r.out;
    }
    const std::string summary = ReadFile(dir / "eval" / "summary.json");
    ASSERT_FALSE(summary.empty());
    if (pass == 0) first_summary = summary;
    else EXPECT_EQ(summary, first_summary);
  }

  const Json resolved = ReadJsonFile(dir / "resolved_config.json");
  EXPECT_EQ(resolved.at("seed"), 42);
  EXPECT_EQ(resolved.at("config_hash"), ConfigHash(config));
  Json echoed = resolved;
  echoed.erase("config_hash");
  EXPECT_EQ(ConfigHash(ParseConfig(echoed)), ConfigHash(config));

  const Json summary = Json::parse(first_summary);
  for (const char* key : {"zero_shot", "cross_dataset", "oracle", "fcn", "ablations", "self_train", "strategies"})
    EXPECT_TRUE(summary.contains(key)) << key;

  const CliRun ablate = Cli(root, cfg + "ablate --axis fill");
  ASSERT_EQ(ablate.status, 0) << ablate.out;
  const Json rows = Json::parse(ablate.out).at("result");
  ASSERT_EQ(rows.size(), 3u) << rows.dump();
  const std::string csv = ReadFile(dir / "ablate" / "fill.csv");
  for (const char* mode : {"preserve", "zero", "mean"}) EXPECT_NE(csv.find(mode), std::string::npos) << csv;

  // Inference-only flags reuse the artifacts of the same run directory.
  const CliRun lambda = Cli(root, cfg + "--ensemble-lambda 0.7 eval --protocol zero-shot");
  ASSERT_EQ(lambda.status, 0) << lambda.out;
  EXPECT_EQ(Json::parse(lambda.out).at("run_dir"), dir.string());
  EXPECT_EQ(ReadJsonFile(dir / "resolved_config.json").at("ensemble").at("lambda"), 0.7);

  const CliRun seg = Cli(root, cfg + "segment");
  ASSERT_EQ(seg.status, 0) << seg.out;
  EXPECT_FALSE(fs::is_empty(dir / "segment"));
  fs::remove_all(root);
}

}  // namespace
}  // namespace ovseg
