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

// Command-line driver: one subcommand per pipeline stage, all sharing one
// artifact directory keyed by the config hash.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "ovseg/experiment.hpp"

namespace {

constexpr int kExitOther = 1;
constexpr int kExitConfig = 2;
constexpr int kExitMissing = 3;
constexpr int kExitNumerical = 4;

int ExitCode(ovseg::ErrorKind kind) {
  switch (kind) {
    case ovseg::ErrorKind::kInvalidConfig: return kExitConfig;
    case ovseg::ErrorKind::kMissingArtifact: return kExitMissing;
    case ovseg::ErrorKind::kNumerical: return kExitNumerical;
    default: return kExitOther;
  }
}

std::pair<std::string, std::string> SplitOverride(const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos || eq == 0)
    ovseg::Fail(ovseg::ErrorKind::kInvalidConfig, "--set expects key=value, got '" + text + "'");
  return {text.substr(0, eq), text.substr(eq + 1)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-stage open-vocabulary segmentation on synthetic scenes"};
  app.require_subcommand(1, 1);
  app.fallthrough();

  std::string config_path;
  std::vector<std::string> sets;
  std::optional<double> lambda;
  std::optional<int> threads;
  std::optional<std::uint64_t> seed;
  app.add_option("--config", config_path, "JSON config file");
  app.add_option("--set", sets, "Override a config key (dotted path), e.g. --set vlm.steps=100");
  app.add_option("--ensemble-lambda", lambda, "Weight of strategy A in the ensemble");
  app.add_option("--threads", threads, "Worker threads (default 1)");
  app.add_option("--seed", seed, "Master seed");

  std::string protocol;
  std::string axis;
  std::string image;
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"gen-data", "Generate domain A and B datasets"},
      {"pretrain", "Pretrain the vision-language model"},
      {"select-prompt", "Select a hand-crafted prompt template on seen training regions"},
      {"tune-prompt", "Learn prompt tokens on seen training regions"},
      {"train-proposals", "Train the class-agnostic query proposal model"},
      {"train-fcn", "Train the per-pixel baseline"},
      {"segment", "Segment validation images or one PPM image"},
      {"self-train", "Pseudo-label unseen classes and retrain the proposal model"},
      {"eval", "Evaluate and write eval/summary.json"},
      {"ablate", "Run one ablation axis"},
  };
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    if (name == "eval")
      sub->add_option("--protocol", protocol,
                      "all | zero-shot | cross-dataset | oracle | fcn | self-train");
    if (name == "ablate")
      sub->add_option("--axis", axis, "strategy | prompt | fill | window | generator");
    if (name == "segment") sub->add_option("--image", image, "PPM image to segment");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    std::vector<std::pair<std::string, std::string>> overrides;
    for (const auto& s : sets) overrides.push_back(SplitOverride(s));
    if (lambda) overrides.emplace_back("ensemble.lambda", nlohmann::json(*lambda).dump());
    if (threads) overrides.emplace_back("threads", std::to_string(*threads));
    if (seed) overrides.emplace_back("seed", std::to_string(*seed));
    if (!protocol.empty()) overrides.emplace_back("eval.protocol", nlohmann::json(protocol).dump());
    if (!axis.empty()) overrides.emplace_back("eval.axis", nlohmann::json(axis).dump());

    const ovseg::RunConfig config = config_path.empty()
                                        ? ovseg::ParseConfig(nlohmann::json::object(), overrides)
                                        : ovseg::LoadConfigFile(config_path, overrides);
    const std::filesystem::path dir = ovseg::RunDirectory(config);
    std::filesystem::create_directories(dir);

    nlohmann::json out;
    if (command == "gen-data") out = ovseg::StageGenData(config, dir);
    else if (command == "pretrain") out = ovseg::StagePretrain(config, dir);
    else if (command == "select-prompt") out = ovseg::StageSelectPrompt(config, dir);
    else if (command == "tune-prompt") out = ovseg::StageTunePrompt(config, dir);
    else if (command == "train-proposals") out = ovseg::StageTrainProposals(config, dir);
    else if (command == "train-fcn") out = ovseg::StageTrainFcn(config, dir);
    else if (command == "segment") out = ovseg::StageSegment(config, dir, image);
    else if (command == "self-train") out = ovseg::StageSelfTrain(config, dir);
    else if (command == "eval") out = ovseg::StageEval(config, dir);
    else if (command == "ablate") out = ovseg::StageAblate(config, dir);
    std::cout << nlohmann::json{{"command", command}, {"run_dir", dir.string()}, {"result", out}}.dump(2)
              << "\n";
    return 0;
  } catch (const ovseg::Error& e) {
    std::cerr << "ovseg " << command << ": " << ovseg::ErrorKindName(e.kind()) << ": " << e.what()
              << "\n";
    return ExitCode(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "ovseg " << command << ": " << e.what() << "\n";
    return kExitOther;
  }
}
