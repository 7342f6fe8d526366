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

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "ovseg/classify.hpp"
#include "ovseg/data.hpp"
#include "ovseg/eval.hpp"
#include "ovseg/proposals.hpp"
#include "ovseg/prompts.hpp"
#include "ovseg/segment.hpp"
#include "ovseg/vlm.hpp"

namespace ovseg {

// Every tunable of a run. The JSON file mirrors the dotted key paths of
// VisitConfig; missing keys keep these defaults.
struct RunConfig {
  std::uint64_t seed = 42;
  std::string output = "runs";
  int threads = 1;

  // data
  int n_train = 300;
  int n_val = 100;
  int n_cross_val = 100;
  int n_unseen = 4;
  double thing_stuff_ratio = 1.0;
  int corpus_scenes = 2000;
  int corpus_closeups = 1000;
  int corpus_val = 64;
  bool restricted_vocabulary = false;

  // vlm
  PretrainConfig vlm;
  double eval_scale = 100.0;

  // prompts
  std::vector<std::string> templates = PromptSet::Default().Texts();
  std::string text_source = "template";  // template | learned
  PromptTrainConfig prompt;

  // proposals
  QueryTrainConfig query;
  std::string generator = "query";
  double felz_k = 300.0;
  int felz_min_size = 20;
  double hier_color = 1.0;
  double hier_size = 1.0;
  double hier_fill = 1.0;

  // classify
  double crop_threshold = 0.5;
  double crop_expand = 1.2;
  std::string crop_fill = "mean";
  std::string strategy = "ensemble";
  double ensemble_lambda = 0.5;

  // segment
  std::string fallback = "background";  // background | ignore
  FcnTrainConfig fcn;
  int window = 32;
  int stride = 16;
  int self_train_rounds = 1;
  double self_train_confidence = 0.5;

  // eval
  std::string protocol = "all";
  std::string axis = "fill";
};

// Calls f(path, field) for every field; `hashed` is false for keys that only
// affect inference, orchestration or output.
template <typename F>
void VisitConfig(RunConfig& c, F&& f) {
  f("seed", c.seed, true);
  f("output", c.output, false);
  f("threads", c.threads, false);
  f("data.n_train", c.n_train, true);
  f("data.n_val", c.n_val, true);
  f("data.n_cross_val", c.n_cross_val, true);
  f("data.n_unseen", c.n_unseen, true);
  f("data.thing_stuff_ratio", c.thing_stuff_ratio, true);
  f("data.corpus_scenes", c.corpus_scenes, true);
  f("data.corpus_closeups", c.corpus_closeups, true);
  f("data.corpus_val", c.corpus_val, true);
  f("data.restricted_vocabulary", c.restricted_vocabulary, true);
  f("vlm.steps", c.vlm.steps, true);
  f("vlm.batch", c.vlm.batch, true);
  f("vlm.lr", c.vlm.lr, true);
  f("vlm.momentum", c.vlm.momentum, true);
  f("vlm.eval_scale", c.eval_scale, true);
  f("prompts.templates", c.templates, true);
  f("prompts.text_source", c.text_source, true);
  f("prompts.length", c.prompt.length, true);
  f("prompts.samples_per_class", c.prompt.samples_per_class, true);
  f("prompts.steps", c.prompt.steps, true);
  f("prompts.batch", c.prompt.batch, true);
  f("prompts.lr", c.prompt.lr, true);
  f("prompts.momentum", c.prompt.momentum, true);
  f("proposals.num_queries", c.query.num_queries, true);
  f("proposals.steps", c.query.steps, true);
  f("proposals.batch", c.query.batch, true);
  f("proposals.lr", c.query.lr, true);
  f("proposals.momentum", c.query.momentum, true);
  f("proposals.generator", c.generator, false);
  f("proposals.felz_k", c.felz_k, false);
  f("proposals.felz_min_size", c.felz_min_size, false);
  f("proposals.hier_color", c.hier_color, false);
  f("proposals.hier_size", c.hier_size, false);
  f("proposals.hier_fill", c.hier_fill, false);
  f("crop.threshold", c.crop_threshold, false);
  f("crop.expand", c.crop_expand, false);
  f("crop.fill", c.crop_fill, false);
  f("ensemble.strategy", c.strategy, false);
  f("ensemble.lambda", c.ensemble_lambda, false);
  f("segment.fallback", c.fallback, false);
  f("fcn.steps", c.fcn.steps, true);
  f("fcn.batch", c.fcn.batch, true);
  f("fcn.lr", c.fcn.lr, true);
  f("fcn.momentum", c.fcn.momentum, true);
  f("fcn.window", c.window, false);
  f("fcn.stride", c.stride, false);
  f("self_train.rounds", c.self_train_rounds, true);
  f("self_train.confidence", c.self_train_confidence, true);
  f("eval.protocol", c.protocol, false);
  f("eval.axis", c.axis, false);
}

// Applies `file` (a JSON object) then dotted `key=value` overrides, values
// parsed as JSON when possible and as a bare string otherwise. Unknown keys
// and type mismatches raise kInvalidConfig naming the key path.
RunConfig ParseConfig(const nlohmann::json& file,
                      const std::vector<std::pair<std::string, std::string>>& overrides = {});
RunConfig LoadConfigFile(const std::filesystem::path& path,
                         const std::vector<std::pair<std::string, std::string>>& overrides = {});
void ValidateConfig(const RunConfig& config);
nlohmann::json ConfigToJson(const RunConfig& config);

// Hash of the hashed keys; names the artifact directory.
std::string ConfigHash(const RunConfig& config);
// OVSEG_OUT (when set) or config.output, joined with run-<hash>.
std::filesystem::path RunDirectory(const RunConfig& config);

PipelineConfig MakePipelineConfig(const RunConfig& config, const Dataset& train_data);

// Stages of a run. Each writes its artifacts below `dir` and returns a short
// JSON summary; missing inputs raise kMissingArtifact naming the file.
nlohmann::json StageGenData(const RunConfig& config, const std::filesystem::path& dir);
nlohmann::json StagePretrain(const RunConfig& config, const std::filesystem::path& dir);
nlohmann::json StageSelectPrompt(const RunConfig& config, const std::filesystem::path& dir);
nlohmann::json StageTunePrompt(const RunConfig& config, const std::filesystem::path& dir);
nlohmann::json StageTrainProposals(const RunConfig& config, const std::filesystem::path& dir);
nlohmann::json StageTrainFcn(const RunConfig& config, const std::filesystem::path& dir);
nlohmann::json StageSelfTrain(const RunConfig& config, const std::filesystem::path& dir);
// Segments validation images (or `image_path` when non-empty) and exports
// label maps and overlays under dir/segment.
nlohmann::json StageSegment(const RunConfig& config, const std::filesystem::path& dir,
                            const std::filesystem::path& image_path = {});
// Writes dir/eval/{summary.json,metrics.csv,report.md}.
nlohmann::json StageEval(const RunConfig& config, const std::filesystem::path& dir);
// Writes dir/ablate/<axis>.{csv,md}; returns the table rows.
nlohmann::json StageAblate(const RunConfig& config, const std::filesystem::path& dir);

// Region crops of ground-truth segments whose class is in `classes`.
std::vector<RegionSample> GroundTruthRegions(const std::vector<Scene>& scenes,
                                             const std::vector<int>& classes,
                                             const CropConfig& crop);

// Pretraining pairs: multi-shape scenes plus single-shape close-ups, all from
// the domain of `base`.
struct Corpus {
  std::vector<Vec> features;
  std::vector<std::string> captions;
  std::vector<Vec> val_features;
  std::vector<std::string> val_captions;
};
Corpus MakeCorpus(const RunConfig& config, const GenConfig& base, const Vocabulary& vocab,
                  const SplitSpec& split);

}  // namespace ovseg
