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

// Randomized finite-difference checks of every analytic gradient. Each case
// draws its own batch and parameters from `seed`.

#include <vector>

#include "ovseg/data.hpp"
#include "ovseg/prompts.hpp"
#include "ovseg/proposals.hpp"
#include "ovseg/segment.hpp"
#include "ovseg/vlm.hpp"
#include "support/oracles.hpp"

namespace ovseg::testing {

// Small scenes keep the per-pixel losses cheap to differentiate numerically.
inline GenConfig TinySceneConfig() {
  GenConfig c = DomainAConfig();
  c.width = 16;
  c.height = 16;
  c.min_radius = 2;
  c.max_radius = 5;
  c.min_shapes = 1;
  c.max_shapes = 3;
  return c;
}

template <typename Params>
void Randomize(Params& params, SplitMix64& rng, double scale) {
  for (auto t : params.Tensors())
    for (double& v : t) v = rng.Uniform(-scale, scale);
}

inline GradCheckResult ContrastiveGradCase(std::uint64_t seed) {
  SplitMix64 rng(seed);
  const GenConfig cfg = TinySceneConfig();
  const int batch = 2 + static_cast<int>(rng.Below(4));
  const Dataset d = GenerateDataset(cfg, SplitSpec::AllSeen(cfg.MakeVocabulary().size()), batch, 1,
                                    rng.Next());
  std::vector<std::string> captions;
  std::vector<Vec> features;
  for (const Scene& s : d.train) {
    captions.push_back(s.caption);
    features.push_back(VisionFeatures(s.image));
  }
  VLModel model = InitVlm(Tokenizer::Build(captions), rng.Next());
  Randomize(model.params, rng, 0.2);
  model.params.log_scale = rng.Uniform(0.0, 2.0);
  std::vector<std::vector<int>> tokens;
  for (const auto& c : captions) tokens.push_back(model.tokenizer.Tokenize(c));
  VlmParams grads = VlmParams::Zeros(model.tokenizer.vocab_size());
  ContrastiveLossAndGrads(model.params, features, tokens, &grads);
  return CheckGradients(model.params, grads, VlmParams::TensorNames(),
                        [&] { return ContrastiveLossAndGrads(model.params, features, tokens, nullptr); },
                        rng);
}

inline GradCheckResult QueryGradCase(std::uint64_t seed) {
  SplitMix64 rng(seed);
  const GenConfig cfg = TinySceneConfig();
  const Vocabulary vocab = cfg.MakeVocabulary();
  const SplitSpec split = MakeSplit(vocab, 3, 1.0, rng.Next());
  const Dataset d = GenerateDataset(cfg, split, 2, 1, rng.Next());
  const Matrix head = RandomUnitRows(static_cast<int>(split.seen.size()), kEmbedDim, rng);
  QueryModel model = InitQueryModel(3 + static_cast<int>(rng.Below(3)), rng.Next());
  Randomize(model.params, rng, 0.5);
  std::vector<QueryExample> examples;
  for (const Scene& s : d.train) examples.push_back(MakeQueryExample(s.image, s.labels, split.seen));
  std::vector<const QueryExample*> batch;
  for (const auto& e : examples) batch.push_back(&e);
  QueryParams grads = QueryParams::Zeros(model.params.num_queries());
  QueryLossAndGrads(model, batch, head, &grads);
  return CheckGradients(model.params, grads, QueryParams::TensorNames(),
                        [&] { return QueryLossAndGrads(model, batch, head, nullptr); }, rng);
}

inline GradCheckResult PromptGradCase(std::uint64_t seed) {
  SplitMix64 rng(seed);
  const Vocabulary vocab = DomainAConfig().MakeVocabulary();
  std::vector<std::string> names;
  for (const auto& e : vocab.entries()) names.push_back(e.name);
  VLModel model = InitVlm(Tokenizer::Build(names), rng.Next());
  Randomize(model.params, rng, 0.3);
  model.eval_scale = rng.Uniform(2.0, 8.0);  // unsaturated softmax
  std::vector<int> classes;
  for (int c = 0; c < vocab.size(); ++c)
    if (rng.Uniform() < 0.6 || classes.size() < 2) classes.push_back(c);
  const int n = 4 + static_cast<int>(rng.Below(8));
  std::vector<Vec> vision;
  std::vector<int> labels;
  for (int i = 0; i < n; ++i) {
    Matrix v = RandomUnitRows(1, kEmbedDim, rng);
    vision.push_back(v.data);
    labels.push_back(classes[rng.Below(classes.size())]);
  }
  LearnedPrompt prompt = InitLearnedPrompt(1 + static_cast<int>(rng.Below(4)), rng.Next());
  Randomize(prompt, rng, 0.3);
  LearnedPrompt grad;
  grad.tokens = Matrix(prompt.length(), kTokenDim);
  PromptLossAndGrad(model, vocab, prompt, classes, vision, labels, &grad);
  static const std::vector<std::string> names_prompt = {"prompt_tokens"};
  return CheckGradients(
      prompt, grad, names_prompt,
      [&] { return PromptLossAndGrad(model, vocab, prompt, classes, vision, labels, nullptr); }, rng);
}

inline GradCheckResult FcnGradCase(std::uint64_t seed) {
  SplitMix64 rng(seed);
  const GenConfig cfg = TinySceneConfig();
  const Vocabulary vocab = cfg.MakeVocabulary();
  const SplitSpec split = MakeSplit(vocab, 3, 1.0, rng.Next());
  const Dataset d = GenerateDataset(cfg, split, 2, 1, rng.Next());
  const Matrix head = RandomUnitRows(static_cast<int>(split.seen.size()), kEmbedDim, rng);
  FcnModel model = InitFcn(rng.Next());
  Randomize(model.params, rng, 0.5);
  std::vector<FcnExample> examples;
  for (const Scene& s : d.train) examples.push_back(MakeFcnExample(s.image, s.labels, split.seen));
  std::vector<const FcnExample*> batch;
  for (const auto& e : examples) batch.push_back(&e);
  FcnParams grads = FcnParams::Zeros();
  FcnLossAndGrads(model, batch, head, &grads);
  return CheckGradients(model.params, grads, FcnParams::TensorNames(),
                        [&] { return FcnLossAndGrads(model, batch, head, nullptr); }, rng);
}

}  // namespace ovseg::testing
