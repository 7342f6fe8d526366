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

// A small pretrained model and dataset shared by the tests that need a
// trained vision-language model. Built once per process; deterministic.

#include <vector>

#include "ovseg/experiment.hpp"

namespace ovseg::testing {

struct Desk {
  RunConfig config;
  Dataset data;
  VLModel vlm;
  std::vector<RegionSample> seen_regions;    // train scenes, seen classes
  std::vector<RegionSample> unseen_regions;  // val scenes, unseen classes
};

inline RunConfig DeskConfig() {
  RunConfig c;
  c.n_train = 40;
  c.n_val = 20;
  c.corpus_scenes = 400;
  c.corpus_closeups = 200;
  c.corpus_val = 16;
  c.vlm.steps = 1500;
  return c;
}

inline const Desk& GetDesk() {
  static const Desk desk = [] {
    Desk d;
    d.config = DeskConfig();
    const GenConfig gen = DomainAConfig();
    const Vocabulary vocab = gen.MakeVocabulary();
    const SplitSpec split =
        MakeSplit(vocab, d.config.n_unseen, d.config.thing_stuff_ratio, DeriveSeed(d.config.seed, 3, 0));
    d.data = GenerateDataset(gen, split, d.config.n_train, d.config.n_val, DeriveSeed(d.config.seed, 5, 0));
    const Corpus corpus = MakeCorpus(d.config, gen, vocab, split);
    std::vector<std::string> words = corpus.captions;
    for (const auto& e : vocab.entries()) words.push_back(e.name);
    for (std::string t : PromptSet::Default().Texts()) words.push_back(t.erase(t.find("{}"), 2));
    PretrainConfig pc = d.config.vlm;
    pc.seed = DeriveSeed(d.config.seed, 41, 0);
    d.vlm = PretrainVlm(Tokenizer::Build(words), corpus.features, corpus.captions, pc);
    d.vlm.eval_scale = d.config.eval_scale;
    const CropConfig crop = MakePipelineConfig(d.config, d.data).crop;
    d.seen_regions = GroundTruthRegions(d.data.train, split.seen, crop);
    d.unseen_regions = GroundTruthRegions(d.data.val, split.unseen, crop);
    return d;
  }();
  return desk;
}

}  // namespace ovseg::testing
