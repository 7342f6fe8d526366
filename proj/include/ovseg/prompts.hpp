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
#include <string>
#include <vector>

#include "json.hpp"
#include "ovseg/common.hpp"
#include "ovseg/data.hpp"
#include "ovseg/vlm.hpp"

namespace ovseg {

// Text with exactly one "{}" slot for the class name.
class PromptTemplate {
 public:
  explicit PromptTemplate(std::string text);
  std::string Render(const std::string& class_name) const;
  const std::string& text() const { return text_; }
  bool operator==(const PromptTemplate&) const = default;

 private:
  std::string text_;
};

class PromptSet {
 public:
  explicit PromptSet(const std::vector<std::string>& templates);
  static PromptSet Default();

  int size() const { return static_cast<int>(templates_.size()); }
  const PromptTemplate& operator[](int i) const { return templates_[i]; }
  std::vector<std::string> Texts() const;

 private:
  std::vector<PromptTemplate> templates_;
};

// Trainable context tokens prepended to the class-name tokens.
struct LearnedPrompt {
  Matrix tokens;  // length x kTokenDim

  int length() const { return tokens.rows; }
  std::vector<std::span<double>> Tensors() { return {tokens.data}; }
  std::vector<std::span<const double>> Tensors() const { return {tokens.data}; }
  bool operator==(const LearnedPrompt&) const = default;
};

LearnedPrompt InitLearnedPrompt(int length, std::uint64_t seed);

// One unit embedding per class, rows aligned with `classes`.
struct ClassEmbeddings {
  std::vector<int> classes;
  Matrix vectors;

  int size() const { return static_cast<int>(classes.size()); }
  // Row index of vocabulary class `c`, or -1.
  int RowOf(int c) const;
  ClassEmbeddings Subset(const std::vector<int>& subset) const;
  std::uint64_t Checksum() const;
};

std::vector<int> AllClasses(const Vocabulary& vocab);

ClassEmbeddings BuildClassEmbeddings(const VLModel& model, const Vocabulary& vocab,
                                     const PromptTemplate& prompt,
                                     const std::vector<int>& classes);
ClassEmbeddings BuildClassEmbeddings(const VLModel& model, const Vocabulary& vocab,
                                     const LearnedPrompt& prompt,
                                     const std::vector<int>& classes);

// A crop paired with its ground-truth class.
struct RegionSample {
  Image crop;
  int label = 0;
  std::string source;  // scene id
};

// Fraction of samples whose argmax over `embeddings` is their label.
double RegionAccuracy(const VLModel& model, const ClassEmbeddings& embeddings,
                      const std::vector<RegionSample>& samples);

struct TemplateSelection {
  int best = 0;
  std::vector<double> accuracies;
};

// Accuracy is measured over `seen` classes only; ties go to the lower index.
TemplateSelection SelectTemplate(const PromptSet& prompts, const VLModel& model,
                                 const Vocabulary& vocab,
                                 const std::vector<RegionSample>& samples,
                                 const std::vector<int>& seen);

struct PromptTrainConfig {
  int length = 1;
  int samples_per_class = 32;
  int steps = 500;
  int batch = 32;
  double lr = 0.02;
  double momentum = 0.9;
  std::uint64_t seed = 42;
};

// Mean cross-entropy over the batch of the zero-shot rule restricted to
// `classes`. Embeddings are precomputed unit vision vectors.
double PromptLossAndGrad(const VLModel& model, const Vocabulary& vocab,
                         const LearnedPrompt& prompt, const std::vector<int>& classes,
                         const std::vector<Vec>& vision, const std::vector<int>& labels,
                         LearnedPrompt* grad);

// Only the prompt matrix is trained; the model is taken by const reference.
LearnedPrompt TrainLearnedPrompt(const VLModel& model, const Vocabulary& vocab,
                                 const std::vector<RegionSample>& samples,
                                 const std::vector<int>& seen,
                                 const PromptTrainConfig& config,
                                 std::vector<std::string>* warnings = nullptr);

nlohmann::json LearnedPromptToJson(const LearnedPrompt& prompt);
LearnedPrompt LearnedPromptFromJson(const nlohmann::json& j);

}  // namespace ovseg
