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
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "ovseg/classify.hpp"
#include "ovseg/common.hpp"
#include "ovseg/data.hpp"
#include "ovseg/proposals.hpp"
#include "ovseg/prompts.hpp"
#include "ovseg/vlm.hpp"

namespace ovseg {

// Per-pixel, per-class scores in vocabulary order, pixel-major.
struct ScoreMap {
  int width = 0;
  int height = 0;
  int num_classes = 0;
  std::vector<double> scores;
  std::vector<std::uint8_t> covered;

  ScoreMap() = default;
  ScoreMap(int w, int h, int k)
      : width(w), height(h), num_classes(k), scores(std::size_t(w) * h * k, 0.0),
        covered(std::size_t(w) * h, 0) {}
  int pixels() const { return width * height; }
  std::span<double> pixel(int q) { return {scores.data() + std::size_t(q) * num_classes, std::size_t(num_classes)}; }
  std::span<const double> pixel(int q) const {
    return {scores.data() + std::size_t(q) * num_classes, std::size_t(num_classes)};
  }
  bool operator==(const ScoreMap&) const = default;
};

// C_i(q) = sum_k M_k(q) C_k(i) / sum_k M_k(q); pixels with zero total mask
// weight stay uncovered with zero scores.
ScoreMap AssembleScores(const std::vector<Mask>& masks, const std::vector<Vec>& probs,
                        int num_classes);

struct SegResult {
  LabelMap labels;
  std::vector<std::uint8_t> covered;
};

// Ties go to the lowest class index; uncovered pixels take `fallback`.
SegResult ArgmaxSegmentation(const ScoreMap& scores, int fallback = 0);

enum class Generator { kQuery, kFelz, kHierarchical };
const char* GeneratorName(Generator g);
Generator ParseGenerator(const std::string& name);

struct PipelineConfig {
  Generator generator = Generator::kQuery;
  Strategy strategy = Strategy::kEnsemble;
  CropConfig crop;
  double lambda = 0.5;
  int fallback = 0;  // class index or kIgnoreLabel
  double felz_k = 300.0;
  int felz_min_size = 20;
  HierarchyWeights hierarchy;
};

// Borrowed models plus the class embeddings both stages consume. `text`
// covers the vocabulary in class order; `head` holds the query model's
// classifier rows.
struct Pipeline {
  const VLModel* vlm = nullptr;
  const QueryModel* query = nullptr;
  ClassEmbeddings text;
  ClassEmbeddings head;
  PipelineConfig config;

  int num_classes() const { return text.size(); }
};

ProposalSet GenerateProposals(const Pipeline& pipeline, const Image& image,
                              const std::string& image_id = {});

// Strategy A and B distributions for every proposal that survives
// binarization.
struct ClassifiedProposals {
  ProposalSet proposals;
  std::vector<int> kept;
  std::vector<ClassProbabilities> a;
  std::vector<ClassProbabilities> b;  // empty when the set has no head scores
};

ClassifiedProposals ClassifyProposals(const Pipeline& pipeline, const Image& image,
                                      ProposalSet proposals);

struct SegmentOutput {
  SegResult result;
  ScoreMap scores;
  std::vector<std::string> warnings;
};

// Combines the classified proposals according to `strategy` and `lambda`.
SegmentOutput SegmentClassified(const ClassifiedProposals& classified, int num_classes,
                                Strategy strategy, double lambda, int fallback);

SegmentOutput SegmentImage(const Pipeline& pipeline, const Image& image,
                           const std::string& image_id = {});

// One-hot assembly of proposals labelled by `labels` (entries < 0 dropped).
ScoreMap OneHotScores(const ProposalSet& proposals, const std::vector<int>& labels,
                      int num_classes);

// Pixel classifier sharing the query model's embedder form.
struct FcnParams {
  Matrix embed;  // kPixelEmbed x kPixelFeatures
  Vec bias;      // kPixelEmbed

  static FcnParams Zeros();
  std::vector<std::span<double>> Tensors();
  std::vector<std::span<const double>> Tensors() const;
  static const std::vector<std::string>& TensorNames();
  bool operator==(const FcnParams&) const = default;
};

struct FcnModel {
  FcnParams params;
  double class_scale = 10.0;
  std::uint64_t seed = 0;
  bool operator==(const FcnModel&) const = default;
};

FcnModel InitFcn(std::uint64_t seed);

struct FcnExample {
  Matrix features;
  std::vector<int> target;  // head row, -1 for ignored pixels
};

FcnExample MakeFcnExample(const Image& image, const LabelMap& labels,
                          const std::vector<int>& head_classes);

// Mean cross-entropy over all non-ignored pixels of the batch.
double FcnLossAndGrads(const FcnModel& model, const std::vector<const FcnExample*>& batch,
                       const Matrix& head, FcnParams* grads);

struct FcnTrainConfig {
  int steps = 3000;
  int batch = 4;
  double lr = 0.05;
  double momentum = 0.9;
  std::uint64_t seed = 42;
};

struct FcnTrainLog {
  std::vector<double> step_losses;
};

FcnModel TrainFcn(const std::vector<Scene>& scenes, const ClassEmbeddings& head,
                  const FcnTrainConfig& config, FcnTrainLog* log = nullptr);

// Per-pixel softmax of class_scale * cos(pixel embedding, t_c).
ScoreMap FcnScores(const FcnModel& model, const Image& image, const ClassEmbeddings& text);

// Average of frozen vision-language window classifications covering each
// pixel. The last window in each axis is aligned to the image border.
ScoreMap SlidingWindowScores(const VLModel& model, const Image& image, int window, int stride,
                             const ClassEmbeddings& text);

// Every pixel receives the whole-image classification.
ScoreMap WholeImageScores(const VLModel& model, const Image& image, const ClassEmbeddings& text);

// Per-pixel EnsembleProbs(a, b, lambda).
ScoreMap EnsembleScoreMaps(const ScoreMap& a, const ScoreMap& b, double lambda);

struct PseudoLabelStats {
  std::int64_t candidates = 0;  // ignored pixels examined
  std::int64_t relabeled = 0;
};

// Relabels ignored pixels whose ensembled prediction is an unseen class with
// normalized confidence >= confidence. Other labels are left untouched.
std::vector<Scene> PseudoLabel(const Pipeline& pipeline, const std::vector<Scene>& train,
                               const std::vector<int>& unseen, double confidence,
                               PseudoLabelStats* stats = nullptr, int threads = 1);

struct SelfTrainConfig {
  int rounds = 1;
  double confidence = 0.9;
  QueryTrainConfig query;
};

struct SelfTrainResult {
  QueryModel query;
  ClassEmbeddings head;
  std::vector<PseudoLabelStats> rounds;
};

// Each round pseudo-labels, then retrains the query model with the whole
// vocabulary as its classifier. `full_head` holds those embeddings.
SelfTrainResult SelfTrain(const Pipeline& pipeline, const std::vector<Scene>& train,
                          const SplitSpec& split, const ClassEmbeddings& full_head,
                          const SelfTrainConfig& config, int threads = 1);

nlohmann::json FcnToJson(const FcnModel& model);
FcnModel FcnFromJson(const nlohmann::json& j);

// Deterministic display colour for a class.
std::array<std::uint8_t, 3> ClassColor(int c);

// Writes <stem>.pgm (labels) and, when image is given, <stem>_overlay.ppm
// blending class colours at 50% over the image.
void ExportSegResult(const SegResult& result, const Image* image,
                     const std::filesystem::path& stem);

}  // namespace ovseg
