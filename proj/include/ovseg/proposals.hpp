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
#include <utility>
#include <vector>

#include "json.hpp"
#include "ovseg/common.hpp"
#include "ovseg/data.hpp"
#include "ovseg/image.hpp"
#include "ovseg/prompts.hpp"

namespace ovseg {

// Class-agnostic soft masks for one image. When produced by the query model,
// `head_probs[k]` holds query k's distribution over `head_classes` followed by
// the no-object entry.
struct ProposalSet {
  std::string image_id;
  std::vector<Mask> masks;
  std::vector<int> head_classes;
  std::vector<Vec> head_probs;

  int size() const { return static_cast<int>(masks.size()); }
  bool has_head_probs() const { return !head_probs.empty(); }
};

// Region ids are contiguous from 0 in raster order of first appearance.
struct RegionPartition {
  int width = 0;
  int height = 0;
  int num_regions = 0;
  std::vector<int> ids;
  std::vector<std::pair<int, int>> adjacency;  // a < b, sorted, unique

  int at(int x, int y) const { return ids[std::size_t(y) * width + x]; }
  bool operator==(const RegionPartition&) const = default;
};

// Builds ids (relabelled), num_regions and adjacency from raw labels.
RegionPartition MakePartition(int width, int height, const std::vector<int>& raw);

// Graph-based merging on the 4-connected grid with Euclidean RGB weights on
// the 0..255 scale, threshold k/|C|, then absorption of regions below
// min_size.
RegionPartition FelzPartition(const Image& image, double k, int min_size);

struct HierarchyWeights {
  double color = 1.0;
  double size = 1.0;
  double fill = 1.0;
};

// Histogram used by the color similarity: 8 bins per channel, L1-normalized.
inline constexpr int kRegionHistBins = 8;

// Greedy merging of the most similar adjacent pair until one region is left.
// Emits the R initial regions followed by the R-1 merged regions.
// `merges`, when given, receives the merged id pairs in order; the region
// created by merge i has id R + i.
ProposalSet HierarchicalProposals(const RegionPartition& partition, const Image& image,
                                  const HierarchyWeights& weights,
                                  std::vector<std::pair<int, int>>* merges = nullptr);

// Per-pixel features: r, g, b, x/W, y/H, 3x3-mean r, g, b (channels in
// [0,1]; the 3x3 mean covers in-bounds neighbours only).
inline constexpr int kPixelFeatures = 8;
inline constexpr int kPixelEmbed = 32;
Matrix PixelFeatures(const Image& image);  // (W*H) x kPixelFeatures

// Binary segment over an image, used as a matching target.
struct TargetSegment {
  int head_index = 0;  // index into the head classes
  std::vector<std::uint8_t> mask;
};

// Mean BCE over non-ignore pixels with probabilities clamped to
// [1e-7, 1 - 1e-7].
double BinaryCrossEntropy(std::span<const double> probs, std::span<const std::uint8_t> target,
                          std::span<const std::uint8_t> valid);
// 1 - 2 sum(m g) / (sum m + sum g) over non-ignore pixels; 0 when the
// denominator is 0.
double DiceLoss(std::span<const double> probs, std::span<const std::uint8_t> target,
                std::span<const std::uint8_t> valid);

struct QueryParams {
  Matrix embed;         // kPixelEmbed x kPixelFeatures
  Vec embed_bias;       // kPixelEmbed
  Matrix queries;       // N x kPixelEmbed
  Vec mask_bias;        // N
  Matrix class_proj;    // kEmbedDim x kPixelEmbed
  Vec no_object;        // N

  static QueryParams Zeros(int num_queries);
  int num_queries() const { return queries.rows; }
  std::vector<std::span<double>> Tensors();
  std::vector<std::span<const double>> Tensors() const;
  static const std::vector<std::string>& TensorNames();
  bool operator==(const QueryParams&) const = default;
};

struct QueryModel {
  QueryParams params;
  double class_scale = 10.0;
  std::uint64_t seed = 0;
  bool operator==(const QueryModel&) const = default;
};

inline constexpr int kDefaultQueries = 16;
inline constexpr double kNoObjectWeight = 0.1;

// Weights uniform(-0.05, 0.05) from SplitMix64(seed) in tensor order; biases
// and no-object logits 0.
QueryModel InitQueryModel(int num_queries, std::uint64_t seed);

struct QueryOutput {
  Matrix masks;  // N x (W*H), sigmoid probabilities
  Matrix logits; // N x (S+1); mask logits are not kept
  Matrix probs;  // N x (S+1)
};

// `head` rows are the unit text embeddings used as classifier weights.
QueryOutput QueryForward(const QueryModel& model, const Matrix& features,
                         const Matrix& head);

// Matching cost (k, j) = -p_k(class_j) + BCE(mask_k, gt_j) + Dice(mask_k, gt_j).
Matrix MatchCost(const QueryOutput& out, const std::vector<TargetSegment>& targets,
                 std::span<const std::uint8_t> valid);

struct QueryExample {
  Matrix features;
  std::vector<TargetSegment> targets;
  std::vector<std::uint8_t> valid;  // 1 where the label is not ignored
};

// Builds targets for the head classes present in `labels`; labels outside
// the head become ignore.
QueryExample MakeQueryExample(const Image& image, const LabelMap& labels,
                              const std::vector<int>& head_classes);

// Mean over the batch of the per-image loss summed over queries. Matching is
// recomputed inside and treated as constant.
double QueryLossAndGrads(const QueryModel& model, const std::vector<const QueryExample*>& batch,
                         const Matrix& head, QueryParams* grads);

struct QueryTrainConfig {
  int num_queries = kDefaultQueries;
  int steps = 3000;
  int batch = 8;
  double lr = 0.05;
  double momentum = 0.9;
  std::uint64_t seed = 42;
};

struct QueryTrainLog {
  std::vector<double> step_losses;
};

QueryModel TrainQueryModel(const std::vector<Scene>& scenes, const ClassEmbeddings& head,
                           const QueryTrainConfig& config, QueryTrainLog* log = nullptr);

ProposalSet QueryProposals(const QueryModel& model, const Image& image,
                           const ClassEmbeddings& head, std::string image_id = {});

nlohmann::json QueryModelToJson(const QueryModel& model);
QueryModel QueryModelFromJson(const nlohmann::json& j);

// One P5 file per proposal (value = round(mask * 255)) plus proposals.json.
void ExportProposals(const ProposalSet& set, const std::filesystem::path& dir);

}  // namespace ovseg
