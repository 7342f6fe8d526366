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

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ovseg/common.hpp"
#include "ovseg/image.hpp"
#include "ovseg/prompts.hpp"
#include "ovseg/vlm.hpp"

namespace ovseg {

enum class FillMode { kPreserve, kZero, kMean };
const char* FillModeName(FillMode mode);
FillMode ParseFillMode(const std::string& name);

struct CropConfig {
  double threshold = 0.5;   // binarization, in (0, 1)
  double expand = 1.2;      // bounding-box expansion ratio, >= 1
  FillMode fill = FillMode::kMean;
  int size = kResizeSide;   // output side
  std::array<std::uint8_t, 3> mean{0, 0, 0};  // dataset mean for kMean

  void Validate() const;
};

// Inclusive pixel rectangle.
struct CropBox {
  int x0 = 0, y0 = 0, x1 = -1, y1 = -1;
  bool operator==(const CropBox&) const = default;
};

struct Crop {
  Image image;  // size x size
  std::string image_id;
  int proposal = -1;
  CropBox box;
};

// Tight box of mask >= threshold expanded by `expand` about its centre and
// clamped to the image. Throws kInvalidArgument when the mask is empty after
// binarization.
CropBox ExpandedBox(const Mask& mask, double threshold, double expand);

// The expanded box with the fill applied to pixels outside the binarized
// mask, before resizing.
Image FilledRegion(const Image& image, const Mask& mask, const CropConfig& config,
                   CropBox* box = nullptr);

Crop MakeCrop(const Image& image, const Mask& mask, const CropConfig& config,
              std::string image_id = {}, int proposal = -1);

bool MaskIsEmpty(const Mask& mask, double threshold);

enum class Strategy { kA, kB, kEnsemble };
const char* StrategyName(Strategy s);
Strategy ParseStrategy(const std::string& name);

// Indexed by vocabulary class.
struct ClassProbabilities {
  Vec p;
  Strategy strategy = Strategy::kA;
};

// Frozen vision-language classification of a crop. `text` must cover the
// vocabulary, rows in class order.
ClassProbabilities ClassifyStrategyA(const VLModel& model, const Image& crop,
                                     const ClassEmbeddings& text);
ClassProbabilities ClassifyStrategyA(std::span<const double> vision_embedding,
                                     const ClassEmbeddings& text, double scale);

// Drops the trailing no-object entry of a query's head distribution and
// renormalizes over the head classes; classes outside the head get 0. All
// mass on no-object yields the uniform distribution over the head classes.
ClassProbabilities ClassifyStrategyB(std::span<const double> head_probs,
                                     const std::vector<int>& head_classes, int num_classes);

inline constexpr double kEnsembleFloor = 1e-6;

// p_i proportional to pA_i^lambda * max(pB_i, 1e-6)^(1 - lambda).
ClassProbabilities EnsembleProbs(const ClassProbabilities& a, const ClassProbabilities& b,
                                 double lambda);

struct CropDebugEntry {
  Crop crop;
  std::vector<ClassProbabilities> probs;
};

// One PPM per crop plus crops.json with the per-strategy probabilities.
void ExportCropDebug(const std::vector<CropDebugEntry>& entries,
                     const std::filesystem::path& dir);

}  // namespace ovseg
