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

#include "ovseg/classify.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "ovseg/json_io.hpp"
#include "ovseg/pnm.hpp"

namespace ovseg {

const char* FillModeName(FillMode mode) {
  switch (mode) {
    case FillMode::kPreserve: return "preserve";
    case FillMode::kZero: return "zero";
    case FillMode::kMean: return "mean";
  }
  return "?";
}

FillMode ParseFillMode(const std::string& name) {
  if (name == "preserve") return FillMode::kPreserve;
  if (name == "zero") return FillMode::kZero;
  if (name == "mean") return FillMode::kMean;
  Fail(ErrorKind::kInvalidConfig, "unknown fill mode \"" + name + "\" (preserve, zero, mean)");
}

void CropConfig::Validate() const {
  if (!(threshold > 0.0 && threshold < 1.0))
    Fail(ErrorKind::kInvalidConfig, "crop threshold must lie in (0, 1)");
  if (!(expand >= 1.0)) Fail(ErrorKind::kInvalidConfig, "crop expansion ratio must be >= 1");
  if (size < 1) Fail(ErrorKind::kInvalidConfig, "crop size must be >= 1");
}

bool MaskIsEmpty(const Mask& mask, double threshold) {
  for (double v : mask.values)
    if (v >= threshold) return false;
  return true;
}

CropBox ExpandedBox(const Mask& mask, double threshold, double expand) {
  CropBox b{mask.width, mask.height, -1, -1};
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      if (mask.at(x, y) < threshold) continue;
      b.x0 = std::min(b.x0, x);
      b.y0 = std::min(b.y0, y);
      b.x1 = std::max(b.x1, x);
      b.y1 = std::max(b.y1, y);
    }
  }
  if (b.x1 < 0) Fail(ErrorKind::kInvalidArgument, "proposal is empty after binarization");
  auto expand_axis = [&](int lo, int hi, int limit, int* out_lo, int* out_hi) {
    const double centre = (lo + hi + 1) / 2.0;
    const double half = (hi - lo + 1) * expand / 2.0;
    *out_lo = std::max(0, static_cast<int>(std::floor(centre - half)));
    *out_hi = std::min(limit - 1, static_cast<int>(std::ceil(centre + half)) - 1);
  };
  CropBox out;
  expand_axis(b.x0, b.x1, mask.width, &out.x0, &out.x1);
  expand_axis(b.y0, b.y1, mask.height, &out.y0, &out.y1);
  return out;
}

Image FilledRegion(const Image& image, const Mask& mask, const CropConfig& config, CropBox* box) {
  config.Validate();
  Require(mask.width == image.width && mask.height == image.height,
          "mask and image size differ");
  const CropBox b = ExpandedBox(mask, config.threshold, config.expand);
  if (box != nullptr) *box = b;
  Image out = CropImage(image, b.x0, b.y0, b.x1, b.y1);
  if (config.fill == FillMode::kPreserve) return out;
  const std::array<std::uint8_t, 3> fill =
      config.fill == FillMode::kZero ? std::array<std::uint8_t, 3>{0, 0, 0} : config.mean;
  for (int y = b.y0; y <= b.y1; ++y)
    for (int x = b.x0; x <= b.x1; ++x)
      if (mask.at(x, y) < config.threshold) out.set(x - b.x0, y - b.y0, fill);
  return out;
}

Crop MakeCrop(const Image& image, const Mask& mask, const CropConfig& config,
              std::string image_id, int proposal) {
  Crop c;
  c.image = ResizeArea(FilledRegion(image, mask, config, &c.box), config.size, config.size);
  c.image_id = std::move(image_id);
  c.proposal = proposal;
  return c;
}

const char* StrategyName(Strategy s) {
  switch (s) {
    case Strategy::kA: return "A";
    case Strategy::kB: return "B";
    case Strategy::kEnsemble: return "ensemble";
  }
  return "?";
}

Strategy ParseStrategy(const std::string& name) {
  if (name == "A" || name == "a") return Strategy::kA;
  if (name == "B" || name == "b") return Strategy::kB;
  if (name == "ensemble") return Strategy::kEnsemble;
  Fail(ErrorKind::kInvalidConfig, "unknown strategy \"" + name + "\" (A, B, ensemble)");
}

ClassProbabilities ClassifyStrategyA(std::span<const double> vision_embedding,
                                     const ClassEmbeddings& text, double scale) {
  for (int i = 0; i < text.size(); ++i)
    if (text.classes[i] != i)
      Fail(ErrorKind::kInvalidArgument, "strategy A needs embeddings for the whole vocabulary");
  ClassProbabilities out;
  out.strategy = Strategy::kA;
  out.p = ClassifyEmbedding(vision_embedding, text.vectors, scale);
  return out;
}

ClassProbabilities ClassifyStrategyA(const VLModel& model, const Image& crop,
                                     const ClassEmbeddings& text) {
  return ClassifyStrategyA(EncodeVision(model, crop), text, model.eval_scale);
}

ClassProbabilities ClassifyStrategyB(std::span<const double> head_probs,
                                     const std::vector<int>& head_classes, int num_classes) {
  const int s = static_cast<int>(head_classes.size());
  if (s == 0 || static_cast<int>(head_probs.size()) != s + 1)
    Fail(ErrorKind::kInvalidArgument, "missing or misaligned strategy-B scores");
  ClassProbabilities out;
  out.strategy = Strategy::kB;
  out.p.assign(num_classes, 0.0);
  double mass = 0.0;
  for (int i = 0; i < s; ++i) mass += head_probs[i];
  for (int i = 0; i < s; ++i) {
    Require(head_classes[i] >= 0 && head_classes[i] < num_classes, "head class out of range");
    out.p[head_classes[i]] = mass > 0.0 ? head_probs[i] / mass : 1.0 / s;
  }
  return out;
}

ClassProbabilities EnsembleProbs(const ClassProbabilities& a, const ClassProbabilities& b,
                                 double lambda) {
  Require(a.p.size() == b.p.size(), "ensemble inputs differ in length");
  Require(lambda >= 0.0 && lambda <= 1.0, "ensemble lambda must lie in [0, 1]");
  ClassProbabilities out;
  out.strategy = Strategy::kEnsemble;
  out.p.resize(a.p.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < a.p.size(); ++i) {
    out.p[i] = std::pow(a.p[i], lambda) * std::pow(std::max(b.p[i], kEnsembleFloor), 1.0 - lambda);
    sum += out.p[i];
  }
  if (!(sum > 0.0)) Fail(ErrorKind::kNumerical, "ensemble has zero total mass");
  for (double& v : out.p) v /= sum;
  return out;
}

void ExportCropDebug(const std::vector<CropDebugEntry>& entries,
                     const std::filesystem::path& dir) {
  Json index = Json::array();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    char name[32];
    std::snprintf(name, sizeof(name), "crop_%04zu.ppm", i);
    WritePpm(dir / name, e.crop.image);
    Json j;
    j["file"] = name;
    j["image_id"] = e.crop.image_id;
    j["proposal"] = e.crop.proposal;
    j["box"] = {e.crop.box.x0, e.crop.box.y0, e.crop.box.x1, e.crop.box.y1};
    for (const auto& p : e.probs) j["probs"][StrategyName(p.strategy)] = p.p;
    index.push_back(j);
  }
  WriteJsonFile(dir / "crops.json", index);
}

}  // namespace ovseg
