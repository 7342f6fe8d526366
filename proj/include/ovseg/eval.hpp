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
#include "ovseg/data.hpp"
#include "ovseg/image.hpp"
#include "ovseg/proposals.hpp"

namespace ovseg {

// Counts indexed (gt, pred) over non-ignored ground-truth pixels. Pixels
// predicted as kIgnoreLabel are kept per gt class in `unassigned`; they count
// as errors.
struct ConfusionMatrix {
  int num_classes = 0;
  std::vector<std::int64_t> counts;
  std::vector<std::int64_t> unassigned;

  ConfusionMatrix() = default;
  explicit ConfusionMatrix(int k)
      : num_classes(k), counts(std::size_t(k) * k, 0), unassigned(k, 0) {}
  std::int64_t at(int gt, int pred) const { return counts[std::size_t(gt) * num_classes + pred]; }
  std::int64_t& at(int gt, int pred) { return counts[std::size_t(gt) * num_classes + pred]; }
  std::int64_t total() const;
  std::int64_t row_sum(int c) const;
  std::int64_t col_sum(int c) const;
  ConfusionMatrix& operator+=(const ConfusionMatrix& other);
  bool operator==(const ConfusionMatrix&) const = default;
};

// Predictions outside [0, K) other than kIgnoreLabel raise kInvalidArgument.
ConfusionMatrix ComputeConfusion(const LabelMap& pred, const LabelMap& gt, int num_classes);

struct IouResult {
  Vec per_class;               // NaN for classes absent from gt and prediction
  std::vector<int> effective;  // subset members present in gt or prediction
  double miou = 0.0;
};

// IoU_c = cm[c,c] / (row_c + col_c - cm[c,c]); the mean skips classes absent
// from both. An empty effective subset raises kNumerical.
IouResult IouAndMiou(const ConfusionMatrix& cm, const std::vector<int>& subset);

// Harmonic mean 2ab / (a + b), 0 when a + b = 0.
double Hiou(double seen, double unseen);

// trace / total; zero total raises kNumerical.
double PixelAccuracy(const ConfusionMatrix& cm);

// Class of the largest overlap between the binarized proposal and the
// non-ignored ground truth, ties to the lower index; -1 when there is no
// overlap.
std::vector<int> OracleAssign(const std::vector<Mask>& proposals, const LabelMap& gt,
                              int num_classes, double threshold = 0.5);

// Scores on the 0..1 scale.
struct MetricsReport {
  std::vector<double> per_class_iou;
  double miou_all = 0.0;
  double miou_seen = 0.0;
  double miou_unseen = 0.0;
  double hiou = 0.0;
  double pacc = 0.0;
  double miou_thing = 0.0;
  double miou_stuff = 0.0;
  double thing_stuff_delta = 0.0;  // thing minus stuff
};

MetricsReport MakeReport(const ConfusionMatrix& cm, const Vocabulary& vocab,
                         const SplitSpec& split);

// Scalars scaled by 100; per-class IoU keyed by class name.
nlohmann::json ReportToJson(const MetricsReport& report, const Vocabulary& vocab);

}  // namespace ovseg
