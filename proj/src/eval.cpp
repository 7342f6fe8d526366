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

#include "ovseg/eval.hpp"

#include <cmath>
#include <limits>

namespace ovseg {

std::int64_t ConfusionMatrix::total() const {
  std::int64_t t = 0;
  for (auto c : counts) t += c;
  for (auto c : unassigned) t += c;
  return t;
}

std::int64_t ConfusionMatrix::row_sum(int c) const {
  std::int64_t t = 0;
  for (int j = 0; j < num_classes; ++j) t += at(c, j);
  return t + unassigned[c];
}

std::int64_t ConfusionMatrix::col_sum(int c) const {
  std::int64_t t = 0;
  for (int i = 0; i < num_classes; ++i) t += at(i, c);
  return t;
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
  Require(other.num_classes == num_classes, "confusion matrices differ in size");
  for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
  for (std::size_t i = 0; i < unassigned.size(); ++i) unassigned[i] += other.unassigned[i];
  return *this;
}

ConfusionMatrix ComputeConfusion(const LabelMap& pred, const LabelMap& gt, int num_classes) {
  Require(pred.width == gt.width && pred.height == gt.height,
          "prediction and ground truth differ in size");
  ConfusionMatrix cm(num_classes);
  for (std::size_t q = 0; q < gt.size(); ++q) {
    const int g = gt.labels[q];
    if (g == kIgnoreLabel) continue;
    const int p = pred.labels[q];
    Require(g < num_classes, "ground-truth label out of range");
    if (p == kIgnoreLabel) {
      ++cm.unassigned[g];
      continue;
    }
    Require(p < num_classes, "predicted label out of range on a labelled pixel");
    ++cm.at(g, p);
  }
  return cm;
}

IouResult IouAndMiou(const ConfusionMatrix& cm, const std::vector<int>& subset) {
  IouResult r;
  r.per_class.assign(cm.num_classes, std::numeric_limits<double>::quiet_NaN());
  for (int c = 0; c < cm.num_classes; ++c) {
    const std::int64_t tp = cm.at(c, c);
    const std::int64_t uni = cm.row_sum(c) + cm.col_sum(c) - tp;
    if (uni > 0) r.per_class[c] = double(tp) / double(uni);
  }
  double sum = 0.0;
  for (int c : subset) {
    Require(c >= 0 && c < cm.num_classes, "subset class out of range");
    if (std::isnan(r.per_class[c])) continue;
    r.effective.push_back(c);
    sum += r.per_class[c];
  }
  if (r.effective.empty())
    Fail(ErrorKind::kNumerical, "mIoU is undefined: no subset class appears in gt or prediction");
  r.miou = sum / r.effective.size();
  return r;
}

double Hiou(double seen, double unseen) {
  const double s = seen + unseen;
  return s > 0.0 ? 2.0 * seen * unseen / s : 0.0;
}

double PixelAccuracy(const ConfusionMatrix& cm) {
  const std::int64_t total = cm.total();
  if (total == 0) Fail(ErrorKind::kNumerical, "pixel accuracy of an empty confusion matrix");
  std::int64_t trace = 0;
  for (int c = 0; c < cm.num_classes; ++c) trace += cm.at(c, c);
  return double(trace) / double(total);
}

std::vector<int> OracleAssign(const std::vector<Mask>& proposals, const LabelMap& gt,
                              int num_classes, double threshold) {
  std::vector<int> out;
  std::vector<std::int64_t> overlap(num_classes);
  for (const Mask& m : proposals) {
    Require(m.width == gt.width && m.height == gt.height, "proposal and ground truth differ in size");
    std::fill(overlap.begin(), overlap.end(), 0);
    for (std::size_t q = 0; q < gt.size(); ++q) {
      const int g = gt.labels[q];
      if (g == kIgnoreLabel || m.values[q] < threshold) continue;
      Require(g < num_classes, "ground-truth label out of range");
      ++overlap[g];
    }
    int best = -1;
    std::int64_t best_count = 0;
    for (int c = 0; c < num_classes; ++c) {
      if (overlap[c] > best_count) {
        best_count = overlap[c];
        best = c;
      }
    }
    out.push_back(best);
  }
  return out;
}

MetricsReport MakeReport(const ConfusionMatrix& cm, const Vocabulary& vocab,
                         const SplitSpec& split) {
  Require(cm.num_classes == vocab.size(), "confusion matrix and vocabulary differ in size");
  MetricsReport r;
  std::vector<int> all(vocab.size());
  for (int c = 0; c < vocab.size(); ++c) all[c] = c;
  const IouResult full = IouAndMiou(cm, all);
  r.per_class_iou = full.per_class;
  r.miou_all = full.miou;
  r.miou_seen = IouAndMiou(cm, split.seen).miou;
  r.miou_unseen = IouAndMiou(cm, split.unseen).miou;
  r.hiou = Hiou(r.miou_seen, r.miou_unseen);
  r.pacc = PixelAccuracy(cm);
  r.miou_thing = IouAndMiou(cm, vocab.IndicesOfKind(ClassKind::kThing)).miou;
  r.miou_stuff = IouAndMiou(cm, vocab.IndicesOfKind(ClassKind::kStuff)).miou;
  r.thing_stuff_delta = r.miou_thing - r.miou_stuff;
  return r;
}

nlohmann::json ReportToJson(const MetricsReport& r, const Vocabulary& vocab) {
  nlohmann::json j;
  j["miou_all"] = 100.0 * r.miou_all;
  j["miou_seen"] = 100.0 * r.miou_seen;
  j["miou_unseen"] = 100.0 * r.miou_unseen;
  j["hiou"] = 100.0 * r.hiou;
  j["pacc"] = 100.0 * r.pacc;
  j["miou_thing"] = 100.0 * r.miou_thing;
  j["miou_stuff"] = 100.0 * r.miou_stuff;
  j["thing_stuff_delta"] = 100.0 * r.thing_stuff_delta;
  nlohmann::json per = nlohmann::json::object();
  for (int c = 0; c < vocab.size(); ++c)
    per[vocab[c].name] = std::isnan(r.per_class_iou[c]) ? nlohmann::json(nullptr)
                                                        : nlohmann::json(100.0 * r.per_class_iou[c]);
  j["per_class_iou"] = per;
  return j;
}

}  // namespace ovseg
