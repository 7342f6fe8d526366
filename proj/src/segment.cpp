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

#include "ovseg/segment.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ovseg/json_io.hpp"
#include "ovseg/optim.hpp"
#include "ovseg/parallel.hpp"
#include "ovseg/pnm.hpp"
#include "ovseg/rng.hpp"

namespace ovseg {

ScoreMap AssembleScores(const std::vector<Mask>& masks, const std::vector<Vec>& probs,
                        int num_classes) {
  Require(!masks.empty(), "assembly needs at least one proposal");
  Require(masks.size() == probs.size(), "proposal and probability counts differ");
  const int w = masks[0].width, h = masks[0].height;
  for (std::size_t k = 0; k < masks.size(); ++k) {
    Require(masks[k].width == w && masks[k].height == h, "proposal sizes differ");
    Require(static_cast<int>(probs[k].size()) == num_classes, "probability length mismatch");
  }
  // Exact sums make the result independent of proposal order and invariant
  // to duplicating every proposal.
  ScoreMap out(w, h, num_classes);
  ExactSum total;
  std::vector<ExactSum> sums(num_classes);
  for (int q = 0; q < w * h; ++q) {
    total.Reset();
    for (auto& e : sums) e.Reset();
    for (std::size_t k = 0; k < masks.size(); ++k) {
      const double m = masks[k].values[q];
      if (m == 0.0) continue;
      total.Add(m);
      for (int c = 0; c < num_classes; ++c) sums[c].Add(m * probs[k][c]);
    }
    const double weight = total.Value();
    if (weight > 0.0) {
      out.covered[q] = 1;
      auto s = out.pixel(q);
      for (int c = 0; c < num_classes; ++c) s[c] = sums[c].Value() / weight;
    }
  }
  return out;
}

SegResult ArgmaxSegmentation(const ScoreMap& scores, int fallback) {
  Require(fallback >= 0 && fallback <= 255, "fallback label out of range");
  SegResult r;
  r.labels = LabelMap(scores.width, scores.height);
  r.covered = scores.covered;
  for (int q = 0; q < scores.pixels(); ++q) {
    if (!scores.covered[q]) {
      r.labels.labels[q] = static_cast<std::uint8_t>(fallback);
      continue;
    }
    auto s = scores.pixel(q);
    r.labels.labels[q] = static_cast<std::uint8_t>(std::max_element(s.begin(), s.end()) - s.begin());
  }
  return r;
}

const char* GeneratorName(Generator g) {
  switch (g) {
    case Generator::kQuery: return "query";
    case Generator::kFelz: return "felz";
    case Generator::kHierarchical: return "hierarchical";
  }
  return "?";
}

Generator ParseGenerator(const std::string& name) {
  if (name == "query") return Generator::kQuery;
  if (name == "felz") return Generator::kFelz;
  if (name == "hierarchical") return Generator::kHierarchical;
  Fail(ErrorKind::kInvalidConfig,
       "unknown proposal generator \"" + name + "\" (query, felz, hierarchical)");
}

ProposalSet GenerateProposals(const Pipeline& pipeline, const Image& image,
                              const std::string& image_id) {
  const PipelineConfig& cfg = pipeline.config;
  ProposalSet set;
  switch (cfg.generator) {
    case Generator::kQuery:
      if (pipeline.query == nullptr)
        Fail(ErrorKind::kMissingArtifact, "query proposals need a trained query model");
      set = QueryProposals(*pipeline.query, image, pipeline.head, image_id);
      break;
    case Generator::kFelz: {
      const RegionPartition part = FelzPartition(image, cfg.felz_k, cfg.felz_min_size);
      for (int r = 0; r < part.num_regions; ++r) {
        Mask m(image.width, image.height);
        for (std::size_t i = 0; i < part.ids.size(); ++i) m.values[i] = part.ids[i] == r;
        set.masks.push_back(std::move(m));
      }
      break;
    }
    case Generator::kHierarchical:
      set = HierarchicalProposals(FelzPartition(image, cfg.felz_k, cfg.felz_min_size), image,
                                  cfg.hierarchy);
      break;
  }
  set.image_id = image_id;
  return set;
}

ClassifiedProposals ClassifyProposals(const Pipeline& pipeline, const Image& image,
                                      ProposalSet proposals) {
  Require(pipeline.vlm != nullptr, "pipeline has no vision-language model");
  ClassifiedProposals out;
  out.proposals = std::move(proposals);
  const int k = pipeline.num_classes();
  for (int i = 0; i < out.proposals.size(); ++i) {
    const Mask& m = out.proposals.masks[i];
    if (MaskIsEmpty(m, pipeline.config.crop.threshold)) continue;
    out.kept.push_back(i);
    const Crop crop = MakeCrop(image, m, pipeline.config.crop, out.proposals.image_id, i);
    out.a.push_back(ClassifyStrategyA(*pipeline.vlm, crop.image, pipeline.text));
    if (out.proposals.has_head_probs())
      out.b.push_back(ClassifyStrategyB(out.proposals.head_probs[i],
                                        out.proposals.head_classes, k));
  }
  return out;
}

SegmentOutput SegmentClassified(const ClassifiedProposals& c, int num_classes,
                                Strategy strategy, double lambda, int fallback) {
  SegmentOutput out;
  const int w = c.proposals.masks.empty() ? 0 : c.proposals.masks[0].width;
  const int h = c.proposals.masks.empty() ? 0 : c.proposals.masks[0].height;
  if (c.kept.empty()) {
    out.warnings.push_back("image " + c.proposals.image_id +
                           ": every proposal is empty after binarization; using the fallback");
    out.scores = ScoreMap(w, h, num_classes);
    out.result = ArgmaxSegmentation(out.scores, fallback);
    return out;
  }
  if (strategy != Strategy::kA && c.b.size() != c.kept.size())
    Fail(ErrorKind::kInvalidArgument,
         std::string("strategy ") + StrategyName(strategy) + " needs strategy-B scores");
  std::vector<Mask> masks;
  std::vector<Vec> probs;
  for (std::size_t i = 0; i < c.kept.size(); ++i) {
    masks.push_back(c.proposals.masks[c.kept[i]]);
    switch (strategy) {
      case Strategy::kA: probs.push_back(c.a[i].p); break;
      case Strategy::kB: probs.push_back(c.b[i].p); break;
      case Strategy::kEnsemble: probs.push_back(EnsembleProbs(c.a[i], c.b[i], lambda).p); break;
    }
  }
  out.scores = AssembleScores(masks, probs, num_classes);
  out.result = ArgmaxSegmentation(out.scores, fallback);
  return out;
}

SegmentOutput SegmentImage(const Pipeline& pipeline, const Image& image,
                           const std::string& image_id) {
  const ClassifiedProposals c =
      ClassifyProposals(pipeline, image, GenerateProposals(pipeline, image, image_id));
  return SegmentClassified(c, pipeline.num_classes(), pipeline.config.strategy,
                           pipeline.config.lambda, pipeline.config.fallback);
}

ScoreMap OneHotScores(const ProposalSet& proposals, const std::vector<int>& labels,
                      int num_classes) {
  Require(static_cast<int>(labels.size()) == proposals.size(), "one label per proposal");
  std::vector<Mask> masks;
  std::vector<Vec> probs;
  for (int i = 0; i < proposals.size(); ++i) {
    if (labels[i] < 0) continue;
    masks.push_back(proposals.masks[i]);
    Vec p(num_classes, 0.0);
    p[labels[i]] = 1.0;
    probs.push_back(std::move(p));
  }
  if (masks.empty()) {
    const int w = proposals.masks.empty() ? 0 : proposals.masks[0].width;
    const int h = proposals.masks.empty() ? 0 : proposals.masks[0].height;
    return ScoreMap(w, h, num_classes);
  }
  return AssembleScores(masks, probs, num_classes);
}

FcnParams FcnParams::Zeros() {
  FcnParams p;
  p.embed = Matrix(kPixelEmbed, kPixelFeatures);
  p.bias.assign(kPixelEmbed, 0.0);
  return p;
}

std::vector<std::span<double>> FcnParams::Tensors() { return {embed.data, bias}; }
std::vector<std::span<const double>> FcnParams::Tensors() const { return {embed.data, bias}; }

const std::vector<std::string>& FcnParams::TensorNames() {
  static const std::vector<std::string> names = {"embed", "bias"};
  return names;
}

FcnModel InitFcn(std::uint64_t seed) {
  FcnModel m;
  m.seed = seed;
  m.params = FcnParams::Zeros();
  SplitMix64 rng(seed);
  for (double& x : m.params.embed.data) x = rng.Uniform(-0.05, 0.05);
  return m;
}

FcnExample MakeFcnExample(const Image& image, const LabelMap& labels,
                          const std::vector<int>& head_classes) {
  Require(labels.width == image.width && labels.height == image.height,
          "label map and image size differ");
  FcnExample ex;
  ex.features = PixelFeatures(image);
  std::vector<int> row_of(256, -1);
  for (std::size_t i = 0; i < head_classes.size(); ++i) row_of[head_classes[i]] = static_cast<int>(i);
  ex.target.resize(labels.size());
  for (std::size_t q = 0; q < labels.size(); ++q) ex.target[q] = row_of[labels.labels[q]];
  return ex;
}

namespace {

// Unit pixel embedding; returns the pre-normalization norm.
double PixelEmbedding(const FcnParams& p, std::span<const double> phi, Vec* e) {
  e->assign(kPixelEmbed, 0.0);
  for (int d = 0; d < kPixelEmbed; ++d) (*e)[d] = Dot(p.embed.row(d), phi) + p.bias[d];
  return NormalizeInPlace(*e);
}

}  // namespace

double FcnLossAndGrads(const FcnModel& model, const std::vector<const FcnExample*>& batch,
                       const Matrix& head, FcnParams* grads) {
  Require(!batch.empty(), "FCN batch is empty");
  Require(head.cols == kEmbedDim && head.rows >= 1, "FCN head must be S x 32");
  std::int64_t count = 0;
  for (const FcnExample* ex : batch)
    for (int t : ex->target) count += t >= 0;
  if (count == 0) return 0.0;
  const FcnParams& p = model.params;
  double loss = 0.0;
  Vec e, logits(head.rows), probs, ge(kEmbedDim);
  for (const FcnExample* ex : batch) {
    Require(ex->features.cols == kPixelFeatures, "pixel features must have 8 columns");
    for (int q = 0; q < ex->features.rows; ++q) {
      const int t = ex->target[q];
      if (t < 0) continue;
      Require(t < head.rows, "FCN target outside the head");
      auto phi = ex->features.row(q);
      const double norm = PixelEmbedding(p, phi, &e);
      for (int c = 0; c < head.rows; ++c) logits[c] = model.class_scale * Dot(e, head.row(c));
      loss += SoftmaxCrossEntropy(logits, t, &probs);
      if (grads == nullptr) continue;
      std::fill(ge.begin(), ge.end(), 0.0);
      for (int c = 0; c < head.rows; ++c) {
        const double g = model.class_scale * (probs[c] - (c == t)) / count;
        auto row = head.row(c);
        for (int d = 0; d < kEmbedDim; ++d) ge[d] += g * row[d];
      }
      const Vec graw = NormalizeBackward(e, norm, ge);
      OuterAdd(grads->embed, graw, phi);
      for (int d = 0; d < kPixelEmbed; ++d) grads->bias[d] += graw[d];
    }
  }
  return loss / count;
}

FcnModel TrainFcn(const std::vector<Scene>& scenes, const ClassEmbeddings& head,
                  const FcnTrainConfig& config, FcnTrainLog* log) {
  FcnModel model = InitFcn(config.seed);
  if (config.steps <= 0) return model;
  if (scenes.empty()) Fail(ErrorKind::kInvalidArgument, "FCN training needs scenes");
  const int n = static_cast<int>(scenes.size());
  const int batch = std::min(config.batch, n);
  SplitMix64 rng(DeriveSeed(config.seed, 17, 0));
  SgdMomentum<FcnParams> opt(FcnParams::Zeros(), config.momentum);
  FcnParams grads = FcnParams::Zeros();
  std::vector<int> order(n);
  std::vector<FcnExample> examples(batch);
  std::vector<const FcnExample*> ptrs(batch);
  for (int step = 0; step < config.steps; ++step) {
    std::iota(order.begin(), order.end(), 0);
    for (int i = 0; i < batch; ++i) {
      const int j = i + static_cast<int>(rng.Below(static_cast<std::uint64_t>(n - i)));
      std::swap(order[i], order[j]);
      examples[i] = MakeFcnExample(scenes[order[i]].image, scenes[order[i]].labels, head.classes);
      ptrs[i] = &examples[i];
    }
    SetZero(grads);
    const double loss = FcnLossAndGrads(model, ptrs, head.vectors, &grads);
    if (!std::isfinite(loss) || !AllFinite(grads))
      Fail(ErrorKind::kNumerical, "FCN training diverged at step " + std::to_string(step));
    if (log != nullptr) log->step_losses.push_back(loss);
    opt.Step(model.params, grads, config.lr);
  }
  return model;
}

ScoreMap FcnScores(const FcnModel& model, const Image& image, const ClassEmbeddings& text) {
  const Matrix features = PixelFeatures(image);
  ScoreMap out(image.width, image.height, text.size());
  Vec e, logits(text.size());
  for (int q = 0; q < features.rows; ++q) {
    PixelEmbedding(model.params, features.row(q), &e);
    for (int c = 0; c < text.size(); ++c) logits[c] = model.class_scale * Dot(e, text.vectors.row(c));
    const Vec p = Softmax(logits);
    std::copy(p.begin(), p.end(), out.pixel(q).begin());
    out.covered[q] = 1;
  }
  return out;
}

namespace {

std::vector<int> WindowStarts(int length, int window, int stride) {
  std::vector<int> starts;
  for (int s = 0; s + window < length; s += stride) starts.push_back(s);
  if (starts.empty() || starts.back() != length - window) starts.push_back(length - window);
  return starts;
}

}  // namespace

ScoreMap SlidingWindowScores(const VLModel& model, const Image& image, int window, int stride,
                             const ClassEmbeddings& text) {
  if (stride <= 0) Fail(ErrorKind::kInvalidArgument, "sliding-window stride must be positive");
  Require(window >= 1 && window <= image.width && window <= image.height,
          "sliding window must fit inside the image");
  const int k = text.size();
  ScoreMap out(image.width, image.height, k);
  std::vector<int> counts(out.pixels(), 0);
  for (int y0 : WindowStarts(image.height, window, stride)) {
    for (int x0 : WindowStarts(image.width, window, stride)) {
      const Image crop = CropImage(image, x0, y0, x0 + window - 1, y0 + window - 1);
      const Vec p = ClassifyStrategyA(model, crop, text).p;
      for (int y = y0; y < y0 + window; ++y) {
        for (int x = x0; x < x0 + window; ++x) {
          const int q = y * image.width + x;
          auto s = out.pixel(q);
          for (int c = 0; c < k; ++c) s[c] += p[c];
          ++counts[q];
        }
      }
    }
  }
  for (int q = 0; q < out.pixels(); ++q) {
    for (double& v : out.pixel(q)) v /= counts[q];
    out.covered[q] = 1;
  }
  return out;
}

ScoreMap WholeImageScores(const VLModel& model, const Image& image, const ClassEmbeddings& text) {
  const Vec p = ClassifyStrategyA(model, image, text).p;
  ScoreMap out(image.width, image.height, text.size());
  for (int q = 0; q < out.pixels(); ++q) {
    std::copy(p.begin(), p.end(), out.pixel(q).begin());
    out.covered[q] = 1;
  }
  return out;
}

ScoreMap EnsembleScoreMaps(const ScoreMap& a, const ScoreMap& b, double lambda) {
  Require(a.width == b.width && a.height == b.height && a.num_classes == b.num_classes,
          "score maps differ in shape");
  ScoreMap out(a.width, a.height, a.num_classes);
  ClassProbabilities pa, pb;
  for (int q = 0; q < a.pixels(); ++q) {
    if (!a.covered[q] || !b.covered[q]) continue;
    pa.p.assign(a.pixel(q).begin(), a.pixel(q).end());
    pb.p.assign(b.pixel(q).begin(), b.pixel(q).end());
    const Vec e = EnsembleProbs(pa, pb, lambda).p;
    std::copy(e.begin(), e.end(), out.pixel(q).begin());
    out.covered[q] = 1;
  }
  return out;
}

std::vector<Scene> PseudoLabel(const Pipeline& pipeline, const std::vector<Scene>& train,
                               const std::vector<int>& unseen, double confidence,
                               PseudoLabelStats* stats, int threads) {
  std::vector<char> is_unseen(256, 0);
  for (int c : unseen) is_unseen[c] = 1;
  std::vector<Scene> out = train;
  std::vector<PseudoLabelStats> per(train.size());
  ParallelFor(static_cast<int>(train.size()), threads, [&](int i) {
    Scene& scene = out[i];
    const SegmentOutput seg = SegmentImage(pipeline, scene.image, scene.id);
    for (int q = 0; q < seg.scores.pixels(); ++q) {
      if (scene.labels.labels[q] != kIgnoreLabel) continue;
      ++per[i].candidates;
      if (!seg.scores.covered[q]) continue;
      const int c = seg.result.labels.labels[q];
      if (!is_unseen[c]) continue;
      auto s = seg.scores.pixel(q);
      const double total = std::accumulate(s.begin(), s.end(), 0.0);
      if (total > 0.0 && s[c] / total >= confidence) {
        scene.labels.labels[q] = static_cast<std::uint8_t>(c);
        ++per[i].relabeled;
      }
    }
  });
  if (stats != nullptr) {
    *stats = PseudoLabelStats{};
    for (const auto& p : per) {
      stats->candidates += p.candidates;
      stats->relabeled += p.relabeled;
    }
  }
  return out;
}

SelfTrainResult SelfTrain(const Pipeline& pipeline, const std::vector<Scene>& train,
                          const SplitSpec& split, const ClassEmbeddings& full_head,
                          const SelfTrainConfig& config, int threads) {
  Require(pipeline.query != nullptr, "self-training needs a query model");
  SelfTrainResult result{*pipeline.query, pipeline.head, {}};
  for (int round = 0; round < config.rounds; ++round) {
    Pipeline current = pipeline;
    current.query = &result.query;
    current.head = result.head;
    PseudoLabelStats stats;
    const std::vector<Scene> labelled =
        PseudoLabel(current, train, split.unseen, config.confidence, &stats, threads);
    result.rounds.push_back(stats);
    result.query = TrainQueryModel(labelled, full_head, config.query);
    result.head = full_head;
  }
  return result;
}

nlohmann::json FcnToJson(const FcnModel& model) {
  Json j;
  j["class_scale"] = model.class_scale;
  j["seed"] = model.seed;
  j["embed"] = ToJson(model.params.embed);
  j["bias"] = model.params.bias;
  return j;
}

FcnModel FcnFromJson(const nlohmann::json& j) {
  FcnModel m;
  m.class_scale = j.at("class_scale").get<double>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.params.embed = MatrixFromJson(j.at("embed"), "FCN embed");
  m.params.bias = VecFromJson(j.at("bias"), "FCN bias");
  if (m.params.embed.rows != kPixelEmbed || m.params.embed.cols != kPixelFeatures ||
      m.params.bias.size() != std::size_t(kPixelEmbed))
    Fail(ErrorKind::kIntegrity, "FCN checkpoint has the wrong shape");
  return m;
}

std::array<std::uint8_t, 3> ClassColor(int c) {
  static const std::array<std::uint8_t, 3> table[] = {
      {31, 119, 180}, {255, 127, 14}, {44, 160, 44},  {214, 39, 40},
      {148, 103, 189}, {140, 86, 75}, {227, 119, 194}, {127, 127, 127},
      {188, 189, 34}, {23, 190, 207}, {255, 255, 255}, {0, 0, 0}};
  constexpr int n = sizeof(table) / sizeof(table[0]);
  if (c >= 0 && c < n) return table[c];
  SplitMix64 rng(static_cast<std::uint64_t>(c));
  const std::uint64_t v = rng.Next();
  return {static_cast<std::uint8_t>(v), static_cast<std::uint8_t>(v >> 8),
          static_cast<std::uint8_t>(v >> 16)};
}

void ExportSegResult(const SegResult& result, const Image* image,
                     const std::filesystem::path& stem) {
  WritePgm(stem.string() + ".pgm", result.labels);
  if (image == nullptr) return;
  Require(image->width == result.labels.width && image->height == result.labels.height,
          "overlay image size differs");
  Image overlay = *image;
  for (int y = 0; y < image->height; ++y) {
    for (int x = 0; x < image->width; ++x) {
      const int l = result.labels.at(x, y);
      if (l == kIgnoreLabel) continue;
      const auto col = ClassColor(l);
      std::array<std::uint8_t, 3> px;
      for (int c = 0; c < 3; ++c) px[c] = static_cast<std::uint8_t>((image->at(x, y, c) + col[c] + 1) / 2);
      overlay.set(x, y, px);
    }
  }
  WritePpm(stem.string() + "_overlay.ppm", overlay);
}

}  // namespace ovseg
