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

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "ovseg/json_io.hpp"
#include "ovseg/pnm.hpp"
#include "ovseg/proposals.hpp"
#include "support/grad_cases.hpp"
#include "support/oracles.hpp"

namespace ovseg {
namespace {

Image Solid(int w, int h, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  Image im(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      im.set(x, y, {r, g, b});
    }
  return im;
}

// Contiguous first-appearance ids and adjacency recomputed from scratch.
void ExpectValidPartition(const RegionPartition& p) {
  ASSERT_EQ(p.ids.size(), std::size_t(p.width) * p.height);
  int next = 0;
  for (int id : p.ids) {
    ASSERT_GE(id, 0);
    ASSERT_LE(id, next);
    if (id == next) ++next;
  }
  EXPECT_EQ(next, p.num_regions);
  std::set<std::pair<int, int>> adj;
  for (int y = 0; y < p.height; ++y)
    for (int x = 0; x < p.width; ++x) {
      const int a = p.at(x, y);
      if (x + 1 < p.width && p.at(x + 1, y) != a) adj.insert(std::minmax(a, p.at(x + 1, y)));
      if (y + 1 < p.height && p.at(x, y + 1) != a) adj.insert(std::minmax(a, p.at(x, y + 1)));
    }
  EXPECT_EQ(p.adjacency, (std::vector<std::pair<int, int>>(adj.begin(), adj.end())));
}

TEST(MakePartition, RelabelsInRasterOrder) {
  const RegionPartition p = MakePartition(3, 2, {7, 7, 2, 9, 7, 2});
  EXPECT_EQ(p.ids, (std::vector<int>{0, 0, 1, 2, 0, 1}));
  EXPECT_EQ(p.num_regions, 3);
  EXPECT_EQ(p.adjacency, (std::vector<std::pair<int, int>>{{0, 1}, {0, 2}}));
}

TEST(FelzPartition, ConstantImageIsOneRegion) {
  for (double k : {1.0, 50.0, 1000.0}) {
    const RegionPartition p = FelzPartition(Solid(9, 7, 40, 90, 200), k, 1);
    EXPECT_EQ(p.num_regions, 1);
    ExpectValidPartition(p);
  }
}

TEST(FelzPartition, BlackAndWhiteHalvesStaySeparate) {
  // Edges weigh 0 inside a half and 255*sqrt(3) across, far above k/|C|.
  Image im = Solid(6, 4, 0, 0, 0);
  for (int y = 0; y < 4; ++y)
    for (int x = 3; x < 6; ++x)
      im.set(x, y, {255, 255, 255});
  const RegionPartition p = FelzPartition(im, 10.0, 2);
  ASSERT_EQ(p.num_regions, 2);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 6; ++x) EXPECT_EQ(p.at(x, y), x < 3 ? 0 : 1);
  EXPECT_EQ(p.adjacency, (std::vector<std::pair<int, int>>{{0, 1}}));
}

TEST(FelzPartition, MinSizeAbsorbsSmallRegions) {
  Image im = Solid(8, 8, 0, 0, 0);
  im.set(4, 4, {255, 255, 255});
  EXPECT_EQ(FelzPartition(im, 1.0, 1).num_regions, 2);
  EXPECT_EQ(FelzPartition(im, 1.0, 2).num_regions, 1);
}

TEST(FelzPartition, RandomImagesGiveValidDeterministicPartitions) {
  SplitMix64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const int w = 4 + static_cast<int>(rng.Below(20));
    const int h = 4 + static_cast<int>(rng.Below(20));
    const Image im = testing::RandomImage(w, h, rng);
    const double k = rng.Uniform(10.0, 500.0);
    const int min_size = 1 + static_cast<int>(rng.Below(10));
    const RegionPartition p = FelzPartition(im, k, min_size);
    ExpectValidPartition(p);
    EXPECT_EQ(p, FelzPartition(im, k, min_size));
  }
}

TEST(FelzPartition, InvalidInputsAreErrors) {
  EXPECT_THROW(FelzPartition(Image(), 10.0, 1), Error);
  EXPECT_THROW(FelzPartition(Solid(2, 2, 0, 0, 0), 0.0, 1), Error);
}

TEST(HierarchicalProposals, SingleRegionCoversTheImage) {
  const Image im = Solid(5, 4, 10, 20, 30);
  const ProposalSet s = HierarchicalProposals(MakePartition(5, 4, std::vector<int>(20, 0)), im, {});
  ASSERT_EQ(s.size(), 1);
  for (double v : s.masks[0].values) EXPECT_EQ(v, 1.0);
}

TEST(HierarchicalProposals, EmitsTwoRMinusOneNestedBinaryMasks) {
  SplitMix64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const Image im = testing::RandomImage(12, 10, rng);
    const RegionPartition p = FelzPartition(im, rng.Uniform(50.0, 400.0), 3);
    std::vector<std::pair<int, int>> merges;
    const ProposalSet s = HierarchicalProposals(p, im, {}, &merges);
    ASSERT_EQ(s.size(), 2 * p.num_regions - 1);
    ASSERT_EQ(merges.size(), std::size_t(p.num_regions - 1));
    for (const Mask& m : s.masks) {
      EXPECT_EQ(m.width, 12);
      EXPECT_EQ(m.height, 10);
      for (double v : m.values) EXPECT_TRUE(v == 0.0 || v == 1.0);
    }
    for (std::size_t i = 0; i < merges.size(); ++i) {
      const Mask& merged = s.masks[p.num_regions + i];
      for (std::size_t q = 0; q < merged.size(); ++q)
        EXPECT_EQ(merged.values[q],
                  std::max(s.masks[merges[i].first].values[q], s.masks[merges[i].second].values[q]));
    }
    for (double v : s.masks.back().values) EXPECT_EQ(v, 1.0);
  }
}

TEST(HierarchicalProposals, MergeOrderFollowsHandComputedSimilarities) {
  // Pixels 0 and 1 share histogram bin 0; pixel 2 falls in bin 7. Area 3.
  //   s(0,1) = 1 + (1 - 2/3) + (1 - 0) = 7/3
  //   s(1,2) = 0 + (1 - 2/3) + (1 - 0) = 4/3
  // then s(2,3) = 0 + (1 - 3/3) + 1 = 1 for the merged region 3.
  Image im(3, 1);
  im.set(0, 0, {0, 0, 0});
  im.set(1, 0, {20, 20, 20});
  im.set(2, 0, {250, 250, 250});
  std::vector<std::pair<int, int>> merges;
  HierarchicalProposals(MakePartition(3, 1, {0, 1, 2}), im, {}, &merges);
  EXPECT_EQ(merges, (std::vector<std::pair<int, int>>{{0, 1}, {2, 3}}));

  // With only the colour term pixel 1 now matches pixel 2 exactly.
  im.set(1, 0, {250, 250, 250});
  merges.clear();
  HierarchicalProposals(MakePartition(3, 1, {0, 1, 2}), im, {1.0, 0.0, 0.0}, &merges);
  EXPECT_EQ(merges, (std::vector<std::pair<int, int>>{{1, 2}, {0, 3}}));
}

TEST(HierarchicalProposals, TiesGoToTheSmallestIdPair) {
  std::vector<std::pair<int, int>> merges;
  HierarchicalProposals(MakePartition(4, 1, {0, 1, 2, 3}), Solid(4, 1, 9, 9, 9), {}, &merges);
  ASSERT_FALSE(merges.empty());
  EXPECT_EQ(merges[0], std::make_pair(0, 1));
}

TEST(HierarchicalProposals, Deterministic) {
  SplitMix64 rng(21);
  const Image im = testing::RandomImage(16, 16, rng);
  const RegionPartition p = FelzPartition(im, 200.0, 4);
  EXPECT_EQ(HierarchicalProposals(p, im, {}).masks, HierarchicalProposals(p, im, {}).masks);
}

TEST(PixelFeatures, MatchDirectComputation) {
  SplitMix64 rng(8);
  const Image im = testing::RandomImage(5, 3, rng);
  const Matrix f = PixelFeatures(im);
  ASSERT_EQ(f.rows, 15);
  ASSERT_EQ(f.cols, kPixelFeatures);
  for (int y = 0; y < 3; ++y)
    for (int x = 0; x < 5; ++x) {
      const auto row = f.row(y * 5 + x);
      for (int c = 0; c < 3; ++c) EXPECT_NEAR(row[c], im.at(x, y, c) / 255.0, 1e-12);
      EXPECT_NEAR(row[3], x / 5.0, 1e-12);
      EXPECT_NEAR(row[4], y / 3.0, 1e-12);
      for (int c = 0; c < 3; ++c) {
        double sum = 0.0;
        int count = 0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int xx = x + dx, yy = y + dy;
            if (xx < 0 || yy < 0 || xx >= 5 || yy >= 3) continue;
            sum += im.at(xx, yy, c) / 255.0;
            ++count;
          }
        EXPECT_NEAR(row[5 + c], sum / count, 1e-12);
      }
    }
}

TEST(MaskLosses, DiceHandCases) {
  const std::vector<std::uint8_t> all(4, 1);
  EXPECT_NEAR(DiceLoss(std::vector<double>{1, 1, 0, 0}, std::vector<std::uint8_t>{1, 0, 0, 0}, all),
              1.0 / 3.0, 1e-12);
  EXPECT_EQ(DiceLoss(std::vector<double>{1, 0, 1, 0}, std::vector<std::uint8_t>{1, 0, 1, 0}, all), 0.0);
  EXPECT_EQ(DiceLoss(std::vector<double>{1, 1, 0, 0}, std::vector<std::uint8_t>{0, 0, 1, 1}, all), 1.0);
  EXPECT_EQ(DiceLoss(std::vector<double>{0, 0, 0, 0}, std::vector<std::uint8_t>{0, 0, 0, 0}, all), 0.0);
  // Ignored pixels do not count.
  EXPECT_EQ(DiceLoss(std::vector<double>{1, 1, 0, 0}, std::vector<std::uint8_t>{1, 0, 0, 0},
                     std::vector<std::uint8_t>{1, 0, 1, 1}),
            0.0);
}

TEST(MaskLosses, BceHandCaseAndClamping) {
  const std::vector<std::uint8_t> all(2, 1);
  EXPECT_NEAR(BinaryCrossEntropy(std::vector<double>{0.9, 0.2}, std::vector<std::uint8_t>{1, 0}, all),
              -(std::log(0.9) + std::log(0.8)) / 2.0, 1e-12);
  EXPECT_NEAR(BinaryCrossEntropy(std::vector<double>{0.0, 1.0}, std::vector<std::uint8_t>{1, 0}, all),
              -std::log(1e-7), 1e-9);
  EXPECT_NEAR(BinaryCrossEntropy(std::vector<double>{1.0, 0.0}, std::vector<std::uint8_t>{1, 0}, all),
              -std::log1p(-1e-7), 1e-15);
}

TEST(MaskLosses, RangesOnRandomMasks) {
  SplitMix64 rng(13);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 1 + static_cast<int>(rng.Below(40));
    std::vector<double> p(n);
    std::vector<std::uint8_t> g(n), v(n);
    for (int i = 0; i < n; ++i) {
      p[i] = rng.Uniform();
      g[i] = rng.Below(2);
      v[i] = rng.Uniform() < 0.8;
    }
    const double d = DiceLoss(p, g, v);
    EXPECT_GE(d, 0.0);
    EXPECT_LE(d, 1.0);
    EXPECT_GE(BinaryCrossEntropy(p, g, v), 0.0);
  }
}

Matrix UnitHead(int rows, std::uint64_t seed) {
  SplitMix64 rng(seed);
  return testing::RandomUnitRows(rows, kEmbedDim, rng);
}

TEST(QueryForward, ZeroParametersGiveHalfMasksAndUniformProbs) {
  QueryModel m;
  m.params = QueryParams::Zeros(5);
  SplitMix64 rng(1);
  const Matrix features = PixelFeatures(testing::RandomImage(6, 4, rng));
  const QueryOutput out = QueryForward(m, features, UnitHead(3, 2));
  EXPECT_EQ(out.masks.rows, 5);
  EXPECT_EQ(out.masks.cols, 24);
  for (double v : out.masks.data) EXPECT_EQ(v, 0.5);
  for (double p : out.probs.data) EXPECT_NEAR(p, 0.25, 1e-15);
}

TEST(QueryForward, ProbabilitiesSumToOneAndMasksDependOnFeaturesOnly) {
  SplitMix64 rng(4);
  QueryModel m = InitQueryModel(6, 4);
  testing::Randomize(m.params, rng, 0.8);
  Matrix features(10, kPixelFeatures);
  for (double& v : features.data) v = rng.Uniform();
  for (int f = 0; f < kPixelFeatures; ++f) features(7, f) = features(2, f);
  const QueryOutput out = QueryForward(m, features, UnitHead(4, 5));
  ASSERT_EQ(out.probs.cols, 5);
  for (int k = 0; k < 6; ++k) {
    double s = 0.0;
    for (double p : out.probs.row(k)) s += p;
    EXPECT_NEAR(s, 1.0, 1e-9);
    EXPECT_EQ(out.masks(k, 2), out.masks(k, 7));
    for (double v : out.masks.row(k)) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(QueryForward, DimensionMismatchIsAnError) {
  const QueryModel m = InitQueryModel(3, 1);
  EXPECT_THROW(QueryForward(m, Matrix(4, kPixelFeatures + 1), UnitHead(2, 1)), Error);
  EXPECT_THROW(QueryForward(m, Matrix(4, kPixelFeatures), Matrix(2, kEmbedDim + 1)), Error);
}

TEST(MatchCost, PerfectMatchLimit) {
  QueryOutput out;
  out.masks = Matrix(1, 4);
  out.probs = Matrix(1, 2);
  out.logits = Matrix(1, 2);
  const std::vector<double> mask = {1, 1, 0, 0};
  std::copy(mask.begin(), mask.end(), out.masks.row(0).begin());
  out.probs(0, 0) = 1.0;
  const std::vector<TargetSegment> targets = {{0, {1, 1, 0, 0}}};
  const Matrix c = MatchCost(out, targets, std::vector<std::uint8_t>(4, 1));
  ASSERT_EQ(c.rows, 1);
  ASSERT_EQ(c.cols, 1);
  EXPECT_NEAR(c(0, 0), -1.0 - std::log1p(-1e-7), 1e-12);
}

TEST(MatchCost, NoTargetsGiveAnEmptyMatrix) {
  QueryOutput out;
  out.masks = Matrix(3, 4);
  out.probs = Matrix(3, 2);
  const Matrix c = MatchCost(out, {}, std::vector<std::uint8_t>(4, 1));
  EXPECT_EQ(c.cols, 0);
}

TEST(QueryLoss, NoTargetsLeavesOnlyWeightedNoObjectTerms) {
  SplitMix64 rng(6);
  QueryModel m = InitQueryModel(4, 6);
  testing::Randomize(m.params, rng, 0.5);
  const Image im = testing::RandomImage(8, 8, rng);
  const QueryExample ex = MakeQueryExample(im, LabelMap(8, 8, kIgnoreLabel), {0, 1});
  ASSERT_TRUE(ex.targets.empty());
  const Matrix head = UnitHead(2, 9);
  const QueryOutput out = QueryForward(m, ex.features, head);
  double expected = 0.0;
  for (int k = 0; k < 4; ++k) expected += -kNoObjectWeight * std::log(out.probs(k, 2));
  EXPECT_NEAR(QueryLossAndGrads(m, {&ex}, head, nullptr), expected, 1e-12);
}

TEST(QueryLoss, GradientsMatchFiniteDifferences) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const testing::GradCheckResult r = testing::QueryGradCase(seed);
    EXPECT_GT(r.checked, 0);
    EXPECT_LT(r.worst, 1e-4) << "seed " << seed << " at " << r.where;
  }
}

TEST(QueryTraining, OverfitsASingleImage) {
  const GenConfig cfg = DomainAConfig();
  const Vocabulary vocab = cfg.MakeVocabulary();
  const Dataset d = GenerateDataset(cfg, SplitSpec::AllSeen(vocab.size()), 1, 1, 77);
  ClassEmbeddings head;
  head.classes = AllClasses(vocab);
  head.vectors = UnitHead(vocab.size(), 12);
  QueryTrainConfig tc;
  tc.steps = 200;
  tc.batch = 1;
  QueryTrainLog log;
  TrainQueryModel(d.train, head, tc, &log);
  ASSERT_EQ(log.step_losses.size(), 200u);
  EXPECT_LT(log.step_losses.back(), 0.1 * log.step_losses.front());
}

TEST(QueryTraining, ZeroStepsReturnsTheInitialization) {
  ClassEmbeddings head;
  head.classes = {0, 1};
  head.vectors = UnitHead(2, 3);
  QueryTrainConfig tc;
  tc.steps = 0;
  tc.num_queries = 7;
  tc.seed = 31;
  EXPECT_EQ(TrainQueryModel({}, head, tc), InitQueryModel(7, 31));
}

TEST(QueryModel, InitializationScheme) {
  const QueryModel m = InitQueryModel(5, 8);
  EXPECT_EQ(m.params.num_queries(), 5);
  EXPECT_EQ(m.class_scale, 10.0);
  for (const auto* t : {&m.params.embed.data, &m.params.queries.data, &m.params.class_proj.data})
    for (double v : *t) {
      EXPECT_GE(v, -0.05);
      EXPECT_LT(v, 0.05);
    }
  for (const auto* t : {&m.params.embed_bias, &m.params.mask_bias, &m.params.no_object})
    for (double v : *t) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(m, InitQueryModel(5, 8));
  EXPECT_NE(m, InitQueryModel(5, 9));
}

TEST(QueryModel, CheckpointRoundTripIsExact) {
  SplitMix64 rng(2);
  QueryModel m = InitQueryModel(4, 2);
  testing::Randomize(m.params, rng, 3.0);
  const std::string text = QueryModelToJson(m).dump();
  EXPECT_EQ(QueryModelFromJson(nlohmann::json::parse(text)), m);
  auto j = QueryModelToJson(m);
  j["tensors"]["mask_bias"].push_back(1.0);
  EXPECT_THROW(QueryModelFromJson(j), Error);
}

TEST(QueryProposals, CarryHeadProbabilitiesAndExportAsGrayImages) {
  SplitMix64 rng(5);
  QueryModel m = InitQueryModel(3, 5);
  testing::Randomize(m.params, rng, 1.0);
  const Image im = testing::RandomImage(7, 5, rng);
  ClassEmbeddings head;
  head.classes = {1, 4};
  head.vectors = UnitHead(2, 6);
  const ProposalSet s = QueryProposals(m, im, head, "img");
  ASSERT_EQ(s.size(), 3);
  ASSERT_TRUE(s.has_head_probs());
  EXPECT_EQ(s.head_classes, head.classes);
  for (const auto& p : s.head_probs) EXPECT_EQ(p.size(), 3u);

  const auto dir = std::filesystem::temp_directory_path() / "ovseg_test_proposals";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  ExportProposals(s, dir);
  const auto index = ReadJsonFile(dir / "proposals.json");
  EXPECT_EQ(index.at("image_id"), "img");
  ASSERT_EQ(index.at("files").size(), 3u);
  for (int k = 0; k < 3; ++k) {
    const LabelMap gray = ReadPgm(dir / index.at("files")[k].get<std::string>());
    ASSERT_EQ(gray.width, 7);
    for (std::size_t q = 0; q < gray.labels.size(); ++q)
      EXPECT_EQ(gray.labels[q], std::lround(s.masks[k].values[q] * 255.0));
  }
  EXPECT_EQ(index.at("head_probs")[0].get<std::vector<double>>(), s.head_probs[0]);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace ovseg
