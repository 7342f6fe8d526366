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

#include "ovseg/data.hpp"
#include "ovseg/json_io.hpp"
#include "ovseg/pnm.hpp"

namespace ovseg {
namespace {

namespace fs = std::filesystem;

fs::path TempDir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("ovseg_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

ErrorKind KindOf(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "expected an ovseg::Error";
  return ErrorKind::kIo;
}

TEST(Data, VocabularyPutsStuffFirstThenColorShapeThings) {
  const Vocabulary v = DomainAConfig().MakeVocabulary();
  ASSERT_EQ(v.size(), 12);
  EXPECT_EQ(v[0].name, "grass");
  EXPECT_EQ(v[0].kind, ClassKind::kStuff);
  EXPECT_EQ(v[4].name, "red circle");
  EXPECT_EQ(v[4].kind, ClassKind::kThing);
  EXPECT_EQ(v.IndicesOfKind(ClassKind::kStuff).size(), 4u);
  EXPECT_EQ(v.Find("blue square").value(), 5);
  EXPECT_FALSE(v.Find("green hexagon").has_value());
}

TEST(Data, VocabularyRejectsDuplicatesAndUppercase) {
  EXPECT_THROW(Vocabulary({{"grass", ClassKind::kStuff}, {"grass", ClassKind::kStuff}}), Error);
  EXPECT_THROW(Vocabulary({{"Grass", ClassKind::kStuff}}), Error);
}

TEST(Data, NoShapesGivesPureBackground) {
  GenConfig c = DomainAConfig();
  c.min_shapes = c.max_shapes = 0;
  SplitMix64 rng(7);
  const Scene s = GenerateScene(c, rng);
  const std::set<int> labels(s.labels.labels.begin(), s.labels.labels.end());
  ASSERT_EQ(labels.size(), 1u);
  EXPECT_EQ(c.MakeVocabulary()[*labels.begin()].kind, ClassKind::kStuff);
}

TEST(Data, CentredCircleMatchesIndependentRasterization) {
  const GenConfig c = DomainAConfig();
  SceneLayout layout;
  layout.background = 1;
  layout.shapes.push_back({0, 32, 32, 8});  // thing 0 is the red circle
  SplitMix64 rng(1);
  const Scene s = RenderScene(c, layout, rng);
  const int red = c.MakeVocabulary().Find("red circle").value();
  int count = 0;
  for (int y = 0; y < c.height; ++y) {
    for (int x = 0; x < c.width; ++x) {
      const bool inside = std::hypot(x - 32.0, y - 32.0) <= 8.0;
      EXPECT_EQ(s.labels.at(x, y) == red, inside) << x << "," << y;
      count += inside;
    }
  }
  EXPECT_NEAR(count, M_PI * 64.0, 8.0);
}

TEST(Data, GenerationIsDeterministic) {
  const GenConfig c = DomainBConfig();
  SplitMix64 a(99), b(99);
  EXPECT_EQ(GenerateScene(c, a), GenerateScene(c, b));
  const SplitSpec all = SplitSpec::AllSeen(c.MakeVocabulary().size());
  EXPECT_EQ(GenerateDataset(c, all, 3, 2, 5), GenerateDataset(c, all, 3, 2, 5));
}

TEST(Data, CaptionListsPresentClassesInDrawOrder) {
  const GenConfig c = DomainAConfig();
  SceneLayout layout;
  layout.background = 0;
  layout.shapes = {{1, 16, 16, 6}, {0, 46, 46, 6}};  // blue square, then red circle
  SplitMix64 rng(3);
  const Scene s = RenderScene(c, layout, rng);
  EXPECT_EQ(s.caption, "a scene with a blue square, a red circle and grass");
}

TEST(Data, ImpossibleConfigIsRejected) {
  GenConfig c = DomainAConfig();
  c.min_radius = c.max_radius = 40;
  SplitMix64 rng(1);
  EXPECT_EQ(KindOf([&] { GenerateScene(c, rng); }), ErrorKind::kInvalidConfig);
}

TEST(Data, AllSeenSplitIntroducesNoIgnore) {
  const GenConfig c = DomainAConfig();
  const Dataset d = GenerateDataset(c, SplitSpec::AllSeen(12), 20, 1, 11);
  for (const Scene& s : d.train)
    for (auto l : s.labels.labels) EXPECT_NE(l, kIgnoreLabel);
}

TEST(Data, UnseenPixelsBecomeIgnoreInTrainOnly) {
  const GenConfig c = DomainAConfig();
  const Vocabulary v = c.MakeVocabulary();
  const int blue = v.Find("blue square").value();
  SplitSpec split = SplitSpec::AllSeen(v.size());
  split.seen.erase(std::find(split.seen.begin(), split.seen.end(), blue));
  split.unseen = {blue};
  const Dataset masked = GenerateDataset(c, split, 30, 30, 4);
  const Dataset full = GenerateDataset(c, SplitSpec::AllSeen(v.size()), 30, 30, 4);
  int blue_pixels = 0;
  for (std::size_t i = 0; i < masked.train.size(); ++i) {
    EXPECT_EQ(masked.train[i].image, full.train[i].image);
    EXPECT_EQ(masked.train[i].caption, full.train[i].caption);
    for (std::size_t q = 0; q < full.train[i].labels.size(); ++q) {
      const int f = full.train[i].labels.labels[q];
      const int m = masked.train[i].labels.labels[q];
      EXPECT_NE(m, blue);
      EXPECT_EQ(m, f == blue ? kIgnoreLabel : f);
      blue_pixels += f == blue;
    }
  }
  EXPECT_GT(blue_pixels, 0);
  // Validation keeps full labels, and occlusion never produces ignore.
  EXPECT_EQ(masked.val, full.val);
  for (const Scene& s : masked.val)
    for (auto l : s.labels.labels) EXPECT_NE(l, kIgnoreLabel);
}

TEST(Data, EmptyPartitionIsRejected) {
  const GenConfig c = DomainAConfig();
  EXPECT_THROW(GenerateDataset(c, SplitSpec::AllSeen(12), 0, 1, 1), Error);
  EXPECT_THROW(GenerateDataset(c, SplitSpec::AllSeen(12), 1, 0, 1), Error);
}

Vocabulary FourAndFour() {
  return Vocabulary({{"grass", ClassKind::kStuff}, {"sky", ClassKind::kStuff},
                     {"sand", ClassKind::kStuff},  {"road", ClassKind::kStuff},
                     {"red circle", ClassKind::kThing}, {"blue square", ClassKind::kThing},
                     {"cyan triangle", ClassKind::kThing}, {"pink stripes", ClassKind::kThing}});
}

TEST(Data, SplitHonoursThingStuffRatio) {
  const Vocabulary v = FourAndFour();
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const SplitSpec s = MakeSplit(v, 2, 1.0, seed);
    ASSERT_EQ(s.unseen.size(), 2u);
    EXPECT_EQ(v[s.unseen[0]].kind, ClassKind::kStuff);
    EXPECT_EQ(v[s.unseen[1]].kind, ClassKind::kThing);
  }
}

TEST(Data, SplitCanLeaveOneSeenClass) {
  const Vocabulary v = FourAndFour();
  EXPECT_EQ(MakeSplit(v, 7, 1.0, 3).seen.size(), 1u);
  EXPECT_THROW(MakeSplit(v, 8, 1.0, 3), Error);
  EXPECT_THROW(MakeSplit(v, 0, 1.0, 3), Error);
}

TEST(Data, SplitIsDeterministicAndSoundForManySeeds) {
  const Vocabulary v = DomainAConfig().MakeVocabulary();
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const SplitSpec s = MakeSplit(v, 1 + seed % 6, 0.25 * (seed % 9), seed);
    EXPECT_EQ(s, MakeSplit(v, 1 + seed % 6, 0.25 * (seed % 9), seed));
    std::set<int> seen(s.seen.begin(), s.seen.end()), unseen(s.unseen.begin(), s.unseen.end());
    for (int c : unseen) EXPECT_FALSE(seen.count(c));
    EXPECT_EQ(seen.size() + unseen.size(), std::size_t(v.size()));
    EXPECT_NO_THROW(s.Validate(v.size()));
  }
}

TEST(Data, TrainLabelsStayWithinSeenOrIgnore) {
  const GenConfig c = DomainAConfig();
  const SplitSpec split = MakeSplit(c.MakeVocabulary(), 4, 1.0, 8);
  const Dataset d = GenerateDataset(c, split, 40, 1, 9);
  for (const Scene& s : d.train)
    for (auto l : s.labels.labels) EXPECT_TRUE(l == kIgnoreLabel || split.IsSeen(l));
}

TEST(Data, SaveLoadRoundTrip) {
  const GenConfig c = DomainBConfig();
  const SplitSpec split = MakeSplit(c.MakeVocabulary(), 3, 1.0, 2);
  const Dataset d = GenerateDataset(c, split, 4, 3, 21);
  const fs::path dir = TempDir("roundtrip");
  SaveDataset(d, dir);
  EXPECT_EQ(LoadDataset(dir), d);
}

TEST(Data, HandWrittenPnmPairLoadsExactly) {
  // 2x2 fixture written byte by byte from the format definition.
  const std::string ppm = std::string("P6\n2 2\n255\n") + std::string(12, '\x10');
  const std::string pgm = std::string("P5\n2 2\n255\n") + std::string("\x00\x01\xff\x00", 4);
  const LabelMap labels = DecodePgm(pgm, "fixture.pgm");
  ASSERT_EQ(labels.width, 2);
  EXPECT_EQ(labels.labels, (std::vector<std::uint8_t>{0, 1, kIgnoreLabel, 0}));
  const Image image = DecodePpm(ppm, "fixture.ppm");
  EXPECT_EQ(image.width, 2);
  EXPECT_EQ(image.at(1, 1, 2), 0x10);
  EXPECT_EQ(EncodePgm(labels), pgm);
  EXPECT_EQ(EncodePpm(image), ppm);

  // The same pair as a one-scene dataset on disk.
  const GenConfig c = DomainAConfig();
  Dataset d = GenerateDataset(c, SplitSpec::AllSeen(12), 1, 1, 1);
  const fs::path dir = TempDir("handwritten");
  SaveDataset(d, dir);
  const std::string id = d.train[0].id;
  WriteFileBytes(dir / "images" / (id + ".ppm"), ppm);
  WriteFileBytes(dir / "labels" / (id + ".pgm"), pgm);
  const Dataset loaded = LoadDataset(dir);
  EXPECT_EQ(loaded.train[0].labels.labels, labels.labels);
  EXPECT_EQ(loaded.train[0].image, image);
}

TEST(Data, PnmHeaderCommentsAreAccepted) {
  const std::string pgm = std::string("P5\n# made by hand\n1 1\n255\n") + "\x07";
  EXPECT_EQ(DecodePgm(pgm, "c.pgm").labels[0], 7);
}

TEST(Data, MalformedPnmNamesFileAndOffset) {
  try {
    DecodePgm(std::string("P5\n2 2\n255\n") + "\x00", "short.pgm");
    FAIL() << "expected a parse error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kParse);
    EXPECT_NE(std::string(e.what()).find("short.pgm"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("offset"), std::string::npos);
  }
  EXPECT_EQ(KindOf([] { DecodePpm("P3\n1 1\n255\n0 0 0", "ascii.ppm"); }), ErrorKind::kParse);
}

TEST(Data, OutOfVocabularyLabelIsAnIntegrityError) {
  const GenConfig c = DomainAConfig();
  const Dataset d = GenerateDataset(c, SplitSpec::AllSeen(12), 1, 1, 1);
  const fs::path dir = TempDir("integrity");
  SaveDataset(d, dir);
  LabelMap bad = d.train[0].labels;
  bad.labels[0] = 200;
  WritePgm(dir / "labels" / (d.train[0].id + ".pgm"), bad);
  EXPECT_EQ(KindOf([&] { LoadDataset(dir); }), ErrorKind::kIntegrity);
}

TEST(Data, MalformedJsonNamesFileAndOffset) {
  const fs::path dir = TempDir("badjson");
  WriteFileBytes(dir / "x.json", "{\"a\": [1, 2,, 3]}");
  try {
    ReadJsonFile(dir / "x.json");
    FAIL() << "expected a parse error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kParse);
    EXPECT_NE(std::string(e.what()).find("x.json"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("offset"), std::string::npos);
  }
}

TEST(Data, MissingDatasetFileIsMissingArtifact) {
  const fs::path dir = TempDir("missing");
  EXPECT_EQ(KindOf([&] { LoadDataset(dir); }), ErrorKind::kMissingArtifact);
}

TEST(Data, ExtractSegmentsOnePerPresentClass) {
  LabelMap l(3, 1);
  l.labels = {2, kIgnoreLabel, 0};
  const auto segs = ExtractSegments(l);
  ASSERT_EQ(segs.size(), 2u);
  EXPECT_EQ(segs[0].label, 0);
  EXPECT_EQ(segs[0].mask.values, (std::vector<double>{0, 0, 1}));
  EXPECT_EQ(segs[1].label, 2);
}

}  // namespace
}  // namespace ovseg
