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
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "ovseg/image.hpp"
#include "ovseg/rng.hpp"

namespace ovseg {

enum class ClassKind { kThing, kStuff };

struct ClassEntry {
  std::string name;
  ClassKind kind = ClassKind::kThing;
  bool operator==(const ClassEntry&) const = default;
};

// Ordered class list; a class index is its position.
class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<ClassEntry> entries);

  int size() const { return static_cast<int>(entries_.size()); }
  const ClassEntry& operator[](int i) const { return entries_[i]; }
  const std::vector<ClassEntry>& entries() const { return entries_; }
  std::optional<int> Find(const std::string& name) const;
  std::vector<int> IndicesOfKind(ClassKind kind) const;

  bool operator==(const Vocabulary&) const = default;

 private:
  std::vector<ClassEntry> entries_;
};

struct SplitSpec {
  std::vector<int> seen;    // sorted
  std::vector<int> unseen;  // sorted

  bool IsSeen(int c) const;
  bool IsUnseen(int c) const;
  // Throws unless seen/unseen are disjoint and cover [0, num_classes).
  void Validate(int num_classes) const;
  static SplitSpec AllSeen(int num_classes);
  bool operator==(const SplitSpec&) const = default;
};

enum class ShapeKind { kCircle, kSquare, kTriangle, kStripes };

const char* ShapeKindName(ShapeKind kind);
ShapeKind ParseShapeKind(const std::string& name);

struct NamedColor {
  std::string name;
  std::array<std::uint8_t, 3> rgb{};
  bool operator==(const NamedColor&) const = default;
};

struct ThingSpec {
  std::string color;  // key into GenConfig::palette
  ShapeKind shape = ShapeKind::kCircle;
  bool operator==(const ThingSpec&) const = default;
};

struct GenConfig {
  int width = 64;
  int height = 64;
  int min_shapes = 1;
  int max_shapes = 5;
  int min_radius = 6;
  int max_radius = 14;
  std::vector<ShapeKind> shape_kinds;
  std::vector<NamedColor> palette;
  std::vector<ThingSpec> things;
  std::vector<NamedColor> backgrounds;
  int noise = 6;             // per-channel uniform noise amplitude, all pixels
  int texture = 0;           // background blotch amplitude
  int texture_block = 4;     // blotch size in pixels
  std::array<int, 3> palette_shift{0, 0, 0};
  std::string domain = "A";
  std::string caption_template = "a scene with {}";

  bool operator==(const GenConfig&) const = default;

  // Stuff classes (backgrounds) first, then things named "<color> <shape>".
  Vocabulary MakeVocabulary() const;
  // Throws kInvalidConfig on an unusable configuration.
  void Validate() const;
};

// Plain backgrounds, large shapes.
GenConfig DomainAConfig();
// Noisy textured backgrounds, smaller shapes, shifted palette.
GenConfig DomainBConfig();

struct PlacedShape {
  int thing = 0;  // index into GenConfig::things
  int cx = 0;
  int cy = 0;
  int radius = 0;
  bool operator==(const PlacedShape&) const = default;
};

struct SceneLayout {
  int background = 0;  // index into GenConfig::backgrounds
  std::vector<PlacedShape> shapes;  // draw order
};

struct Scene {
  std::string id;
  Image image;
  LabelMap labels;
  std::string caption;
  bool operator==(const Scene&) const = default;
};

struct Dataset {
  GenConfig config;
  Vocabulary vocab;
  SplitSpec split;
  std::uint64_t seed = 0;
  std::vector<Scene> train;
  std::vector<Scene> val;

  const std::string& domain() const { return config.domain; }
  bool operator==(const Dataset&) const = default;
};

// Whether the shape's pixels all fall inside the image.
bool ShapeFits(const GenConfig& config, const PlacedShape& shape);
bool ShapeContains(ShapeKind kind, const PlacedShape& shape, int x, int y);

// Renders a layout. Noise and texture are drawn from `rng` in raster order.
Scene RenderScene(const GenConfig& config, const SceneLayout& layout,
                  SplitMix64& rng, std::string id = "scene");

Scene GenerateScene(const GenConfig& config, SplitMix64& rng,
                    std::string id = "scene");

Dataset GenerateDataset(const GenConfig& config, const SplitSpec& split,
                        int n_train, int n_val, std::uint64_t seed);

// Replaces unseen-class labels by kIgnoreLabel.
void MaskUnseen(LabelMap& labels, const SplitSpec& split);

SplitSpec MakeSplit(const Vocabulary& vocab, int n_unseen,
                    double thing_stuff_ratio, std::uint64_t seed);

void SaveDataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset LoadDataset(const std::filesystem::path& dir);

// Per-channel mean over the images, rounded to 8 bits.
std::array<std::uint8_t, 3> MeanRgb(const std::vector<Scene>& scenes);

// A binary mask (0/1) per class present in `labels`, in class order.
struct Segment {
  int label = 0;
  Mask mask;
};
std::vector<Segment> ExtractSegments(const LabelMap& labels,
                                     const std::set<int>* allowed = nullptr);

}  // namespace ovseg
