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

#include "ovseg/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>

#include "ovseg/common.hpp"
#include "ovseg/json_io.hpp"
#include "ovseg/pnm.hpp"

namespace ovseg {

Vocabulary::Vocabulary(std::vector<ClassEntry> entries)
    : entries_(std::move(entries)) {
  std::set<std::string> names;
  for (const auto& e : entries_) {
    if (e.name.empty()) Fail(ErrorKind::kInvalidConfig, "empty class name");
    for (char c : e.name)
      if (std::isupper(static_cast<unsigned char>(c)))
        Fail(ErrorKind::kInvalidConfig, "class names must be lowercase: " + e.name);
    if (!names.insert(e.name).second)
      Fail(ErrorKind::kInvalidConfig, "duplicate class name: " + e.name);
  }
  if (entries_.size() >= kIgnoreLabel)
    Fail(ErrorKind::kInvalidConfig, "vocabulary too large for 8-bit labels");
}

std::optional<int> Vocabulary::Find(const std::string& name) const {
  for (int i = 0; i < size(); ++i)
    if (entries_[i].name == name) return i;
  return std::nullopt;
}

std::vector<int> Vocabulary::IndicesOfKind(ClassKind kind) const {
  std::vector<int> out;
  for (int i = 0; i < size(); ++i)
    if (entries_[i].kind == kind) out.push_back(i);
  return out;
}

bool SplitSpec::IsSeen(int c) const {
  return std::binary_search(seen.begin(), seen.end(), c);
}

bool SplitSpec::IsUnseen(int c) const {
  return std::binary_search(unseen.begin(), unseen.end(), c);
}

void SplitSpec::Validate(int num_classes) const {
  std::vector<int> all;
  all.insert(all.end(), seen.begin(), seen.end());
  all.insert(all.end(), unseen.begin(), unseen.end());
  std::sort(all.begin(), all.end());
  if (static_cast<int>(all.size()) != num_classes)
    Fail(ErrorKind::kIntegrity, "split does not cover the vocabulary exactly");
  for (int i = 0; i < num_classes; ++i)
    if (all[i] != i)
      Fail(ErrorKind::kIntegrity,
           "split seen/unseen overlap or reference unknown classes");
  if (!std::is_sorted(seen.begin(), seen.end()) ||
      !std::is_sorted(unseen.begin(), unseen.end()))
    Fail(ErrorKind::kIntegrity, "split index lists must be sorted");
}

SplitSpec SplitSpec::AllSeen(int num_classes) {
  SplitSpec s;
  for (int i = 0; i < num_classes; ++i) s.seen.push_back(i);
  return s;
}

const char* ShapeKindName(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::kCircle: return "circle";
    case ShapeKind::kSquare: return "square";
    case ShapeKind::kTriangle: return "triangle";
    case ShapeKind::kStripes: return "stripes";
  }
  return "?";
}

ShapeKind ParseShapeKind(const std::string& name) {
  for (ShapeKind k : {ShapeKind::kCircle, ShapeKind::kSquare,
                      ShapeKind::kTriangle, ShapeKind::kStripes})
    if (name == ShapeKindName(k)) return k;
  Fail(ErrorKind::kInvalidConfig, "unknown shape kind: " + name);
}

Vocabulary GenConfig::MakeVocabulary() const {
  std::vector<ClassEntry> entries;
  for (const auto& bg : backgrounds) entries.push_back({bg.name, ClassKind::kStuff});
  for (const auto& t : things)
    entries.push_back({t.color + " " + ShapeKindName(t.shape), ClassKind::kThing});
  return Vocabulary(std::move(entries));
}

void GenConfig::Validate() const {
  auto bad = [](const std::string& m) { Fail(ErrorKind::kInvalidConfig, m); };
  if (width <= 0 || height <= 0) bad("image size must be positive");
  if (palette.empty()) bad("color palette is empty");
  if (backgrounds.empty()) bad("background palette is empty");
  if (things.empty()) bad("no thing classes configured");
  if (min_shapes < 0 || max_shapes < min_shapes) bad("invalid shape count range");
  if (min_radius < 1 || max_radius < min_radius) bad("invalid radius range");
  if (2 * min_radius + 1 > std::min(width, height))
    bad("minimum shape size exceeds the image");
  if (noise < 0 || texture < 0 || texture_block < 1) bad("invalid noise settings");
  if (caption_template.find("{}") == std::string::npos)
    bad("caption template needs a {} placeholder");
  for (const auto& t : things) {
    const bool has_color = std::any_of(palette.begin(), palette.end(),
                                       [&](const NamedColor& c) { return c.name == t.color; });
    if (!has_color) bad("thing color not in palette: " + t.color);
    if (std::find(shape_kinds.begin(), shape_kinds.end(), t.shape) == shape_kinds.end())
      bad(std::string("thing shape not enabled: ") + ShapeKindName(t.shape));
  }
  MakeVocabulary();
}

GenConfig DomainAConfig() {
  GenConfig c;
  c.shape_kinds = {ShapeKind::kCircle, ShapeKind::kSquare, ShapeKind::kTriangle,
                   ShapeKind::kStripes};
  c.palette = {{"red", {215, 40, 40}},     {"blue", {40, 70, 215}},
               {"yellow", {235, 215, 45}}, {"purple", {140, 50, 180}},
               {"orange", {245, 140, 25}}, {"white", {245, 245, 245}},
               {"pink", {240, 120, 190}},  {"cyan", {30, 200, 200}}};
  c.things = {{"red", ShapeKind::kCircle},     {"blue", ShapeKind::kSquare},
              {"yellow", ShapeKind::kTriangle}, {"purple", ShapeKind::kStripes},
              {"orange", ShapeKind::kSquare},  {"white", ShapeKind::kCircle},
              {"pink", ShapeKind::kStripes},   {"cyan", ShapeKind::kTriangle}};
  c.backgrounds = {{"grass", {70, 150, 60}},
                   {"sky", {140, 190, 235}},
                   {"sand", {205, 185, 135}},
                   {"road", {90, 90, 95}}};
  c.min_radius = 6;
  c.max_radius = 14;
  c.noise = 6;
  c.texture = 0;
  c.domain = "A";
  return c;
}

GenConfig DomainBConfig() {
  GenConfig c = DomainAConfig();
  c.min_radius = 4;
  c.max_radius = 10;
  c.noise = 10;
  c.texture = 24;
  c.palette_shift = {18, -12, 10};
  c.domain = "B";
  return c;
}

bool ShapeFits(const GenConfig& config, const PlacedShape& s) {
  return s.cx - s.radius >= 0 && s.cy - s.radius >= 0 &&
         s.cx + s.radius < config.width && s.cy + s.radius < config.height;
}

namespace {

int SquareHalf(int radius) { return radius * 4 / 5; }

std::array<std::uint8_t, 3> Shifted(const std::array<std::uint8_t, 3>& rgb,
                                    const std::array<int, 3>& shift) {
  std::array<std::uint8_t, 3> out{};
  for (int c = 0; c < 3; ++c)
    out[c] = static_cast<std::uint8_t>(std::clamp(rgb[c] + shift[c], 0, 255));
  return out;
}

const NamedColor& ColorByName(const GenConfig& config, const std::string& name) {
  for (const auto& c : config.palette)
    if (c.name == name) return c;
  Fail(ErrorKind::kInvalidConfig, "unknown color " + name);
}

std::string Article(const std::string& word) {
  const char c = word.empty() ? 'x' : word[0];
  return (c == 'a' || c == 'e' || c == 'i' || c == 'o' || c == 'u') ? "an " : "a ";
}

}  // namespace

bool ShapeContains(ShapeKind kind, const PlacedShape& s, int x, int y) {
  const int dx = x - s.cx;
  const int dy = y - s.cy;
  switch (kind) {
    case ShapeKind::kCircle:
      return dx * dx + dy * dy <= s.radius * s.radius;
    case ShapeKind::kSquare:
    case ShapeKind::kStripes: {
      const int h = SquareHalf(s.radius);
      return std::abs(dx) <= h && std::abs(dy) <= h;
    }
    case ShapeKind::kTriangle:
      return dy >= -s.radius && dy <= s.radius && 2 * std::abs(dx) <= dy + s.radius;
  }
  return false;
}

Scene RenderScene(const GenConfig& config, const SceneLayout& layout,
                  SplitMix64& rng, std::string id) {
  const int w = config.width;
  const int h = config.height;
  const int stuff_count = static_cast<int>(config.backgrounds.size());
  Scene scene;
  scene.id = std::move(id);
  scene.image = Image(w, h);
  scene.labels = LabelMap(w, h, static_cast<std::uint8_t>(layout.background));

  const auto bg = Shifted(config.backgrounds.at(layout.background).rgb,
                          config.palette_shift);
  const int blocks_x = (w + config.texture_block - 1) / config.texture_block;
  const int blocks_y = (h + config.texture_block - 1) / config.texture_block;
  std::vector<int> blotch(std::size_t(blocks_x) * blocks_y, 0);
  if (config.texture > 0)
    for (int& b : blotch) b = rng.Range(-config.texture, config.texture);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int t = blotch[std::size_t(y / config.texture_block) * blocks_x +
                           x / config.texture_block];
      std::array<std::uint8_t, 3> px{};
      for (int c = 0; c < 3; ++c)
        px[c] = static_cast<std::uint8_t>(std::clamp(bg[c] + t, 0, 255));
      scene.image.set(x, y, px);
    }
  }

  for (const auto& s : layout.shapes) {
    const ThingSpec& thing = config.things.at(s.thing);
    const auto color = Shifted(ColorByName(config, thing.color).rgb, config.palette_shift);
    std::array<std::uint8_t, 3> dark{};
    for (int c = 0; c < 3; ++c) dark[c] = static_cast<std::uint8_t>(color[c] / 2);
    const int top = s.cy - SquareHalf(s.radius);
    for (int y = std::max(0, s.cy - s.radius); y <= std::min(h - 1, s.cy + s.radius); ++y) {
      for (int x = std::max(0, s.cx - s.radius); x <= std::min(w - 1, s.cx + s.radius); ++x) {
        if (!ShapeContains(thing.shape, s, x, y)) continue;
        const bool dark_row =
            thing.shape == ShapeKind::kStripes && ((y - top) / 2) % 2 == 1;
        scene.image.set(x, y, dark_row ? dark : color);
        scene.labels.at(x, y) = static_cast<std::uint8_t>(stuff_count + s.thing);
      }
    }
  }

  if (config.noise > 0) {
    for (auto& v : scene.image.pixels)
      v = static_cast<std::uint8_t>(
          std::clamp(int(v) + rng.Range(-config.noise, config.noise), 0, 255));
  }

  // Caption lists visible classes: shapes in draw order, then the background.
  std::vector<int> visible(stuff_count + config.things.size(), 0);
  for (auto l : scene.labels.labels) visible[l] = 1;
  const Vocabulary vocab = config.MakeVocabulary();
  std::vector<std::string> parts;
  std::set<int> listed;
  for (const auto& s : layout.shapes) {
    const int cls = stuff_count + s.thing;
    if (!visible[cls] || !listed.insert(cls).second) continue;
    parts.push_back(Article(vocab[cls].name) + vocab[cls].name);
  }
  if (visible[layout.background]) parts.push_back(vocab[layout.background].name);
  std::string list;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i > 0) list += (i + 1 == parts.size()) ? " and " : ", ";
    list += parts[i];
  }
  const auto pos = config.caption_template.find("{}");
  scene.caption = config.caption_template.substr(0, pos) + list +
                  config.caption_template.substr(pos + 2);
  return scene;
}

Scene GenerateScene(const GenConfig& config, SplitMix64& rng, std::string id) {
  config.Validate();
  SceneLayout layout;
  int n = rng.Range(config.min_shapes, config.max_shapes);
  const auto n_things = static_cast<std::uint64_t>(config.things.size());
  for (;;) {
    layout.shapes.clear();
    bool ok = true;
    for (int i = 0; i < n && ok; ++i) {
      PlacedShape s;
      s.thing = static_cast<int>(rng.Below(n_things));
      s.radius = rng.Range(config.min_radius, config.max_radius);
      bool placed = false;
      for (int attempt = 0; attempt < 20 && !placed; ++attempt) {
        s.cx = static_cast<int>(rng.Below(static_cast<std::uint64_t>(config.width)));
        s.cy = static_cast<int>(rng.Below(static_cast<std::uint64_t>(config.height)));
        placed = ShapeFits(config, s);
      }
      if (placed) layout.shapes.push_back(s);
      else ok = false;
    }
    if (ok) break;
    --n;  // regenerate with one shape fewer
  }
  layout.background =
      static_cast<int>(rng.Below(static_cast<std::uint64_t>(config.backgrounds.size())));
  return RenderScene(config, layout, rng, std::move(id));
}

void MaskUnseen(LabelMap& labels, const SplitSpec& split) {
  for (auto& l : labels.labels)
    if (l != kIgnoreLabel && split.IsUnseen(l)) l = kIgnoreLabel;
}

namespace {

std::string SceneId(const char* partition, int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s_%05d", partition, index);
  return buf;
}

}  // namespace

Dataset GenerateDataset(const GenConfig& config, const SplitSpec& split,
                        int n_train, int n_val, std::uint64_t seed) {
  config.Validate();
  if (n_train <= 0 || n_val <= 0)
    Fail(ErrorKind::kInvalidArgument, "dataset partitions must be non-empty");
  Dataset ds;
  ds.config = config;
  ds.vocab = config.MakeVocabulary();
  split.Validate(ds.vocab.size());
  ds.split = split;
  ds.seed = seed;
  for (int i = 0; i < n_train; ++i) {
    SplitMix64 rng(DeriveSeed(seed, 1, static_cast<std::uint64_t>(i)));
    Scene s = GenerateScene(config, rng, SceneId("train", i));
    MaskUnseen(s.labels, split);
    ds.train.push_back(std::move(s));
  }
  for (int i = 0; i < n_val; ++i) {
    SplitMix64 rng(DeriveSeed(seed, 2, static_cast<std::uint64_t>(i)));
    ds.val.push_back(GenerateScene(config, rng, SceneId("val", i)));
  }
  return ds;
}

SplitSpec MakeSplit(const Vocabulary& vocab, int n_unseen, double ratio,
                    std::uint64_t seed) {
  if (n_unseen <= 0)
    Fail(ErrorKind::kInvalidArgument, "zero-shot split needs at least one unseen class");
  if (n_unseen >= vocab.size())
    Fail(ErrorKind::kInvalidArgument, "at least one class must remain seen");
  if (!(ratio >= 0.0))
    Fail(ErrorKind::kInvalidArgument, "thing/stuff ratio must be non-negative");
  std::vector<int> things = vocab.IndicesOfKind(ClassKind::kThing);
  std::vector<int> stuff = vocab.IndicesOfKind(ClassKind::kStuff);
  const int lo = std::max(0, n_unseen - static_cast<int>(stuff.size()));
  const int hi = std::min(n_unseen, static_cast<int>(things.size()));
  const double target =
      std::isinf(ratio) ? double(n_unseen) : n_unseen * ratio / (1.0 + ratio);
  int n_things = lo;
  for (int t = lo; t <= hi; ++t)
    if (std::abs(t - target) < std::abs(n_things - target)) n_things = t;
  SplitMix64 rng(seed);
  auto shuffle = [&](std::vector<int>& v) {
    for (std::size_t i = v.size(); i > 1; --i)
      std::swap(v[i - 1], v[rng.Below(i)]);
  };
  shuffle(things);
  shuffle(stuff);
  SplitSpec split;
  split.unseen.assign(things.begin(), things.begin() + n_things);
  split.unseen.insert(split.unseen.end(), stuff.begin(),
                      stuff.begin() + (n_unseen - n_things));
  std::sort(split.unseen.begin(), split.unseen.end());
  for (int c = 0; c < vocab.size(); ++c)
    if (!split.IsUnseen(c)) split.seen.push_back(c);
  return split;
}

void SaveDataset(const Dataset& ds, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "labels");
  Json captions = Json::array();
  for (const auto* part : {&ds.train, &ds.val}) {
    for (const auto& s : *part) {
      WritePpm(dir / "images" / (s.id + ".ppm"), s.image);
      WritePgm(dir / "labels" / (s.id + ".pgm"), s.labels);
      captions.push_back({{"id", s.id}, {"caption", s.caption}});
    }
  }
  WriteJsonFile(dir / "captions.json", captions);
  WriteJsonFile(dir / "vocab.json", ToJson(ds.vocab));
  WriteJsonFile(dir / "split.json", ToJson(ds.split));
  Json gen = ToJson(ds.config);
  gen["seed"] = ds.seed;
  WriteJsonFile(dir / "gen_config.json", gen);
}

Dataset LoadDataset(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  for (const char* f : {"captions.json", "vocab.json", "split.json", "gen_config.json"})
    if (!fs::exists(dir / f))
      Fail(ErrorKind::kMissingArtifact, "dataset file missing: " + (dir / f).string());
  Dataset ds;
  const Json gen = ReadJsonFile(dir / "gen_config.json");
  ds.config = GenConfigFromJson(gen);
  ds.seed = gen.value("seed", std::uint64_t{0});
  ds.vocab = VocabularyFromJson(ReadJsonFile(dir / "vocab.json"));
  ds.split = SplitFromJson(ReadJsonFile(dir / "split.json"));
  ds.split.Validate(ds.vocab.size());
  const Json captions = ReadJsonFile(dir / "captions.json");
  if (!captions.is_array())
    Fail(ErrorKind::kParse, (dir / "captions.json").string() + ": expected an array");
  for (const auto& entry : captions) {
    Scene s;
    s.id = entry.at("id").get<std::string>();
    s.caption = entry.at("caption").get<std::string>();
    s.image = ReadPpm(dir / "images" / (s.id + ".ppm"));
    s.labels = ReadPgm(dir / "labels" / (s.id + ".pgm"));
    if (s.image.width != s.labels.width || s.image.height != s.labels.height)
      Fail(ErrorKind::kIntegrity, "image/label size mismatch for " + s.id);
    for (auto l : s.labels.labels)
      if (l != kIgnoreLabel && l >= ds.vocab.size())
        Fail(ErrorKind::kIntegrity, "label " + std::to_string(l) + " in " + s.id +
                                        " exceeds vocabulary size " +
                                        std::to_string(ds.vocab.size()));
    if (s.id.rfind("train_", 0) == 0) ds.train.push_back(std::move(s));
    else ds.val.push_back(std::move(s));
  }
  return ds;
}

std::array<std::uint8_t, 3> MeanRgb(const std::vector<Scene>& scenes) {
  std::array<std::uint64_t, 3> sum{0, 0, 0};
  std::uint64_t count = 0;
  for (const auto& s : scenes) {
    const auto& px = s.image.pixels;
    for (std::size_t i = 0; i < px.size(); i += 3) {
      for (int c = 0; c < 3; ++c) sum[c] += px[i + c];
      ++count;
    }
  }
  std::array<std::uint8_t, 3> out{0, 0, 0};
  if (count == 0) return out;
  for (int c = 0; c < 3; ++c)
    out[c] = static_cast<std::uint8_t>((2 * sum[c] + count) / (2 * count));
  return out;
}

std::vector<Segment> ExtractSegments(const LabelMap& labels,
                                     const std::set<int>* allowed) {
  std::map<int, Mask> by_class;
  for (int y = 0; y < labels.height; ++y) {
    for (int x = 0; x < labels.width; ++x) {
      const int l = labels.at(x, y);
      if (l == kIgnoreLabel) continue;
      if (allowed != nullptr && !allowed->count(l)) continue;
      auto it = by_class.find(l);
      if (it == by_class.end())
        it = by_class.emplace(l, Mask(labels.width, labels.height)).first;
      it->second.at(x, y) = 1.0;
    }
  }
  std::vector<Segment> out;
  for (auto& [label, mask] : by_class) out.push_back({label, std::move(mask)});
  return out;
}

}  // namespace ovseg
