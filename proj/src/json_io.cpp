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

#include "ovseg/json_io.hpp"

#include "ovseg/pnm.hpp"

namespace ovseg {
namespace {

Json ColorToJson(const NamedColor& c) {
  return {{"name", c.name}, {"rgb", {c.rgb[0], c.rgb[1], c.rgb[2]}}};
}

NamedColor ColorFromJson(const Json& j) {
  NamedColor c;
  c.name = j.at("name").get<std::string>();
  const auto& rgb = j.at("rgb");
  for (int i = 0; i < 3; ++i) c.rgb[i] = rgb.at(i).get<std::uint8_t>();
  return c;
}

}  // namespace

Json ToJson(const GenConfig& c) {
  Json j;
  j["width"] = c.width;
  j["height"] = c.height;
  j["min_shapes"] = c.min_shapes;
  j["max_shapes"] = c.max_shapes;
  j["min_radius"] = c.min_radius;
  j["max_radius"] = c.max_radius;
  j["shape_kinds"] = Json::array();
  for (auto k : c.shape_kinds) j["shape_kinds"].push_back(ShapeKindName(k));
  j["palette"] = Json::array();
  for (const auto& p : c.palette) j["palette"].push_back(ColorToJson(p));
  j["things"] = Json::array();
  for (const auto& t : c.things)
    j["things"].push_back({{"color", t.color}, {"shape", ShapeKindName(t.shape)}});
  j["backgrounds"] = Json::array();
  for (const auto& b : c.backgrounds) j["backgrounds"].push_back(ColorToJson(b));
  j["noise"] = c.noise;
  j["texture"] = c.texture;
  j["texture_block"] = c.texture_block;
  j["palette_shift"] = {c.palette_shift[0], c.palette_shift[1], c.palette_shift[2]};
  j["domain"] = c.domain;
  j["caption_template"] = c.caption_template;
  return j;
}

GenConfig GenConfigFromJson(const Json& j) {
  try {
    GenConfig c;
    c.width = j.at("width").get<int>();
    c.height = j.at("height").get<int>();
    c.min_shapes = j.at("min_shapes").get<int>();
    c.max_shapes = j.at("max_shapes").get<int>();
    c.min_radius = j.at("min_radius").get<int>();
    c.max_radius = j.at("max_radius").get<int>();
    for (const auto& k : j.at("shape_kinds")) c.shape_kinds.push_back(ParseShapeKind(k));
    for (const auto& p : j.at("palette")) c.palette.push_back(ColorFromJson(p));
    for (const auto& t : j.at("things"))
      c.things.push_back({t.at("color").get<std::string>(),
                          ParseShapeKind(t.at("shape").get<std::string>())});
    for (const auto& b : j.at("backgrounds")) c.backgrounds.push_back(ColorFromJson(b));
    c.noise = j.at("noise").get<int>();
    c.texture = j.at("texture").get<int>();
    c.texture_block = j.at("texture_block").get<int>();
    for (int i = 0; i < 3; ++i) c.palette_shift[i] = j.at("palette_shift").at(i).get<int>();
    c.domain = j.at("domain").get<std::string>();
    c.caption_template = j.at("caption_template").get<std::string>();
    return c;
  } catch (const nlohmann::json::exception& e) {
    Fail(ErrorKind::kParse, std::string("gen config: ") + e.what());
  }
}

Json ToJson(const Vocabulary& vocab) {
  Json j = Json::array();
  for (const auto& e : vocab.entries())
    j.push_back({{"name", e.name},
                 {"kind", e.kind == ClassKind::kThing ? "thing" : "stuff"}});
  return j;
}

Vocabulary VocabularyFromJson(const Json& j) {
  std::vector<ClassEntry> entries;
  try {
    for (const auto& e : j) {
      const std::string kind = e.at("kind").get<std::string>();
      if (kind != "thing" && kind != "stuff")
        Fail(ErrorKind::kParse, "vocab: unknown class kind " + kind);
      entries.push_back({e.at("name").get<std::string>(),
                         kind == "thing" ? ClassKind::kThing : ClassKind::kStuff});
    }
  } catch (const nlohmann::json::exception& e) {
    Fail(ErrorKind::kParse, std::string("vocab: ") + e.what());
  }
  return Vocabulary(std::move(entries));
}

Json ToJson(const SplitSpec& split) {
  return {{"seen", split.seen}, {"unseen", split.unseen}};
}

SplitSpec SplitFromJson(const Json& j) {
  try {
    SplitSpec s;
    s.seen = j.at("seen").get<std::vector<int>>();
    s.unseen = j.at("unseen").get<std::vector<int>>();
    return s;
  } catch (const nlohmann::json::exception& e) {
    Fail(ErrorKind::kParse, std::string("split: ") + e.what());
  }
}

Json ToJson(const Matrix& m) {
  Json rows = Json::array();
  for (int r = 0; r < m.rows; ++r) {
    auto row = m.row(r);
    rows.push_back(Json(std::vector<double>(row.begin(), row.end())));
  }
  return rows;
}

Matrix MatrixFromJson(const Json& j, const std::string& what) {
  if (!j.is_array() || j.empty())
    Fail(ErrorKind::kParse, what + ": expected a non-empty nested array");
  const int rows = static_cast<int>(j.size());
  const int cols = static_cast<int>(j[0].size());
  Matrix m(rows, cols);
  for (int r = 0; r < rows; ++r) {
    if (!j[r].is_array() || static_cast<int>(j[r].size()) != cols)
      Fail(ErrorKind::kParse, what + ": ragged matrix row " + std::to_string(r));
    for (int c = 0; c < cols; ++c) m(r, c) = j[r][c].get<double>();
  }
  return m;
}

Vec VecFromJson(const Json& j, const std::string& what) {
  if (!j.is_array()) Fail(ErrorKind::kParse, what + ": expected an array");
  return j.get<Vec>();
}

Json ReadJsonFile(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path))
    Fail(ErrorKind::kMissingArtifact, "missing file: " + path.string());
  const std::string bytes = ReadFileBytes(path);
  try {
    return Json::parse(bytes);
  } catch (const nlohmann::json::parse_error& e) {
    Fail(ErrorKind::kParse, path.string() + ": malformed JSON at byte offset " +
                                std::to_string(e.byte));
  }
}

void WriteJsonFile(const std::filesystem::path& path, const Json& j) {
  WriteFileBytes(path, j.dump(2) + "\n");
}

}  // namespace ovseg
