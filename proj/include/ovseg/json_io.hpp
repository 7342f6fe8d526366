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

#include <filesystem>
#include <string>

#include "json.hpp"
#include "ovseg/common.hpp"
#include "ovseg/data.hpp"

namespace ovseg {

using Json = nlohmann::json;

Json ToJson(const GenConfig& config);
GenConfig GenConfigFromJson(const Json& j);
Json ToJson(const Vocabulary& vocab);
Vocabulary VocabularyFromJson(const Json& j);
Json ToJson(const SplitSpec& split);
SplitSpec SplitFromJson(const Json& j);

Json ToJson(const Matrix& m);
Matrix MatrixFromJson(const Json& j, const std::string& what);
Vec VecFromJson(const Json& j, const std::string& what);

// Parses a file; malformed JSON raises kParse naming the file and byte offset.
Json ReadJsonFile(const std::filesystem::path& path);
void WriteJsonFile(const std::filesystem::path& path, const Json& j);

}  // namespace ovseg
