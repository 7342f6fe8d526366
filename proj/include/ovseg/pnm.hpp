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

#include "ovseg/image.hpp"

namespace ovseg {

// Binary P6 (RGB) and P5 (gray) with maxval 255, the only variants written by
// this project. Readers accept comments in the header.
void WritePpm(const std::filesystem::path& path, const Image& image);
void WritePgm(const std::filesystem::path& path, const LabelMap& labels);

Image ReadPpm(const std::filesystem::path& path);
LabelMap ReadPgm(const std::filesystem::path& path);

// In-memory variants; `name` is used in parse-error messages.
std::string EncodePpm(const Image& image);
std::string EncodePgm(const LabelMap& labels);
Image DecodePpm(const std::string& bytes, const std::string& name);
LabelMap DecodePgm(const std::string& bytes, const std::string& name);

std::string ReadFileBytes(const std::filesystem::path& path);
void WriteFileBytes(const std::filesystem::path& path, const std::string& bytes);

}  // namespace ovseg
