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

#include "ovseg/pnm.hpp"

#include <cctype>
#include <fstream>
#include <sstream>

#include "ovseg/common.hpp"

namespace ovseg {
namespace {

[[noreturn]] void ParseFail(const std::string& name, std::size_t offset,
                            const std::string& what) {
  Fail(ErrorKind::kParse,
       name + ": " + what + " at byte offset " + std::to_string(offset));
}

class HeaderReader {
 public:
  HeaderReader(const std::string& bytes, const std::string& name)
      : bytes_(bytes), name_(name) {}

  void ExpectMagic(const char* magic) {
    if (bytes_.size() < 2 || bytes_[0] != magic[0] || bytes_[1] != magic[1])
      ParseFail(name_, 0, std::string("expected magic ") + magic);
    pos_ = 2;
  }

  int ReadInt() {
    SkipSpaceAndComments();
    const std::size_t start = pos_;
    long value = 0;
    while (pos_ < bytes_.size() &&
           std::isdigit(static_cast<unsigned char>(bytes_[pos_]))) {
      value = value * 10 + (bytes_[pos_] - '0');
      if (value > 1 << 20) ParseFail(name_, start, "header value too large");
      ++pos_;
    }
    if (pos_ == start) ParseFail(name_, start, "expected a decimal integer");
    return static_cast<int>(value);
  }

  // After maxval exactly one whitespace byte precedes the raster.
  std::size_t EndHeader() {
    if (pos_ >= bytes_.size() ||
        !std::isspace(static_cast<unsigned char>(bytes_[pos_])))
      ParseFail(name_, pos_, "expected whitespace after maxval");
    return pos_ + 1;
  }

  std::size_t pos() const { return pos_; }

 private:
  void SkipSpaceAndComments() {
    while (pos_ < bytes_.size()) {
      const char c = bytes_[pos_];
      if (std::isspace(static_cast<unsigned char>(c))) {
        ++pos_;
      } else if (c == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  const std::string& bytes_;
  const std::string& name_;
  std::size_t pos_ = 0;
};

struct Header {
  int width;
  int height;
  std::size_t data_offset;
};

Header ParseHeader(const std::string& bytes, const std::string& name,
                   const char* magic, int channels) {
  HeaderReader reader(bytes, name);
  reader.ExpectMagic(magic);
  const int w = reader.ReadInt();
  const int h = reader.ReadInt();
  const std::size_t maxval_pos = reader.pos();
  const int maxval = reader.ReadInt();
  if (w <= 0 || h <= 0) ParseFail(name, maxval_pos, "non-positive dimensions");
  if (maxval != 255) ParseFail(name, maxval_pos, "maxval must be 255");
  const std::size_t offset = reader.EndHeader();
  const std::size_t need = std::size_t(w) * h * channels;
  if (bytes.size() - offset < need)
    ParseFail(name, bytes.size(), "truncated raster");
  if (bytes.size() - offset > need)
    ParseFail(name, offset + need, "trailing bytes after raster");
  return {w, h, offset};
}

}  // namespace

std::string EncodePpm(const Image& image) {
  std::string out = "P6\n" + std::to_string(image.width) + " " +
                    std::to_string(image.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(image.pixels.data()),
             image.pixels.size());
  return out;
}

std::string EncodePgm(const LabelMap& labels) {
  std::string out = "P5\n" + std::to_string(labels.width) + " " +
                    std::to_string(labels.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(labels.labels.data()),
             labels.labels.size());
  return out;
}

Image DecodePpm(const std::string& bytes, const std::string& name) {
  const Header h = ParseHeader(bytes, name, "P6", 3);
  Image image(h.width, h.height);
  std::copy(bytes.begin() + h.data_offset, bytes.end(), image.pixels.begin());
  return image;
}

LabelMap DecodePgm(const std::string& bytes, const std::string& name) {
  const Header h = ParseHeader(bytes, name, "P5", 1);
  LabelMap labels(h.width, h.height);
  std::copy(bytes.begin() + h.data_offset, bytes.end(), labels.labels.begin());
  return labels;
}

std::string ReadFileBytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) Fail(ErrorKind::kIo, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void WriteFileBytes(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) Fail(ErrorKind::kIo, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) Fail(ErrorKind::kIo, "short write to " + path.string());
}

void WritePpm(const std::filesystem::path& path, const Image& image) {
  WriteFileBytes(path, EncodePpm(image));
}

void WritePgm(const std::filesystem::path& path, const LabelMap& labels) {
  WriteFileBytes(path, EncodePgm(labels));
}

Image ReadPpm(const std::filesystem::path& path) {
  return DecodePpm(ReadFileBytes(path), path.string());
}

LabelMap ReadPgm(const std::filesystem::path& path) {
  return DecodePgm(ReadFileBytes(path), path.string());
}

}  // namespace ovseg
