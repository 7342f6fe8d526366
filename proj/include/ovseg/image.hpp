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
#include <string>
#include <vector>

namespace ovseg {

inline constexpr std::uint8_t kIgnoreLabel = 255;

// Row-major interleaved 8-bit RGB.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(int w, int h) : width(w), height(h), pixels(std::size_t(w) * h * 3, 0) {}

  std::size_t index(int x, int y) const {
    return (std::size_t(y) * width + x) * 3;
  }
  std::uint8_t at(int x, int y, int c) const { return pixels[index(x, y) + c]; }
  void set(int x, int y, std::array<std::uint8_t, 3> rgb) {
    const std::size_t i = index(x, y);
    pixels[i] = rgb[0];
    pixels[i + 1] = rgb[1];
    pixels[i + 2] = rgb[2];
  }
  bool empty() const { return width <= 0 || height <= 0; }
  bool operator==(const Image&) const = default;
};

// Per-pixel class indices; kIgnoreLabel marks pixels excluded from training
// and evaluation.
struct LabelMap {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> labels;

  LabelMap() = default;
  LabelMap(int w, int h, std::uint8_t fill = 0)
      : width(w), height(h), labels(std::size_t(w) * h, fill) {}

  std::uint8_t at(int x, int y) const {
    return labels[std::size_t(y) * width + x];
  }
  std::uint8_t& at(int x, int y) { return labels[std::size_t(y) * width + x]; }
  std::size_t size() const { return labels.size(); }
  bool operator==(const LabelMap&) const = default;
};

// Soft per-pixel mask with values in [0, 1].
struct Mask {
  int width = 0;
  int height = 0;
  std::vector<double> values;

  Mask() = default;
  Mask(int w, int h, double fill = 0.0)
      : width(w), height(h), values(std::size_t(w) * h, fill) {}

  double at(int x, int y) const { return values[std::size_t(y) * width + x]; }
  double& at(int x, int y) { return values[std::size_t(y) * width + x]; }
  std::size_t size() const { return values.size(); }
  bool operator==(const Mask&) const = default;
};

// Area-averaged resize to out_w x out_h, channel values scaled to [0, 1].
// The result is laid out row-major, interleaved RGB.
//
// Overlaps are measured in units where a source pixel spans out_w (or out_h)
// units, so every weight is an integer and the weighted sums are exact.
std::vector<double> ResizeAreaNormalized(const Image& image, int out_w,
                                         int out_h);

// Area-averaged resize returning an 8-bit image (rounded to nearest).
Image ResizeArea(const Image& image, int out_w, int out_h);

// Crops the inclusive rectangle [x0, x1] x [y0, y1].
Image CropImage(const Image& image, int x0, int y0, int x1, int y1);

}  // namespace ovseg
