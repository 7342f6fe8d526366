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

#include "ovseg/image.hpp"

#include <algorithm>
#include <cstdint>

#include "ovseg/common.hpp"

namespace ovseg {
namespace {

// Integer overlap between output cell [o*src, (o+1)*src) and source pixel
// [s*dst, (s+1)*dst), both expressed in the common scaled unit.
struct Span1D {
  int first = 0;
  std::vector<std::int64_t> weights;
};

std::vector<Span1D> BuildSpans(int src, int dst) {
  std::vector<Span1D> spans(dst);
  for (int o = 0; o < dst; ++o) {
    const std::int64_t a0 = std::int64_t(o) * src;
    const std::int64_t a1 = a0 + src;
    const int s0 = static_cast<int>(a0 / dst);
    const int s1 = static_cast<int>(std::min<std::int64_t>(src - 1, (a1 - 1) / dst));
    spans[o].first = s0;
    for (int s = s0; s <= s1; ++s) {
      const std::int64_t b0 = std::int64_t(s) * dst;
      const std::int64_t b1 = b0 + dst;
      spans[o].weights.push_back(std::min(a1, b1) - std::max(a0, b0));
    }
  }
  return spans;
}

template <typename Emit>
void ResizeAreaImpl(const Image& image, int out_w, int out_h, Emit emit) {
  if (image.empty()) Fail(ErrorKind::kInvalidArgument, "resize of a zero-area image");
  Require(out_w > 0 && out_h > 0, "resize target must be positive");
  const auto xs = BuildSpans(image.width, out_w);
  const auto ys = BuildSpans(image.height, out_h);
  const std::int64_t total = std::int64_t(image.width) * image.height;
  for (int oy = 0; oy < out_h; ++oy) {
    for (int ox = 0; ox < out_w; ++ox) {
      std::int64_t sum[3] = {0, 0, 0};
      const auto& sy = ys[oy];
      const auto& sx = xs[ox];
      for (std::size_t j = 0; j < sy.weights.size(); ++j) {
        const int y = sy.first + static_cast<int>(j);
        for (std::size_t i = 0; i < sx.weights.size(); ++i) {
          const int x = sx.first + static_cast<int>(i);
          const std::int64_t w = sy.weights[j] * sx.weights[i];
          const std::size_t idx = image.index(x, y);
          sum[0] += w * image.pixels[idx];
          sum[1] += w * image.pixels[idx + 1];
          sum[2] += w * image.pixels[idx + 2];
        }
      }
      emit(ox, oy, sum, total);
    }
  }
}

}  // namespace

std::vector<double> ResizeAreaNormalized(const Image& image, int out_w,
                                         int out_h) {
  std::vector<double> out(std::size_t(out_w) * out_h * 3);
  ResizeAreaImpl(image, out_w, out_h,
                 [&](int ox, int oy, const std::int64_t* sum, std::int64_t total) {
                   const std::size_t i = (std::size_t(oy) * out_w + ox) * 3;
                   const double denom = static_cast<double>(total * 255);
                   for (int c = 0; c < 3; ++c)
                     out[i + c] = static_cast<double>(sum[c]) / denom;
                 });
  return out;
}

Image ResizeArea(const Image& image, int out_w, int out_h) {
  Image out(out_w, out_h);
  ResizeAreaImpl(image, out_w, out_h,
                 [&](int ox, int oy, const std::int64_t* sum, std::int64_t total) {
                   const std::size_t i = out.index(ox, oy);
                   for (int c = 0; c < 3; ++c)
                     out.pixels[i + c] = static_cast<std::uint8_t>(
                         (2 * sum[c] + total) / (2 * total));
                 });
  return out;
}

Image CropImage(const Image& image, int x0, int y0, int x1, int y1) {
  Require(x0 >= 0 && y0 >= 0 && x1 < image.width && y1 < image.height &&
              x0 <= x1 && y0 <= y1,
          "crop rectangle outside image");
  Image out(x1 - x0 + 1, y1 - y0 + 1);
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x)
      for (int c = 0; c < 3; ++c)
        out.pixels[out.index(x - x0, y - y0) + c] = image.at(x, y, c);
  return out;
}

}  // namespace ovseg
