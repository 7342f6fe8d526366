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

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace ovseg {

enum class ErrorKind {
  kInvalidArgument,
  kInvalidConfig,
  kParse,
  kIntegrity,
  kMissingArtifact,
  kNumerical,
  kIo,
};

const char* ErrorKindName(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] void Fail(ErrorKind kind, const std::string& message);

inline void Require(bool condition, const std::string& message) {
  if (!condition) Fail(ErrorKind::kInvalidArgument, message);
}

using Vec = std::vector<double>;

// Dense row-major matrix.
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(int r, int c) : rows(r), cols(c), data(std::size_t(r) * c, 0.0) {}

  double& operator()(int r, int c) { return data[std::size_t(r) * cols + c]; }
  double operator()(int r, int c) const {
    return data[std::size_t(r) * cols + c];
  }
  std::span<double> row(int r) {
    return {data.data() + std::size_t(r) * cols, std::size_t(cols)};
  }
  std::span<const double> row(int r) const {
    return {data.data() + std::size_t(r) * cols, std::size_t(cols)};
  }
  bool operator==(const Matrix&) const = default;
};

inline double Dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double Norm(std::span<const double> a) { return std::sqrt(Dot(a, a)); }

// y = M x
inline void MatVec(const Matrix& m, std::span<const double> x,
                   std::span<double> y) {
  for (int r = 0; r < m.rows; ++r) y[r] = Dot(m.row(r), x);
}

// y += M^T x
inline void MatTVecAdd(const Matrix& m, std::span<const double> x,
                       std::span<double> y) {
  for (int r = 0; r < m.rows; ++r) {
    const double xr = x[r];
    if (xr == 0.0) continue;
    auto row = m.row(r);
    for (int c = 0; c < m.cols; ++c) y[c] += xr * row[c];
  }
}

// M += a b^T
inline void OuterAdd(Matrix& m, std::span<const double> a,
                     std::span<const double> b) {
  for (int r = 0; r < m.rows; ++r) {
    const double ar = a[r];
    if (ar == 0.0) continue;
    auto row = m.row(r);
    for (int c = 0; c < m.cols; ++c) row[c] += ar * b[c];
  }
}

// Backpropagates through u -> u / |u|: returns dL/du given dL/dn, n = u/|u|.
inline Vec NormalizeBackward(std::span<const double> normalized, double norm,
                             std::span<const double> grad_normalized) {
  const double proj = Dot(normalized, grad_normalized);
  Vec out(normalized.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = (grad_normalized[i] - normalized[i] * proj) / norm;
  return out;
}

// Normalizes in place; returns the pre-normalization norm.
double NormalizeInPlace(std::span<double> v);

// Numerically stable softmax.
Vec Softmax(std::span<const double> logits);

// Softmax probabilities of `logits`, returning -log p[target].
double SoftmaxCrossEntropy(std::span<const double> logits, int target,
                           Vec* probs);

// FNV-1a over raw bytes of a double array; used for embedding checksums.
std::uint64_t ChecksumDoubles(std::span<const double> values);

std::string HexU64(std::uint64_t value);

// Correctly rounded sum of finite doubles (Shewchuk partials with the final
// half-way correction). The result does not depend on the order of Add calls.
class ExactSum {
 public:
  void Add(double x);
  double Value() const;
  void Reset() { partials_.clear(); }

 private:
  std::vector<double> partials_;  // non-overlapping, increasing magnitude
};

}  // namespace ovseg
