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
#include <span>
#include <vector>

#include "ovseg/common.hpp"

namespace ovseg {

// SGD with heavy-ball momentum: v <- mu v + g; p <- p - lr v.
// Params must expose Tensors() returning spans in a fixed order.
template <typename Params>
class SgdMomentum {
 public:
  SgdMomentum(const Params& zeros, double momentum)
      : velocity_(zeros), momentum_(momentum) {}

  void Step(Params& params, const Params& grads, double lr) {
    auto p = params.Tensors();
    auto g = grads.Tensors();
    auto v = velocity_.Tensors();
    for (std::size_t t = 0; t < p.size(); ++t) {
      for (std::size_t i = 0; i < p[t].size(); ++i) {
        v[t][i] = momentum_ * v[t][i] + g[t][i];
        p[t][i] -= lr * v[t][i];
      }
    }
  }

 private:
  Params velocity_;
  double momentum_;
};

template <typename Params>
bool AllFinite(const Params& params) {
  for (auto t : params.Tensors())
    for (double x : t)
      if (!std::isfinite(x)) return false;
  return true;
}

template <typename Params>
void SetZero(Params& params) {
  for (auto t : params.Tensors())
    for (double& x : t) x = 0.0;
}

template <typename Params>
void Scale(Params& params, double factor) {
  for (auto t : params.Tensors())
    for (double& x : t) x *= factor;
}

// Cosine learning-rate decay over `total` steps.
inline double CosineLr(double base, int step, int total) {
  if (total <= 0) return base;
  return base * 0.5 * (1.0 + std::cos(M_PI * double(step) / double(total)));
}

}  // namespace ovseg
