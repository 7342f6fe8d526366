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

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>
#include <vector>

#include "ovseg/common.hpp"

namespace ovseg {

struct Assignment {
  std::vector<std::pair<int, int>> pairs;  // (row, col), sorted by row
  double cost = 0.0;
};

namespace detail {

// Shortest augmenting path (Jonker-Volgenant style potentials) for
// rows <= cols. Returns col index per row and the optimal cost.
inline double SolveRowsLeCols(const std::vector<std::vector<double>>& a,
                              std::vector<int>* row_to_col) {
  const int n = static_cast<int>(a.size());
  const int m = n > 0 ? static_cast<int>(a[0].size()) : 0;
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0), minv(m + 1);
  std::vector<int> p(m + 1, 0), way(m + 1, 0);
  std::vector<char> used(m + 1);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = a[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  row_to_col->assign(n, -1);
  double total = 0.0;
  for (int j = 1; j <= m; ++j)
    if (p[j] != 0) (*row_to_col)[p[j] - 1] = j - 1;
  for (int i = 0; i < n; ++i) total += a[i][(*row_to_col)[i]];
  return total;
}

inline double OptimalCost(const std::vector<std::vector<double>>& a) {
  if (a.empty()) return 0.0;
  std::vector<int> sol;
  return SolveRowsLeCols(a, &sol);
}

}  // namespace detail

// Minimum-cost assignment of min(n, m) pairs. Among optimal assignments the
// one whose column-per-row vector (taken along the shorter side) is
// lexicographically smallest is returned.
inline Assignment HungarianMatch(const Matrix& cost) {
  Assignment out;
  if (cost.rows == 0 || cost.cols == 0) return out;
  for (double c : cost.data)
    if (!std::isfinite(c)) Fail(ErrorKind::kInvalidArgument, "non-finite matching cost");
  const bool transpose = cost.rows > cost.cols;
  const int n = transpose ? cost.cols : cost.rows;
  const int m = transpose ? cost.rows : cost.cols;
  std::vector<std::vector<double>> a(n, std::vector<double>(m));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) a[i][j] = transpose ? cost(j, i) : cost(i, j);

  std::vector<int> sol;
  const double best = detail::SolveRowsLeCols(a, &sol);
  const double tol = 1e-9 * std::max(1.0, std::abs(best));

  // Fix rows in order to the smallest column that still admits an optimum.
  std::vector<int> chosen(n, -1);
  std::vector<char> col_used(m, 0);
  double fixed_cost = 0.0;
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < m; ++c) {
      if (col_used[c]) continue;
      std::vector<std::vector<double>> sub;
      for (int rr = r + 1; rr < n; ++rr) {
        std::vector<double> row;
        for (int cc = 0; cc < m; ++cc)
          if (!col_used[cc] && cc != c) row.push_back(a[rr][cc]);
        sub.push_back(std::move(row));
      }
      const double total = fixed_cost + a[r][c] + detail::OptimalCost(sub);
      if (total <= best + tol) {
        chosen[r] = c;
        col_used[c] = 1;
        fixed_cost += a[r][c];
        break;
      }
    }
    if (chosen[r] < 0) {  // numerical corner case: fall back to the solver's pick
      chosen = sol;
      break;
    }
  }
  for (int r = 0; r < n; ++r)
    out.pairs.emplace_back(transpose ? chosen[r] : r, transpose ? r : chosen[r]);
  std::sort(out.pairs.begin(), out.pairs.end());
  for (const auto& [r, c] : out.pairs) out.cost += cost(r, c);
  return out;
}

}  // namespace ovseg
