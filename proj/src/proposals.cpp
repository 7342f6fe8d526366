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

#include "ovseg/proposals.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <set>

#include "ovseg/hungarian.hpp"
#include "ovseg/json_io.hpp"
#include "ovseg/optim.hpp"
#include "ovseg/pnm.hpp"
#include "ovseg/rng.hpp"

namespace ovseg {

RegionPartition MakePartition(int width, int height, const std::vector<int>& raw) {
  Require(width > 0 && height > 0 && raw.size() == std::size_t(width) * height,
          "partition size mismatch");
  RegionPartition p;
  p.width = width;
  p.height = height;
  p.ids.resize(raw.size());
  std::map<int, int> remap;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    auto [it, inserted] = remap.emplace(raw[i], static_cast<int>(remap.size()));
    p.ids[i] = it->second;
  }
  p.num_regions = static_cast<int>(remap.size());
  std::set<std::pair<int, int>> adj;
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const int a = p.at(x, y);
      if (x + 1 < width && p.at(x + 1, y) != a)
        adj.emplace(std::min(a, p.at(x + 1, y)), std::max(a, p.at(x + 1, y)));
      if (y + 1 < height && p.at(x, y + 1) != a)
        adj.emplace(std::min(a, p.at(x, y + 1)), std::max(a, p.at(x, y + 1)));
    }
  }
  p.adjacency.assign(adj.begin(), adj.end());
  return p;
}

namespace {

struct DisjointSet {
  std::vector<int> parent, size;
  explicit DisjointSet(int n) : parent(n), size(n, 1) {
    std::iota(parent.begin(), parent.end(), 0);
  }
  int Find(int x) {
    while (parent[x] != x) {
      parent[x] = parent[parent[x]];
      x = parent[x];
    }
    return x;
  }
  // Larger set absorbs the smaller; equal sizes keep the lower root.
  int Union(int a, int b) {
    if (size[a] < size[b] || (size[a] == size[b] && b < a)) std::swap(a, b);
    parent[b] = a;
    size[a] += size[b];
    return a;
  }
};

struct Edge {
  double w;
  int a, b;
};

}  // namespace

RegionPartition FelzPartition(const Image& image, double k, int min_size) {
  Require(!image.empty(), "partition of an empty image");
  Require(k > 0.0, "partition threshold scale must be positive");
  const int w = image.width, h = image.height, n = w * h;
  std::vector<Edge> edges;
  edges.reserve(std::size_t(n) * 2);
  auto weight = [&](int x0, int y0, int x1, int y1) {
    double s = 0.0;
    for (int c = 0; c < 3; ++c) {
      const double d = double(image.at(x0, y0, c)) - double(image.at(x1, y1, c));
      s += d * d;
    }
    return std::sqrt(s);
  };
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int i = y * w + x;
      if (x + 1 < w) edges.push_back({weight(x, y, x + 1, y), i, i + 1});
      if (y + 1 < h) edges.push_back({weight(x, y, x, y + 1), i, i + w});
    }
  }
  std::sort(edges.begin(), edges.end(), [](const Edge& l, const Edge& r) {
    if (l.w != r.w) return l.w < r.w;
    if (l.a != r.a) return l.a < r.a;
    return l.b < r.b;
  });
  DisjointSet ds(n);
  std::vector<double> threshold(n, k);
  for (const Edge& e : edges) {
    const int ra = ds.Find(e.a), rb = ds.Find(e.b);
    if (ra == rb) continue;
    if (e.w <= threshold[ra] && e.w <= threshold[rb]) {
      const int root = ds.Union(ra, rb);
      threshold[root] = e.w + k / ds.size[root];
    }
  }
  for (const Edge& e : edges) {
    const int ra = ds.Find(e.a), rb = ds.Find(e.b);
    if (ra != rb && (ds.size[ra] < min_size || ds.size[rb] < min_size)) ds.Union(ra, rb);
  }
  std::vector<int> raw(n);
  for (int i = 0; i < n; ++i) raw[i] = ds.Find(i);
  return MakePartition(w, h, raw);
}

namespace {

struct Region {
  int size = 0;
  int x0 = 0, y0 = 0, x1 = -1, y1 = -1;
  std::vector<double> hist;  // 3 * kRegionHistBins, sums to 1
  std::vector<int> pixels;
};

double Similarity(const Region& a, const Region& b, double image_area,
                  const HierarchyWeights& wts) {
  double inter = 0.0;
  for (std::size_t i = 0; i < a.hist.size(); ++i) inter += std::min(a.hist[i], b.hist[i]);
  const double sizes = double(a.size + b.size);
  const double bw = std::max(a.x1, b.x1) - std::min(a.x0, b.x0) + 1;
  const double bh = std::max(a.y1, b.y1) - std::min(a.y0, b.y0) + 1;
  return wts.color * inter + wts.size * (1.0 - sizes / image_area) +
         wts.fill * (1.0 - (bw * bh - sizes) / image_area);
}

Mask RegionMask(const Region& r, int w, int h) {
  Mask m(w, h);
  for (int p : r.pixels) m.values[p] = 1.0;
  return m;
}

}  // namespace

ProposalSet HierarchicalProposals(const RegionPartition& partition, const Image& image,
                                  const HierarchyWeights& weights,
                                  std::vector<std::pair<int, int>>* merges) {
  Require(partition.width == image.width && partition.height == image.height,
          "partition and image size differ");
  const int w = image.width, h = image.height, n = w * h;
  const int r0 = partition.num_regions;
  Require(r0 >= 1, "partition has no regions");
  std::vector<Region> regions(r0);
  for (auto& r : regions) {
    r.x0 = w;
    r.y0 = h;
    r.hist.assign(3 * kRegionHistBins, 0.0);
  }
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int i = y * w + x;
      const int id = partition.ids[i];
      Require(id >= 0 && id < r0, "partition id out of range");
      Region& r = regions[id];
      ++r.size;
      r.x0 = std::min(r.x0, x);
      r.y0 = std::min(r.y0, y);
      r.x1 = std::max(r.x1, x);
      r.y1 = std::max(r.y1, y);
      r.pixels.push_back(i);
      for (int c = 0; c < 3; ++c) r.hist[c * kRegionHistBins + (image.at(x, y, c) >> 5)] += 1.0;
    }
  }
  for (auto& r : regions) {
    Require(r.size > 0, "partition ids are not contiguous");
    for (double& v : r.hist) v /= 3.0 * r.size;
  }

  const double area = double(n);
  std::map<std::pair<int, int>, double> sims;
  std::vector<std::set<int>> neighbours(r0);
  for (const auto& [a, b] : partition.adjacency) {
    sims[{a, b}] = Similarity(regions[a], regions[b], area, weights);
    neighbours[a].insert(b);
    neighbours[b].insert(a);
  }
  for (int step = 0; step < r0 - 1; ++step) {
    if (sims.empty()) Fail(ErrorKind::kInvalidArgument, "partition regions are not connected");
    auto best = sims.begin();
    for (auto it = sims.begin(); it != sims.end(); ++it)
      if (it->second > best->second) best = it;
    const auto [a, b] = best->first;
    if (merges != nullptr) merges->emplace_back(a, b);
    const int t = static_cast<int>(regions.size());
    Region merged;
    const Region& ra = regions[a];
    const Region& rb = regions[b];
    merged.size = ra.size + rb.size;
    merged.x0 = std::min(ra.x0, rb.x0);
    merged.y0 = std::min(ra.y0, rb.y0);
    merged.x1 = std::max(ra.x1, rb.x1);
    merged.y1 = std::max(ra.y1, rb.y1);
    merged.hist.resize(ra.hist.size());
    for (std::size_t i = 0; i < merged.hist.size(); ++i)
      merged.hist[i] = (ra.size * ra.hist[i] + rb.size * rb.hist[i]) / merged.size;
    merged.pixels = ra.pixels;
    merged.pixels.insert(merged.pixels.end(), rb.pixels.begin(), rb.pixels.end());
    std::sort(merged.pixels.begin(), merged.pixels.end());
    regions.push_back(std::move(merged));
    neighbours.emplace_back();

    std::set<int> joined;
    for (int old : {a, b}) {
      for (int nb : neighbours[old]) {
        sims.erase({std::min(old, nb), std::max(old, nb)});
        neighbours[nb].erase(old);
        if (nb != a && nb != b) joined.insert(nb);
      }
      neighbours[old].clear();
    }
    for (int nb : joined) {
      sims[{nb, t}] = Similarity(regions[nb], regions[t], area, weights);
      neighbours[nb].insert(t);
      neighbours[t].insert(nb);
    }
  }

  ProposalSet out;
  for (const auto& r : regions) out.masks.push_back(RegionMask(r, w, h));
  return out;
}

Matrix PixelFeatures(const Image& image) {
  Require(!image.empty(), "pixel features of an empty image");
  const int w = image.width, h = image.height;
  Matrix f(w * h, kPixelFeatures);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      auto row = f.row(y * w + x);
      double sum[3] = {0, 0, 0};
      int count = 0;
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const int xx = x + dx, yy = y + dy;
          if (xx < 0 || yy < 0 || xx >= w || yy >= h) continue;
          ++count;
          for (int c = 0; c < 3; ++c) sum[c] += image.at(xx, yy, c);
        }
      }
      for (int c = 0; c < 3; ++c) {
        row[c] = image.at(x, y, c) / 255.0;
        row[5 + c] = sum[c] / (255.0 * count);
      }
      row[3] = double(x) / w;
      row[4] = double(y) / h;
    }
  }
  return f;
}

namespace {

constexpr double kProbClamp = 1e-7;

// Sigmoid of a logit with the clamped logs used by BCE.
struct SigmoidTerms {
  double m;
  double log_p;
  double log_1mp;
  bool unclamped;
};

SigmoidTerms Sigmoid(double l) {
  const double e = std::exp(-std::abs(l));
  SigmoidTerms s;
  s.m = l >= 0 ? 1.0 / (1.0 + e) : e / (1.0 + e);
  if (s.m < kProbClamp) {
    s.unclamped = false;
    s.log_p = std::log(kProbClamp);
    s.log_1mp = std::log1p(-kProbClamp);
  } else if (s.m > 1.0 - kProbClamp) {
    s.unclamped = false;
    s.log_p = std::log1p(-kProbClamp);
    s.log_1mp = std::log(kProbClamp);
  } else {
    s.unclamped = true;
    const double lp = std::log1p(e);
    s.log_p = -(std::max(-l, 0.0) + lp);
    s.log_1mp = -(std::max(l, 0.0) + lp);
  }
  return s;
}

}  // namespace

double BinaryCrossEntropy(std::span<const double> probs, std::span<const std::uint8_t> target,
                          std::span<const std::uint8_t> valid) {
  Require(probs.size() == target.size() && probs.size() == valid.size(), "BCE size mismatch");
  double sum = 0.0;
  int count = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (!valid[i]) continue;
    const double p = std::clamp(probs[i], kProbClamp, 1.0 - kProbClamp);
    sum -= target[i] ? std::log(p) : std::log1p(-p);
    ++count;
  }
  return count > 0 ? sum / count : 0.0;
}

double DiceLoss(std::span<const double> probs, std::span<const std::uint8_t> target,
                std::span<const std::uint8_t> valid) {
  Require(probs.size() == target.size() && probs.size() == valid.size(), "Dice size mismatch");
  double inter = 0.0, denom = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (!valid[i]) continue;
    inter += probs[i] * target[i];
    denom += probs[i] + target[i];
  }
  return denom > 0.0 ? 1.0 - 2.0 * inter / denom : 0.0;
}

QueryParams QueryParams::Zeros(int num_queries) {
  QueryParams p;
  p.embed = Matrix(kPixelEmbed, kPixelFeatures);
  p.embed_bias.assign(kPixelEmbed, 0.0);
  p.queries = Matrix(num_queries, kPixelEmbed);
  p.mask_bias.assign(num_queries, 0.0);
  p.class_proj = Matrix(kEmbedDim, kPixelEmbed);
  p.no_object.assign(num_queries, 0.0);
  return p;
}

std::vector<std::span<double>> QueryParams::Tensors() {
  return {embed.data, embed_bias, queries.data, mask_bias, class_proj.data, no_object};
}

std::vector<std::span<const double>> QueryParams::Tensors() const {
  return {embed.data, embed_bias, queries.data, mask_bias, class_proj.data, no_object};
}

const std::vector<std::string>& QueryParams::TensorNames() {
  static const std::vector<std::string> names = {"embed",     "embed_bias", "queries",
                                                 "mask_bias", "class_proj", "no_object"};
  return names;
}

QueryModel InitQueryModel(int num_queries, std::uint64_t seed) {
  Require(num_queries >= 1, "query model needs at least one query");
  QueryModel m;
  m.seed = seed;
  m.params = QueryParams::Zeros(num_queries);
  SplitMix64 rng(seed);
  for (Matrix* t : {&m.params.embed, &m.params.queries, &m.params.class_proj})
    for (double& x : t->data) x = rng.Uniform(-0.05, 0.05);
  return m;
}

namespace {

// Per-query pixel-space mask weights: w_k = embed^T q_k, beta_k = q_k . c + b_k.
void MaskWeights(const QueryParams& p, int k, double* w, double* beta) {
  std::fill(w, w + kPixelFeatures, 0.0);
  auto q = p.queries.row(k);
  for (int d = 0; d < kPixelEmbed; ++d) {
    auto row = p.embed.row(d);
    for (int f = 0; f < kPixelFeatures; ++f) w[f] += q[d] * row[f];
  }
  *beta = Dot(q, p.embed_bias) + p.mask_bias[k];
}

double MaskLogit(const double* w, double beta, std::span<const double> phi) {
  double l = beta;
  for (int f = 0; f < kPixelFeatures; ++f) l += w[f] * phi[f];
  return l;
}

void CheckHead(const QueryModel& model, const Matrix& features, const Matrix& head) {
  if (features.cols != kPixelFeatures)
    Fail(ErrorKind::kInvalidArgument, "pixel features must have 8 columns");
  if (head.cols != kEmbedDim || head.rows < 1)
    Fail(ErrorKind::kInvalidArgument, "class head must be a non-empty S x 32 matrix");
  if (model.params.queries.cols != kPixelEmbed)
    Fail(ErrorKind::kInvalidArgument, "query dimension mismatch");
}

// Class logits of query k into `logits` (size S+1); returns the normalized
// projection and its pre-normalization norm through the out-parameters. A
// zero projection has cosine 0 with every class and norm 0.
void ClassLogits(const QueryModel& model, const Matrix& head, int k, Vec* u, double* norm,
                 std::span<double> logits) {
  const QueryParams& p = model.params;
  u->assign(kEmbedDim, 0.0);
  MatVec(p.class_proj, p.queries.row(k), *u);
  *norm = Norm(*u);
  if (!std::isfinite(*norm)) Fail(ErrorKind::kNumerical, "query class projection is not finite");
  if (*norm > 0.0)
    for (double& x : *u) x /= *norm;
  for (int c = 0; c < head.rows; ++c) logits[c] = model.class_scale * Dot(*u, head.row(c));
  logits[head.rows] = p.no_object[k];
}

}  // namespace

QueryOutput QueryForward(const QueryModel& model, const Matrix& features, const Matrix& head) {
  CheckHead(model, features, head);
  const int n = model.params.num_queries();
  const int pixels = features.rows;
  const int s = head.rows;
  QueryOutput out{Matrix(n, pixels), Matrix(n, s + 1), Matrix(n, s + 1)};
  Vec u;
  double norm = 0.0;
  for (int k = 0; k < n; ++k) {
    double w[kPixelFeatures], beta;
    MaskWeights(model.params, k, w, &beta);
    auto mrow = out.masks.row(k);
    for (int q = 0; q < pixels; ++q) mrow[q] = Sigmoid(MaskLogit(w, beta, features.row(q))).m;
    ClassLogits(model, head, k, &u, &norm, out.logits.row(k));
    const Vec probs = Softmax(out.logits.row(k));
    std::copy(probs.begin(), probs.end(), out.probs.row(k).begin());
  }
  return out;
}

namespace {

// Per-pixel target index (-1: background or ignored).
std::vector<int> TargetIndex(const std::vector<TargetSegment>& targets, std::size_t pixels) {
  std::vector<int> idx(pixels, -1);
  for (std::size_t j = 0; j < targets.size(); ++j) {
    Require(targets[j].mask.size() == pixels, "target mask size mismatch");
    for (std::size_t q = 0; q < pixels; ++q)
      if (targets[j].mask[q]) idx[q] = static_cast<int>(j);
  }
  return idx;
}

// BCE and Dice of one mask row against every target, from a single pass.
void MaskCostsAgainstTargets(const std::vector<SigmoidTerms>& terms,
                             const std::vector<int>& tidx, std::span<const std::uint8_t> valid,
                             int num_targets, std::vector<double>* bce,
                             std::vector<double>* dice) {
  std::vector<double> s1(num_targets, 0.0), s0(num_targets, 0.0), inter(num_targets, 0.0);
  std::vector<int> gsize(num_targets, 0);
  double total0 = 0.0, total_m = 0.0;
  int count = 0;
  for (std::size_t q = 0; q < terms.size(); ++q) {
    if (!valid[q]) continue;
    ++count;
    const SigmoidTerms& t = terms[q];
    total0 += t.log_1mp;
    total_m += t.m;
    const int j = tidx[q];
    if (j >= 0) {
      s1[j] += t.log_p;
      s0[j] += t.log_1mp;
      inter[j] += t.m;
      ++gsize[j];
    }
  }
  bce->assign(num_targets, 0.0);
  dice->assign(num_targets, 0.0);
  for (int j = 0; j < num_targets; ++j) {
    if (count > 0) (*bce)[j] = -(s1[j] + total0 - s0[j]) / count;
    const double denom = total_m + gsize[j];
    (*dice)[j] = denom > 0.0 ? 1.0 - 2.0 * inter[j] / denom : 0.0;
  }
}

std::vector<SigmoidTerms> MaskTerms(const QueryParams& p, int k, const Matrix& features) {
  double w[kPixelFeatures], beta;
  MaskWeights(p, k, w, &beta);
  std::vector<SigmoidTerms> terms(features.rows);
  for (int q = 0; q < features.rows; ++q) terms[q] = Sigmoid(MaskLogit(w, beta, features.row(q)));
  return terms;
}

}  // namespace

Matrix MatchCost(const QueryOutput& out, const std::vector<TargetSegment>& targets,
                 std::span<const std::uint8_t> valid) {
  const int n = out.masks.rows;
  const int m = static_cast<int>(targets.size());
  Matrix cost(n, m);
  if (m == 0) return cost;
  const std::size_t pixels = out.masks.cols;
  Require(valid.size() == pixels, "valid mask size mismatch");
  const std::vector<int> tidx = TargetIndex(targets, pixels);
  std::vector<SigmoidTerms> terms(pixels);
  std::vector<double> bce, dice;
  for (int k = 0; k < n; ++k) {
    auto mrow = out.masks.row(k);
    for (std::size_t q = 0; q < pixels; ++q) {
      SigmoidTerms& t = terms[q];
      t.m = mrow[q];
      const double p = std::clamp(t.m, kProbClamp, 1.0 - kProbClamp);
      t.log_p = std::log(p);
      t.log_1mp = std::log1p(-p);
    }
    MaskCostsAgainstTargets(terms, tidx, valid, m, &bce, &dice);
    for (int j = 0; j < m; ++j)
      cost(k, j) = -out.probs(k, targets[j].head_index) + bce[j] + dice[j];
  }
  return cost;
}

QueryExample MakeQueryExample(const Image& image, const LabelMap& labels,
                              const std::vector<int>& head_classes) {
  Require(labels.width == image.width && labels.height == image.height,
          "label map and image size differ");
  QueryExample ex;
  ex.features = PixelFeatures(image);
  const std::size_t pixels = labels.size();
  ex.valid.assign(pixels, 0);
  std::map<int, int> head_of;
  for (std::size_t i = 0; i < head_classes.size(); ++i)
    head_of[head_classes[i]] = static_cast<int>(i);
  std::map<int, std::size_t> target_of;
  for (std::size_t q = 0; q < pixels; ++q) {
    const int l = labels.labels[q];
    auto it = head_of.find(l);
    if (it == head_of.end()) continue;
    ex.valid[q] = 1;
    auto [t, inserted] = target_of.emplace(l, 0);
    if (inserted) {
      t->second = ex.targets.size();
      ex.targets.push_back({it->second, std::vector<std::uint8_t>(pixels, 0)});
    }
    ex.targets[t->second].mask[q] = 1;
  }
  // Targets in head-class order.
  std::sort(ex.targets.begin(), ex.targets.end(),
            [](const TargetSegment& a, const TargetSegment& b) { return a.head_index < b.head_index; });
  return ex;
}

namespace {

double ImageLossAndGrads(const QueryModel& model, const QueryExample& ex, const Matrix& head,
                         QueryParams* grads, double grad_scale) {
  const QueryParams& p = model.params;
  const int n = p.num_queries();
  const int s = head.rows;
  const std::size_t pixels = ex.features.rows;
  Require(ex.valid.size() == pixels, "example size mismatch");
  const int m = static_cast<int>(ex.targets.size());

  std::vector<std::vector<SigmoidTerms>> terms(n);
  Matrix logits(n, s + 1), probs(n, s + 1);
  std::vector<Vec> us(n);
  std::vector<double> norms(n);
  for (int k = 0; k < n; ++k) {
    ClassLogits(model, head, k, &us[k], &norms[k], logits.row(k));
    const Vec pr = Softmax(logits.row(k));
    std::copy(pr.begin(), pr.end(), probs.row(k).begin());
  }

  std::vector<int> matched(n, -1);
  std::vector<int> tidx;
  if (m > 0) {
    tidx = TargetIndex(ex.targets, pixels);
    Matrix cost(n, m);
    std::vector<double> bce, dice;
    for (int k = 0; k < n; ++k) {
      terms[k] = MaskTerms(p, k, ex.features);
      MaskCostsAgainstTargets(terms[k], tidx, ex.valid, m, &bce, &dice);
      for (int j = 0; j < m; ++j) cost(k, j) = -probs(k, ex.targets[j].head_index) + bce[j] + dice[j];
    }
    for (const auto& [k, j] : HungarianMatch(cost).pairs) matched[k] = j;
  }

  int count = 0;
  for (std::size_t q = 0; q < pixels; ++q) count += ex.valid[q];

  double loss = 0.0;
  Vec dlogit(s + 1);
  for (int k = 0; k < n; ++k) {
    const int j = matched[k];
    const int target = j >= 0 ? ex.targets[j].head_index : s;
    const double weight = j >= 0 ? 1.0 : kNoObjectWeight;
    loss += weight * -std::log(std::max(probs(k, target), 1e-300));
    if (grads != nullptr) {
      for (int c = 0; c <= s; ++c) dlogit[c] = grad_scale * weight * (probs(k, c) - (c == target));
      grads->no_object[k] += dlogit[s];
      Vec gu(kEmbedDim, 0.0);
      for (int c = 0; c < s; ++c) {
        const double g = dlogit[c] * model.class_scale;
        auto t = head.row(c);
        for (int d = 0; d < kEmbedDim; ++d) gu[d] += g * t[d];
      }
      if (norms[k] > 0.0) {  // a zero projection contributes no gradient
        const Vec graw = NormalizeBackward(us[k], norms[k], gu);
        OuterAdd(grads->class_proj, graw, p.queries.row(k));
        MatTVecAdd(p.class_proj, graw, grads->queries.row(k));
      }
    }
    if (j < 0) continue;

    // Matched: BCE + Dice on the mask.
    const auto& tk = terms[k];
    double bce = 0.0, inter = 0.0, sum_m = 0.0, sum_g = 0.0;
    for (std::size_t q = 0; q < pixels; ++q) {
      if (!ex.valid[q]) continue;
      const bool g = tidx[q] == j;
      bce -= g ? tk[q].log_p : tk[q].log_1mp;
      inter += g ? tk[q].m : 0.0;
      sum_m += tk[q].m;
      sum_g += g;
    }
    if (count > 0) bce /= count;
    const double denom = sum_m + sum_g;
    const double dice = denom > 0.0 ? 1.0 - 2.0 * inter / denom : 0.0;
    loss += bce + dice;
    if (grads == nullptr) continue;

    double gw[kPixelFeatures] = {0};
    double gbeta = 0.0;
    for (std::size_t q = 0; q < pixels; ++q) {
      if (!ex.valid[q]) continue;
      const double g = tidx[q] == j ? 1.0 : 0.0;
      const double mq = tk[q].m;
      double dm_dice = denom > 0.0 ? -2.0 * (g * denom - inter) / (denom * denom) : 0.0;
      double dl = dm_dice * mq * (1.0 - mq);
      if (tk[q].unclamped && count > 0) dl += (mq - g) / count;
      dl *= grad_scale;
      if (dl == 0.0) continue;
      auto phi = ex.features.row(static_cast<int>(q));
      for (int f = 0; f < kPixelFeatures; ++f) gw[f] += dl * phi[f];
      gbeta += dl;
    }
    auto qk = p.queries.row(k);
    auto gq = grads->queries.row(k);
    for (int d = 0; d < kPixelEmbed; ++d) {
      auto arow = p.embed.row(d);
      auto garow = grads->embed.row(d);
      double acc = 0.0;
      for (int f = 0; f < kPixelFeatures; ++f) {
        garow[f] += qk[d] * gw[f];
        acc += arow[f] * gw[f];
      }
      gq[d] += acc + gbeta * p.embed_bias[d];
      grads->embed_bias[d] += gbeta * qk[d];
    }
    grads->mask_bias[k] += gbeta;
  }
  return loss;
}

}  // namespace

double QueryLossAndGrads(const QueryModel& model, const std::vector<const QueryExample*>& batch,
                         const Matrix& head, QueryParams* grads) {
  Require(!batch.empty(), "query batch is empty");
  const double scale = 1.0 / batch.size();
  double loss = 0.0;
  for (const QueryExample* ex : batch) {
    CheckHead(model, ex->features, head);
    loss += ImageLossAndGrads(model, *ex, head, grads, scale);
  }
  return loss * scale;
}

QueryModel TrainQueryModel(const std::vector<Scene>& scenes, const ClassEmbeddings& head,
                           const QueryTrainConfig& config, QueryTrainLog* log) {
  QueryModel model = InitQueryModel(config.num_queries, config.seed);
  if (config.steps <= 0) return model;
  if (scenes.empty()) Fail(ErrorKind::kInvalidArgument, "query training needs scenes");
  const int n = static_cast<int>(scenes.size());
  const int batch = std::min(config.batch, n);
  SplitMix64 rng(DeriveSeed(config.seed, 13, 0));
  SgdMomentum<QueryParams> opt(QueryParams::Zeros(config.num_queries), config.momentum);
  QueryParams grads = QueryParams::Zeros(config.num_queries);
  std::vector<int> order(n);
  std::vector<QueryExample> examples(batch);
  std::vector<const QueryExample*> ptrs(batch);
  for (int step = 0; step < config.steps; ++step) {
    std::iota(order.begin(), order.end(), 0);
    for (int i = 0; i < batch; ++i) {
      const int j = i + static_cast<int>(rng.Below(static_cast<std::uint64_t>(n - i)));
      std::swap(order[i], order[j]);
      const Scene& sc = scenes[order[i]];
      examples[i] = MakeQueryExample(sc.image, sc.labels, head.classes);
      ptrs[i] = &examples[i];
    }
    SetZero(grads);
    const double loss = QueryLossAndGrads(model, ptrs, head.vectors, &grads);
    if (!std::isfinite(loss) || !AllFinite(grads))
      Fail(ErrorKind::kNumerical, "query model training diverged at step " + std::to_string(step));
    if (log != nullptr) log->step_losses.push_back(loss);
    opt.Step(model.params, grads, config.lr);
  }
  return model;
}

ProposalSet QueryProposals(const QueryModel& model, const Image& image,
                           const ClassEmbeddings& head, std::string image_id) {
  const Matrix features = PixelFeatures(image);
  const QueryOutput out = QueryForward(model, features, head.vectors);
  ProposalSet set;
  set.image_id = std::move(image_id);
  set.head_classes = head.classes;
  for (int k = 0; k < out.masks.rows; ++k) {
    Mask m(image.width, image.height);
    auto row = out.masks.row(k);
    std::copy(row.begin(), row.end(), m.values.begin());
    set.masks.push_back(std::move(m));
    auto pr = out.probs.row(k);
    set.head_probs.emplace_back(pr.begin(), pr.end());
  }
  return set;
}

nlohmann::json QueryModelToJson(const QueryModel& model) {
  Json j;
  j["num_queries"] = model.params.num_queries();
  j["class_scale"] = model.class_scale;
  j["seed"] = model.seed;
  const auto& names = QueryParams::TensorNames();
  const auto tensors = model.params.Tensors();
  Json t;
  for (std::size_t i = 0; i < names.size(); ++i)
    t[names[i]] = std::vector<double>(tensors[i].begin(), tensors[i].end());
  j["tensors"] = t;
  return j;
}

QueryModel QueryModelFromJson(const nlohmann::json& j) {
  QueryModel m;
  const int n = j.at("num_queries").get<int>();
  if (n < 1) Fail(ErrorKind::kIntegrity, "query checkpoint has no queries");
  m.params = QueryParams::Zeros(n);
  m.class_scale = j.at("class_scale").get<double>();
  m.seed = j.at("seed").get<std::uint64_t>();
  const auto& names = QueryParams::TensorNames();
  auto tensors = m.params.Tensors();
  for (std::size_t i = 0; i < names.size(); ++i) {
    const Vec v = VecFromJson(j.at("tensors").at(names[i]), "query tensor " + names[i]);
    if (v.size() != tensors[i].size())
      Fail(ErrorKind::kIntegrity, "query tensor " + names[i] + " has the wrong size");
    std::copy(v.begin(), v.end(), tensors[i].begin());
  }
  return m;
}

void ExportProposals(const ProposalSet& set, const std::filesystem::path& dir) {
  Json index;
  index["image_id"] = set.image_id;
  index["files"] = Json::array();
  for (int k = 0; k < set.size(); ++k) {
    const Mask& m = set.masks[k];
    LabelMap gray(m.width, m.height);
    for (std::size_t i = 0; i < m.size(); ++i)
      gray.labels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(m.values[i], 0.0, 1.0) * 255.0));
    char name[32];
    std::snprintf(name, sizeof(name), "proposal_%03d.pgm", k);
    WritePgm(dir / name, gray);
    index["files"].push_back(name);
  }
  if (set.has_head_probs()) {
    index["head_classes"] = set.head_classes;
    index["head_probs"] = set.head_probs;
  }
  WriteJsonFile(dir / "proposals.json", index);
}

}  // namespace ovseg
