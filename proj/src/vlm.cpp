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

#include "ovseg/vlm.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <set>

#include "ovseg/json_io.hpp"
#include "ovseg/optim.hpp"
#include "ovseg/rng.hpp"

namespace ovseg {

std::vector<std::string> SplitWords(std::string_view text) {
  std::vector<std::string> words;
  std::string cur;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!cur.empty()) words.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

Tokenizer Tokenizer::Build(const std::vector<std::string>& texts) {
  std::set<std::string> words;
  for (const auto& t : texts)
    for (auto& w : SplitWords(t)) words.insert(std::move(w));
  return FromWords({words.begin(), words.end()});
}

Tokenizer Tokenizer::FromWords(std::vector<std::string> words) {
  Tokenizer tok;
  std::sort(words.begin(), words.end());
  words.erase(std::unique(words.begin(), words.end()), words.end());
  tok.words_ = std::move(words);
  return tok;
}

int Tokenizer::IdOf(std::string_view word) const {
  auto it = std::lower_bound(words_.begin(), words_.end(), word);
  if (it == words_.end() || *it != word) return 0;
  return static_cast<int>(it - words_.begin()) + 1;
}

std::vector<int> Tokenizer::Tokenize(std::string_view text) const {
  std::vector<int> ids;
  for (const auto& w : SplitWords(text)) ids.push_back(IdOf(w));
  return ids;
}

VlmParams VlmParams::Zeros(int vocab_size) {
  VlmParams p;
  p.token_embedding = Matrix(vocab_size, kTokenDim);
  p.text_proj = Matrix(kEmbedDim, kTokenDim);
  p.text_bias.assign(kEmbedDim, 0.0);
  p.w1 = Matrix(kVisionHidden, kVisionInput);
  p.b1.assign(kVisionHidden, 0.0);
  p.w2 = Matrix(kEmbedDim, kVisionHidden);
  p.b2.assign(kEmbedDim, 0.0);
  p.log_scale = 0.0;
  return p;
}

std::vector<std::span<double>> VlmParams::Tensors() {
  return {token_embedding.data, text_proj.data, text_bias, w1.data, b1,
          w2.data, b2, std::span<double>(&log_scale, 1)};
}

std::vector<std::span<const double>> VlmParams::Tensors() const {
  return {token_embedding.data, text_proj.data, text_bias, w1.data, b1,
          w2.data, b2, std::span<const double>(&log_scale, 1)};
}

const std::vector<std::string>& VlmParams::TensorNames() {
  static const std::vector<std::string> names = {
      "token_embedding", "text_proj", "text_bias", "w1", "b1", "w2", "b2",
      "log_scale"};
  return names;
}

VLModel InitVlm(Tokenizer tokenizer, std::uint64_t seed) {
  VLModel m;
  m.seed = seed;
  m.params = VlmParams::Zeros(tokenizer.vocab_size());
  m.tokenizer = std::move(tokenizer);
  SplitMix64 rng(seed);
  for (Matrix* w : {&m.params.token_embedding, &m.params.text_proj, &m.params.w1,
                    &m.params.w2})
    for (double& x : w->data) x = rng.Uniform(-0.05, 0.05);
  m.params.log_scale = std::log(14.0);
  return m;
}

Vec VisionFeatures(const Image& image) {
  if (image.empty()) Fail(ErrorKind::kInvalidArgument, "vision input has zero area");
  Vec f = ResizeAreaNormalized(image, kResizeSide, kResizeSide);
  f.resize(kVisionInput, 0.0);
  const std::size_t base = std::size_t(kResizeSide) * kResizeSide * 3;
  const double total = double(image.width) * image.height;
  std::vector<std::size_t> counts(3 * kHistBins, 0);
  for (std::size_t i = 0; i < image.pixels.size(); i += 3)
    for (int c = 0; c < 3; ++c) ++counts[c * kHistBins + (image.pixels[i + c] >> 5)];
  for (int k = 0; k < 3 * kHistBins; ++k) f[base + k] = double(counts[k]) / total;
  return f;
}

Vec EncodeVisionFeatures(const VlmParams& p, std::span<const double> feature,
                         VisionActivations* acts) {
  Vec pre(kVisionHidden);
  MatVec(p.w1, feature, pre);
  for (int i = 0; i < kVisionHidden; ++i) pre[i] += p.b1[i];
  Vec hidden(kVisionHidden);
  for (int i = 0; i < kVisionHidden; ++i) hidden[i] = pre[i] > 0.0 ? pre[i] : 0.0;
  Vec z(kEmbedDim);
  MatVec(p.w2, hidden, z);
  for (int i = 0; i < kEmbedDim; ++i) z[i] += p.b2[i];
  const double n = NormalizeInPlace(z);
  if (acts != nullptr) {
    acts->hidden_pre = std::move(pre);
    acts->hidden = std::move(hidden);
    acts->embedding = z;
    acts->norm = n;
  }
  return z;
}

Vec EncodeVision(const VLModel& model, const Image& image) {
  return EncodeVisionFeatures(model.params, VisionFeatures(image));
}

Vec EncodeTokens(const VlmParams& p, std::span<const int> tokens,
                 const Matrix* prefix, TextActivations* acts) {
  const int n_prefix = prefix != nullptr ? prefix->rows : 0;
  const int count = n_prefix + static_cast<int>(tokens.size());
  if (count == 0) Fail(ErrorKind::kInvalidArgument, "cannot encode an empty token sequence");
  Vec pooled(kTokenDim, 0.0);
  for (int r = 0; r < n_prefix; ++r) {
    auto row = prefix->row(r);
    for (int k = 0; k < kTokenDim; ++k) pooled[k] += row[k];
  }
  for (int id : tokens) {
    if (id < 0 || id >= p.token_embedding.rows)
      Fail(ErrorKind::kInvalidArgument, "token id out of range");
    auto row = p.token_embedding.row(id);
    for (int k = 0; k < kTokenDim; ++k) pooled[k] += row[k];
  }
  for (double& x : pooled) x /= count;
  Vec u(kEmbedDim);
  MatVec(p.text_proj, pooled, u);
  for (int i = 0; i < kEmbedDim; ++i) u[i] += p.text_bias[i];
  const double n = NormalizeInPlace(u);
  if (acts != nullptr) {
    acts->pooled = std::move(pooled);
    acts->embedding = u;
    acts->norm = n;
  }
  return u;
}

Vec EncodeText(const VLModel& model, std::string_view text) {
  const auto tokens = model.tokenizer.Tokenize(text);
  return EncodeTokens(model.params, tokens);
}

void EncodeTokensBackward(const VlmParams& p, std::span<const int> tokens,
                          const Matrix* prefix, const TextActivations& acts,
                          std::span<const double> grad_embedding, VlmParams* grads,
                          Matrix* prefix_grad) {
  const Vec du = NormalizeBackward(acts.embedding, acts.norm, grad_embedding);
  Vec dpooled(kTokenDim, 0.0);
  MatTVecAdd(p.text_proj, du, dpooled);
  const int n_prefix = prefix != nullptr ? prefix->rows : 0;
  const double inv = 1.0 / double(n_prefix + static_cast<int>(tokens.size()));
  if (grads != nullptr) {
    OuterAdd(grads->text_proj, du, acts.pooled);
    for (int i = 0; i < kEmbedDim; ++i) grads->text_bias[i] += du[i];
    for (int id : tokens) {
      auto row = grads->token_embedding.row(id);
      for (int k = 0; k < kTokenDim; ++k) row[k] += dpooled[k] * inv;
    }
  }
  if (prefix_grad != nullptr) {
    for (int r = 0; r < n_prefix; ++r) {
      auto row = prefix_grad->row(r);
      for (int k = 0; k < kTokenDim; ++k) row[k] += dpooled[k] * inv;
    }
  }
}

double ContrastiveLossAndGrads(const VlmParams& p, const std::vector<Vec>& features,
                               const std::vector<std::vector<int>>& tokens,
                               VlmParams* grads) {
  const int b = static_cast<int>(features.size());
  if (b < 2 || static_cast<int>(tokens.size()) != b)
    Fail(ErrorKind::kInvalidArgument, "contrastive batch needs B >= 2 aligned pairs");
  std::vector<VisionActivations> va(b);
  std::vector<TextActivations> ta(b);
  for (int i = 0; i < b; ++i) {
    EncodeVisionFeatures(p, features[i], &va[i]);
    EncodeTokens(p, tokens[i], nullptr, &ta[i]);
  }
  const double scale = std::exp(p.log_scale);
  Matrix logits(b, b);
  for (int i = 0; i < b; ++i)
    for (int j = 0; j < b; ++j)
      logits(i, j) = scale * Dot(va[i].embedding, ta[j].embedding);

  // g(i, j) = dLoss / dlogit(i, j)
  Matrix g(b, b);
  double loss = 0.0;
  Vec probs;
  for (int i = 0; i < b; ++i) {
    loss += SoftmaxCrossEntropy(logits.row(i), i, &probs);
    for (int j = 0; j < b; ++j) g(i, j) += (probs[j] - (i == j)) / (2.0 * b);
  }
  Vec column(b);
  for (int j = 0; j < b; ++j) {
    for (int i = 0; i < b; ++i) column[i] = logits(i, j);
    loss += SoftmaxCrossEntropy(column, j, &probs);
    for (int i = 0; i < b; ++i) g(i, j) += (probs[i] - (i == j)) / (2.0 * b);
  }
  loss /= 2.0 * b;
  if (grads == nullptr) return loss;

  double dlog_scale = 0.0;
  for (int i = 0; i < b; ++i)
    for (int j = 0; j < b; ++j) dlog_scale += g(i, j) * logits(i, j);
  grads->log_scale += dlog_scale;

  for (int i = 0; i < b; ++i) {
    Vec dv(kEmbedDim, 0.0);
    for (int j = 0; j < b; ++j)
      for (int k = 0; k < kEmbedDim; ++k) dv[k] += scale * g(i, j) * ta[j].embedding[k];
    const Vec dz = NormalizeBackward(va[i].embedding, va[i].norm, dv);
    OuterAdd(grads->w2, dz, va[i].hidden);
    for (int k = 0; k < kEmbedDim; ++k) grads->b2[k] += dz[k];
    Vec dh(kVisionHidden, 0.0);
    MatTVecAdd(p.w2, dz, dh);
    for (int k = 0; k < kVisionHidden; ++k)
      if (va[i].hidden_pre[k] <= 0.0) dh[k] = 0.0;
    OuterAdd(grads->w1, dh, features[i]);
    for (int k = 0; k < kVisionHidden; ++k) grads->b1[k] += dh[k];
  }
  for (int j = 0; j < b; ++j) {
    Vec dt(kEmbedDim, 0.0);
    for (int i = 0; i < b; ++i)
      for (int k = 0; k < kEmbedDim; ++k) dt[k] += scale * g(i, j) * va[i].embedding[k];
    EncodeTokensBackward(p, tokens[j], nullptr, ta[j], dt, grads, nullptr);
  }
  return loss;
}

namespace {

void ClampLogScale(VlmParams& p) {
  p.log_scale = std::clamp(p.log_scale, std::log(kMinLogitScale), std::log(kMaxLogitScale));
}

}  // namespace

VLModel PretrainVlm(Tokenizer tokenizer, const std::vector<Vec>& features,
                    const std::vector<std::string>& captions,
                    const PretrainConfig& config, PretrainLog* log) {
  const int n = static_cast<int>(features.size());
  if (n < 2 || captions.size() != features.size())
    Fail(ErrorKind::kInvalidArgument, "pretraining corpus needs >= 2 aligned pairs");
  const int batch = std::min(config.batch, n);
  VLModel model = InitVlm(std::move(tokenizer), config.seed);
  std::vector<std::vector<int>> tokens(n);
  for (int i = 0; i < n; ++i) tokens[i] = model.tokenizer.Tokenize(captions[i]);

  std::vector<Vec> probe_f(features.begin(), features.begin() + batch);
  std::vector<std::vector<int>> probe_t(tokens.begin(), tokens.begin() + batch);
  const double initial = ContrastiveLossAndGrads(model.params, probe_f, probe_t, nullptr);

  SplitMix64 rng(DeriveSeed(config.seed, 7, 0));
  SgdMomentum<VlmParams> opt(VlmParams::Zeros(model.tokenizer.vocab_size()),
                             config.momentum);
  VlmParams grads = VlmParams::Zeros(model.tokenizer.vocab_size());
  std::vector<int> order(n);
  std::vector<Vec> bf(batch);
  std::vector<std::vector<int>> bt(batch);
  for (int step = 0; step < config.steps; ++step) {
    for (int i = 0; i < n; ++i) order[i] = i;
    for (int i = 0; i < batch; ++i) {
      const int j = i + static_cast<int>(rng.Below(static_cast<std::uint64_t>(n - i)));
      std::swap(order[i], order[j]);
      bf[i] = features[order[i]];
      bt[i] = tokens[order[i]];
    }
    SetZero(grads);
    const double loss = ContrastiveLossAndGrads(model.params, bf, bt, &grads);
    if (!std::isfinite(loss) || !AllFinite(grads))
      Fail(ErrorKind::kNumerical,
           "VLM pretraining diverged at step " + std::to_string(step));
    opt.Step(model.params, grads, config.lr);
    ClampLogScale(model.params);
    if (log != nullptr) log->step_losses.push_back(loss);
  }
  if (log != nullptr) {
    log->initial_probe_loss = initial;
    log->final_probe_loss =
        ContrastiveLossAndGrads(model.params, probe_f, probe_t, nullptr);
  }
  return model;
}

double RetrievalTop1(const VLModel& model, const std::vector<Vec>& features,
                     const std::vector<std::string>& captions) {
  const int n = static_cast<int>(features.size());
  if (n == 0) return 0.0;
  std::vector<Vec> texts(n);
  for (int j = 0; j < n; ++j) texts[j] = EncodeText(model, captions[j]);
  int hits = 0;
  for (int i = 0; i < n; ++i) {
    const Vec v = EncodeVisionFeatures(model.params, features[i]);
    int best = 0;
    double best_s = -2.0;
    for (int j = 0; j < n; ++j) {
      const double s = Dot(v, texts[j]);
      if (s > best_s) {
        best_s = s;
        best = j;
      }
    }
    if (captions[best] == captions[i]) ++hits;
  }
  return double(hits) / n;
}

Vec ClassifyEmbedding(std::span<const double> v, const Matrix& classes, double scale) {
  if (classes.rows == 0) Fail(ErrorKind::kInvalidArgument, "no class embeddings");
  if (std::abs(Norm(v) - 1.0) > 1e-6)
    Fail(ErrorKind::kInvalidArgument, "vision embedding is not unit norm");
  Vec logits(classes.rows);
  for (int c = 0; c < classes.rows; ++c) {
    if (std::abs(Norm(classes.row(c)) - 1.0) > 1e-6)
      Fail(ErrorKind::kInvalidArgument, "class embedding is not unit norm");
    logits[c] = scale * Dot(v, classes.row(c));
  }
  return Softmax(logits);
}

nlohmann::json VlmToJson(const VLModel& m) {
  Json j;
  j["kind"] = "vlm";
  j["seed"] = m.seed;
  j["config"] = {{"token_dim", kTokenDim}, {"embed_dim", kEmbedDim},
                 {"vision_input", kVisionInput}, {"vision_hidden", kVisionHidden},
                 {"eval_scale", m.eval_scale}};
  j["tokenizer"] = m.tokenizer.words();
  j["token_embedding"] = ToJson(m.params.token_embedding);
  j["text_proj"] = ToJson(m.params.text_proj);
  j["text_bias"] = m.params.text_bias;
  j["w1"] = ToJson(m.params.w1);
  j["b1"] = m.params.b1;
  j["w2"] = ToJson(m.params.w2);
  j["b2"] = m.params.b2;
  j["log_scale"] = m.params.log_scale;
  return j;
}

VLModel VlmFromJson(const nlohmann::json& j) {
  try {
    VLModel m;
    m.seed = j.at("seed").get<std::uint64_t>();
    m.eval_scale = j.at("config").at("eval_scale").get<double>();
    m.tokenizer = Tokenizer::FromWords(j.at("tokenizer").get<std::vector<std::string>>());
    m.params.token_embedding = MatrixFromJson(j.at("token_embedding"), "token_embedding");
    m.params.text_proj = MatrixFromJson(j.at("text_proj"), "text_proj");
    m.params.text_bias = VecFromJson(j.at("text_bias"), "text_bias");
    m.params.w1 = MatrixFromJson(j.at("w1"), "w1");
    m.params.b1 = VecFromJson(j.at("b1"), "b1");
    m.params.w2 = MatrixFromJson(j.at("w2"), "w2");
    m.params.b2 = VecFromJson(j.at("b2"), "b2");
    m.params.log_scale = j.at("log_scale").get<double>();
    const auto& p = m.params;
    if (p.token_embedding.rows != m.tokenizer.vocab_size() ||
        p.token_embedding.cols != kTokenDim || p.text_proj.rows != kEmbedDim ||
        p.text_proj.cols != kTokenDim || p.w1.rows != kVisionHidden ||
        p.w1.cols != kVisionInput || p.w2.rows != kEmbedDim ||
        p.w2.cols != kVisionHidden || p.text_bias.size() != kEmbedDim ||
        p.b1.size() != kVisionHidden || p.b2.size() != kEmbedDim)
      Fail(ErrorKind::kIntegrity, "vlm checkpoint tensor shapes are inconsistent");
    return m;
  } catch (const nlohmann::json::exception& e) {
    Fail(ErrorKind::kParse, std::string("vlm checkpoint: ") + e.what());
  }
}

}  // namespace ovseg
