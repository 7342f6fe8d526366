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

#include "ovseg/prompts.hpp"

#include <algorithm>
#include <map>

#include "ovseg/json_io.hpp"
#include "ovseg/optim.hpp"
#include "ovseg/rng.hpp"

namespace ovseg {

PromptTemplate::PromptTemplate(std::string text) : text_(std::move(text)) {
  const auto first = text_.find("{}");
  if (first == std::string::npos || text_.find("{}", first + 2) != std::string::npos)
    Fail(ErrorKind::kInvalidConfig,
         "prompt template needs exactly one {} placeholder: \"" + text_ + "\"");
}

std::string PromptTemplate::Render(const std::string& class_name) const {
  std::string out = text_;
  out.replace(out.find("{}"), 2, class_name);
  return out;
}

PromptSet::PromptSet(const std::vector<std::string>& templates) {
  if (templates.empty()) Fail(ErrorKind::kInvalidConfig, "prompt set is empty");
  for (const auto& t : templates) templates_.emplace_back(t);
}

PromptSet PromptSet::Default() {
  return PromptSet({"a photo of a {}", "a {} in the scene", "{}",
                    "a picture of a {}", "there is a {} in the scene",
                    "a close-up photo of a {}", "a rendering of a {}",
                    "this is a {}"});
}

std::vector<std::string> PromptSet::Texts() const {
  std::vector<std::string> out;
  for (const auto& t : templates_) out.push_back(t.text());
  return out;
}

LearnedPrompt InitLearnedPrompt(int length, std::uint64_t seed) {
  Require(length >= 0, "prompt length must be non-negative");
  LearnedPrompt p;
  p.tokens = Matrix(length, kTokenDim);
  SplitMix64 rng(seed);
  for (double& x : p.tokens.data) x = rng.Uniform(-0.05, 0.05);
  return p;
}

int ClassEmbeddings::RowOf(int c) const {
  for (int i = 0; i < size(); ++i)
    if (classes[i] == c) return i;
  return -1;
}

ClassEmbeddings ClassEmbeddings::Subset(const std::vector<int>& subset) const {
  ClassEmbeddings out;
  out.vectors = Matrix(static_cast<int>(subset.size()), vectors.cols);
  for (std::size_t i = 0; i < subset.size(); ++i) {
    const int r = RowOf(subset[i]);
    if (r < 0) Fail(ErrorKind::kInvalidArgument, "class missing from embeddings");
    out.classes.push_back(subset[i]);
    std::copy(vectors.row(r).begin(), vectors.row(r).end(),
              out.vectors.row(static_cast<int>(i)).begin());
  }
  return out;
}

std::uint64_t ClassEmbeddings::Checksum() const {
  return ChecksumDoubles(vectors.data);
}

std::vector<int> AllClasses(const Vocabulary& vocab) {
  std::vector<int> out(vocab.size());
  for (int i = 0; i < vocab.size(); ++i) out[i] = i;
  return out;
}

namespace {

template <typename Encode>
ClassEmbeddings BuildWith(const Vocabulary& vocab, const std::vector<int>& classes,
                          Encode encode) {
  if (vocab.size() == 0 || classes.empty())
    Fail(ErrorKind::kInvalidArgument, "cannot build embeddings for an empty vocabulary");
  ClassEmbeddings out;
  out.classes = classes;
  out.vectors = Matrix(static_cast<int>(classes.size()), kEmbedDim);
  for (std::size_t i = 0; i < classes.size(); ++i) {
    const Vec e = encode(vocab[classes[i]].name);
    std::copy(e.begin(), e.end(), out.vectors.row(static_cast<int>(i)).begin());
  }
  return out;
}

}  // namespace

ClassEmbeddings BuildClassEmbeddings(const VLModel& model, const Vocabulary& vocab,
                                     const PromptTemplate& prompt,
                                     const std::vector<int>& classes) {
  return BuildWith(vocab, classes, [&](const std::string& name) {
    return EncodeText(model, prompt.Render(name));
  });
}

ClassEmbeddings BuildClassEmbeddings(const VLModel& model, const Vocabulary& vocab,
                                     const LearnedPrompt& prompt,
                                     const std::vector<int>& classes) {
  return BuildWith(vocab, classes, [&](const std::string& name) {
    const auto tokens = model.tokenizer.Tokenize(name);
    return EncodeTokens(model.params, tokens, prompt.length() > 0 ? &prompt.tokens : nullptr);
  });
}

namespace {

int ArgmaxRow(const ClassEmbeddings& e, std::span<const double> v) {
  int best = 0;
  double best_s = -1e300;
  for (int r = 0; r < e.size(); ++r) {
    const double s = Dot(v, e.vectors.row(r));
    if (s > best_s) {
      best_s = s;
      best = r;
    }
  }
  return best;
}

}  // namespace

double RegionAccuracy(const VLModel& model, const ClassEmbeddings& embeddings,
                      const std::vector<RegionSample>& samples) {
  if (samples.empty()) Fail(ErrorKind::kInvalidArgument, "no region samples");
  int hits = 0;
  for (const auto& s : samples) {
    const Vec v = EncodeVision(model, s.crop);
    if (embeddings.classes[ArgmaxRow(embeddings, v)] == s.label) ++hits;
  }
  return double(hits) / samples.size();
}

TemplateSelection SelectTemplate(const PromptSet& prompts, const VLModel& model,
                                 const Vocabulary& vocab,
                                 const std::vector<RegionSample>& samples,
                                 const std::vector<int>& seen) {
  if (samples.empty()) Fail(ErrorKind::kInvalidArgument, "template selection needs samples");
  std::vector<Vec> vision;
  for (const auto& s : samples) vision.push_back(EncodeVision(model, s.crop));
  TemplateSelection sel;
  for (int t = 0; t < prompts.size(); ++t) {
    const ClassEmbeddings e = BuildClassEmbeddings(model, vocab, prompts[t], seen);
    int hits = 0;
    for (std::size_t i = 0; i < samples.size(); ++i)
      if (e.classes[ArgmaxRow(e, vision[i])] == samples[i].label) ++hits;
    sel.accuracies.push_back(double(hits) / samples.size());
  }
  for (int t = 1; t < prompts.size(); ++t)
    if (sel.accuracies[t] > sel.accuracies[sel.best]) sel.best = t;
  return sel;
}

double PromptLossAndGrad(const VLModel& model, const Vocabulary& vocab,
                         const LearnedPrompt& prompt, const std::vector<int>& classes,
                         const std::vector<Vec>& vision, const std::vector<int>& labels,
                         LearnedPrompt* grad) {
  const int n = static_cast<int>(vision.size());
  Require(n > 0 && labels.size() == vision.size(), "prompt batch is empty or misaligned");
  const Matrix* prefix = prompt.length() > 0 ? &prompt.tokens : nullptr;
  const int k = static_cast<int>(classes.size());
  std::vector<std::vector<int>> tokens(k);
  std::vector<TextActivations> acts(k);
  for (int c = 0; c < k; ++c) {
    tokens[c] = model.tokenizer.Tokenize(vocab[classes[c]].name);
    EncodeTokens(model.params, tokens[c], prefix, &acts[c]);
  }
  const double scale = model.eval_scale;
  Matrix dtext(k, kEmbedDim);
  double loss = 0.0;
  Vec logits(k), probs;
  for (int i = 0; i < n; ++i) {
    int target = -1;
    for (int c = 0; c < k; ++c) {
      logits[c] = scale * Dot(vision[i], acts[c].embedding);
      if (classes[c] == labels[i]) target = c;
    }
    Require(target >= 0, "prompt sample label outside the trained classes");
    loss += SoftmaxCrossEntropy(logits, target, &probs);
    for (int c = 0; c < k; ++c) {
      const double g = scale * (probs[c] - (c == target)) / n;
      auto row = dtext.row(c);
      for (int d = 0; d < kEmbedDim; ++d) row[d] += g * vision[i][d];
    }
  }
  loss /= n;
  if (grad != nullptr && prefix != nullptr) {
    for (int c = 0; c < k; ++c)
      EncodeTokensBackward(model.params, tokens[c], prefix, acts[c], dtext.row(c),
                           nullptr, &grad->tokens);
  }
  return loss;
}

LearnedPrompt TrainLearnedPrompt(const VLModel& model, const Vocabulary& vocab,
                                 const std::vector<RegionSample>& samples,
                                 const std::vector<int>& seen,
                                 const PromptTrainConfig& config,
                                 std::vector<std::string>* warnings) {
  LearnedPrompt prompt = InitLearnedPrompt(config.length, config.seed);
  if (config.steps <= 0 || config.length == 0) return prompt;
  if (samples.empty()) Fail(ErrorKind::kInvalidArgument, "prompt training needs samples");

  // Per-class subsample, deterministic in the seed.
  SplitMix64 rng(DeriveSeed(config.seed, 11, 0));
  std::map<int, std::vector<int>> by_class;
  for (int i = 0; i < static_cast<int>(samples.size()); ++i)
    if (std::binary_search(seen.begin(), seen.end(), samples[i].label))
      by_class[samples[i].label].push_back(i);
  std::vector<Vec> vision;
  std::vector<int> labels;
  for (auto& [label, idx] : by_class) {
    for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.Below(i)]);
    if (static_cast<int>(idx.size()) < config.samples_per_class && warnings != nullptr)
      warnings->push_back("class " + vocab[label].name + " has only " +
                          std::to_string(idx.size()) + " samples; using all");
    const std::size_t take =
        std::min<std::size_t>(idx.size(), static_cast<std::size_t>(config.samples_per_class));
    for (std::size_t i = 0; i < take; ++i) {
      vision.push_back(EncodeVision(model, samples[idx[i]].crop));
      labels.push_back(label);
    }
  }
  if (vision.empty()) Fail(ErrorKind::kInvalidArgument, "no seen-class prompt samples");

  const int n = static_cast<int>(vision.size());
  const int batch = std::min(config.batch, n);
  SgdMomentum<LearnedPrompt> opt(LearnedPrompt{Matrix(config.length, kTokenDim)},
                                 config.momentum);
  LearnedPrompt grad = prompt;
  std::vector<int> order(n);
  std::vector<Vec> bv(batch);
  std::vector<int> bl(batch);
  for (int step = 0; step < config.steps; ++step) {
    for (int i = 0; i < n; ++i) order[i] = i;
    for (int i = 0; i < batch; ++i) {
      const int j = i + static_cast<int>(rng.Below(static_cast<std::uint64_t>(n - i)));
      std::swap(order[i], order[j]);
      bv[i] = vision[order[i]];
      bl[i] = labels[order[i]];
    }
    SetZero(grad);
    const double loss = PromptLossAndGrad(model, vocab, prompt, seen, bv, bl, &grad);
    if (!std::isfinite(loss))
      Fail(ErrorKind::kNumerical, "prompt training diverged at step " + std::to_string(step));
    opt.Step(prompt, grad, CosineLr(config.lr, step, config.steps));
  }
  return prompt;
}

nlohmann::json LearnedPromptToJson(const LearnedPrompt& prompt) {
  Json j;
  j["length"] = prompt.length();
  j["tokens"] = prompt.length() > 0 ? ToJson(prompt.tokens) : Json::array();
  return j;
}

LearnedPrompt LearnedPromptFromJson(const nlohmann::json& j) {
  LearnedPrompt p;
  const int length = j.at("length").get<int>();
  if (length == 0) {
    p.tokens = Matrix(0, kTokenDim);
    return p;
  }
  p.tokens = MatrixFromJson(j.at("tokens"), "learned prompt");
  if (p.tokens.rows != length || p.tokens.cols != kTokenDim)
    Fail(ErrorKind::kIntegrity, "learned prompt shape mismatch");
  return p;
}

}  // namespace ovseg
