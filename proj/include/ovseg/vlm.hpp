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

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "ovseg/common.hpp"
#include "ovseg/image.hpp"

namespace ovseg {

inline constexpr int kResizeSide = 16;
inline constexpr int kHistBins = 8;
inline constexpr int kVisionInput = kResizeSide * kResizeSide * 3 + 3 * kHistBins;
inline constexpr int kVisionHidden = 64;
inline constexpr int kTokenDim = 32;
inline constexpr int kEmbedDim = 32;

// Lowercased whitespace words; id 0 is reserved for unknown words.
class Tokenizer {
 public:
  Tokenizer() = default;
  // Ids are assigned to the sorted set of distinct words, starting at 1.
  static Tokenizer Build(const std::vector<std::string>& texts);
  static Tokenizer FromWords(std::vector<std::string> words);

  std::vector<int> Tokenize(std::string_view text) const;
  int vocab_size() const { return static_cast<int>(words_.size()) + 1; }
  const std::vector<std::string>& words() const { return words_; }
  int IdOf(std::string_view word) const;

  bool operator==(const Tokenizer&) const = default;

 private:
  std::vector<std::string> words_;  // sorted; word i has id i + 1
};

std::vector<std::string> SplitWords(std::string_view text);

// All trainable tensors of the toy vision-language model. The same struct
// doubles as the gradient container.
struct VlmParams {
  Matrix token_embedding;  // vocab x kTokenDim
  Matrix text_proj;        // kEmbedDim x kTokenDim
  Vec text_bias;           // kEmbedDim
  Matrix w1;               // kVisionHidden x kVisionInput
  Vec b1;                  // kVisionHidden
  Matrix w2;               // kEmbedDim x kVisionHidden
  Vec b2;                  // kEmbedDim
  double log_scale = 0.0;  // pretraining logit scale, stored as log

  static VlmParams Zeros(int vocab_size);
  std::vector<std::span<double>> Tensors();
  std::vector<std::span<const double>> Tensors() const;
  static const std::vector<std::string>& TensorNames();
  bool operator==(const VlmParams&) const = default;
};

struct VLModel {
  Tokenizer tokenizer;
  VlmParams params;
  double eval_scale = 100.0;
  std::uint64_t seed = 0;

  bool operator==(const VLModel&) const = default;
};

inline constexpr double kMinLogitScale = 1.0;
inline constexpr double kMaxLogitScale = 100.0;

// Uniform(-0.05, 0.05) weights from SplitMix64(seed), zero biases,
// logit scale ln(14).
VLModel InitVlm(Tokenizer tokenizer, std::uint64_t seed);

// 16x16 area-resized RGB in [0,1] followed by a per-channel 8-bin histogram.
Vec VisionFeatures(const Image& image);

struct VisionActivations {
  Vec hidden_pre;  // before the rectifier
  Vec hidden;
  Vec embedding;   // normalized
  double norm = 0.0;
};

Vec EncodeVisionFeatures(const VlmParams& params, std::span<const double> feature,
                         VisionActivations* acts = nullptr);
Vec EncodeVision(const VLModel& model, const Image& image);

// Mean of (prefix rows ++ token embeddings) -> projection -> L2 normalize.
// The prefix may have zero rows.
struct TextActivations {
  Vec pooled;
  Vec embedding;
  double norm = 0.0;
};
Vec EncodeTokens(const VlmParams& params, std::span<const int> tokens,
                 const Matrix* prefix = nullptr, TextActivations* acts = nullptr);
Vec EncodeText(const VLModel& model, std::string_view text);

// Backward through EncodeTokens: accumulates into grads (text tensors) and,
// when given, into prefix_grad.
void EncodeTokensBackward(const VlmParams& params, std::span<const int> tokens,
                          const Matrix* prefix, const TextActivations& acts,
                          std::span<const double> grad_embedding, VlmParams* grads,
                          Matrix* prefix_grad);

// Symmetric InfoNCE over a batch of (vision feature, caption tokens) pairs.
// Gradients are accumulated into `grads` when non-null.
double ContrastiveLossAndGrads(const VlmParams& params,
                               const std::vector<Vec>& features,
                               const std::vector<std::vector<int>>& tokens,
                               VlmParams* grads);

struct PretrainConfig {
  int steps = 8000;
  int batch = 16;
  double lr = 0.002;
  double momentum = 0.9;
  std::uint64_t seed = 42;
};

struct PretrainLog {
  double initial_probe_loss = 0.0;
  double final_probe_loss = 0.0;
  std::vector<double> step_losses;
};

VLModel PretrainVlm(Tokenizer tokenizer, const std::vector<Vec>& features,
                    const std::vector<std::string>& captions,
                    const PretrainConfig& config, PretrainLog* log = nullptr);

// Image -> caption top-1 retrieval; a hit is any caption with identical text.
double RetrievalTop1(const VLModel& model, const std::vector<Vec>& features,
                     const std::vector<std::string>& captions);

// p_i = softmax_i(scale * cos(v, t_i)); rows of class_embeddings are unit.
Vec ClassifyEmbedding(std::span<const double> vision_embedding,
                      const Matrix& class_embeddings, double scale);

nlohmann::json VlmToJson(const VLModel& model);
VLModel VlmFromJson(const nlohmann::json& j);

}  // namespace ovseg
