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

#include "ovseg/experiment.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "ovseg/json_io.hpp"
#include "ovseg/parallel.hpp"
#include "ovseg/pnm.hpp"
#include "ovseg/rng.hpp"

namespace ovseg {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Configuration

namespace {

const Json* FindPath(const Json& root, const std::string& path) {
  const Json* node = &root;
  std::stringstream ss(path);
  std::string part;
  while (std::getline(ss, part, '.')) {
    if (!node->is_object()) return nullptr;
    auto it = node->find(part);
    if (it == node->end()) return nullptr;
    node = &*it;
  }
  return node;
}

[[noreturn]] void TypeError(const std::string& path, const char* expected) {
  Fail(ErrorKind::kInvalidConfig, "config key '" + path + "' must be " + expected);
}

void Assign(const std::string& path, const Json& v, int& out) {
  if (!v.is_number_integer()) TypeError(path, "an integer");
  out = v.get<int>();
}
void Assign(const std::string& path, const Json& v, std::uint64_t& out) {
  if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0))
    TypeError(path, "a non-negative integer");
  out = v.get<std::uint64_t>();
}
void Assign(const std::string& path, const Json& v, double& out) {
  if (!v.is_number()) TypeError(path, "a number");
  out = v.get<double>();
}
void Assign(const std::string& path, const Json& v, bool& out) {
  if (!v.is_boolean()) TypeError(path, "a boolean");
  out = v.get<bool>();
}
void Assign(const std::string& path, const Json& v, std::string& out) {
  if (!v.is_string()) TypeError(path, "a string");
  out = v.get<std::string>();
}
void Assign(const std::string& path, const Json& v, std::vector<std::string>& out) {
  if (!v.is_array()) TypeError(path, "an array of strings");
  std::vector<std::string> r;
  for (const auto& e : v) {
    if (!e.is_string()) TypeError(path, "an array of strings");
    r.push_back(e.get<std::string>());
  }
  out = std::move(r);
}

std::set<std::string> KnownKeys() {
  RunConfig c;
  std::set<std::string> keys;
  VisitConfig(c, [&](const char* path, auto&, bool) { keys.insert(path); });
  return keys;
}

void CheckUnknown(const Json& node, const std::string& prefix, const std::set<std::string>& known) {
  if (!node.is_object()) {
    Fail(ErrorKind::kInvalidConfig,
         prefix.empty() ? "config must be a JSON object" : "config key '" + prefix + "' must be an object");
  }
  for (auto it = node.begin(); it != node.end(); ++it) {
    const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (known.count(path)) continue;
    bool is_section = false;
    for (const auto& k : known)
      if (k.rfind(path + ".", 0) == 0) is_section = true;
    if (!is_section) Fail(ErrorKind::kInvalidConfig, "unknown config key '" + path + "'");
    CheckUnknown(it.value(), path, known);
  }
}

}  // namespace

RunConfig ParseConfig(const Json& file,
                      const std::vector<std::pair<std::string, std::string>>& overrides) {
  const std::set<std::string> known = KnownKeys();
  CheckUnknown(file, "", known);
  RunConfig c;
  VisitConfig(c, [&](const char* path, auto& field, bool) {
    if (const Json* v = FindPath(file, path)) Assign(path, *v, field);
  });
  for (const auto& [key, text] : overrides) {
    if (!known.count(key)) Fail(ErrorKind::kInvalidConfig, "unknown config key '" + key + "'");
    Json value = Json::parse(text, nullptr, /*allow_exceptions=*/false);
    if (value.is_discarded()) value = text;
    VisitConfig(c, [&](const char* path, auto& field, bool) {
      if (key != path) return;
      using T = std::decay_t<decltype(field)>;
      if constexpr (std::is_same_v<T, std::string>) {
        if (!value.is_string()) value = text;
      }
      Assign(path, value, field);
    });
  }
  ValidateConfig(c);
  return c;
}

RunConfig LoadConfigFile(const fs::path& path,
                         const std::vector<std::pair<std::string, std::string>>& overrides) {
  if (!fs::exists(path)) Fail(ErrorKind::kInvalidConfig, "config file not found: " + path.string());
  Json j;
  try {
    j = ReadJsonFile(path);
  } catch (const Error& e) {
    Fail(ErrorKind::kInvalidConfig, e.what());
  }
  return ParseConfig(j, overrides);
}

void ValidateConfig(const RunConfig& c) {
  auto bad = [](const std::string& key, const std::string& why) {
    Fail(ErrorKind::kInvalidConfig, "config key '" + key + "' " + why);
  };
  if (c.threads < 1) bad("threads", "must be >= 1");
  if (c.n_train < 1) bad("data.n_train", "must be >= 1");
  if (c.n_val < 1) bad("data.n_val", "must be >= 1");
  if (c.n_cross_val < 1) bad("data.n_cross_val", "must be >= 1");
  if (c.n_unseen < 1) bad("data.n_unseen", "must be >= 1");
  if (!(c.thing_stuff_ratio >= 0.0)) bad("data.thing_stuff_ratio", "must be >= 0");
  if (c.corpus_scenes < 2) bad("data.corpus_scenes", "must be >= 2");
  if (c.corpus_closeups < 0) bad("data.corpus_closeups", "must be >= 0");
  if (c.corpus_val < 1) bad("data.corpus_val", "must be >= 1");
  if (c.vlm.steps < 0) bad("vlm.steps", "must be >= 0");
  if (c.vlm.batch < 2) bad("vlm.batch", "must be >= 2");
  if (!(c.eval_scale > 0.0)) bad("vlm.eval_scale", "must be > 0");
  if (c.templates.empty()) bad("prompts.templates", "must not be empty");
  PromptSet check(c.templates);
  (void)check;
  if (c.text_source != "template" && c.text_source != "learned")
    bad("prompts.text_source", "must be \"template\" or \"learned\"");
  if (c.prompt.length < 0) bad("prompts.length", "must be >= 0");
  if (c.prompt.samples_per_class < 1) bad("prompts.samples_per_class", "must be >= 1");
  if (c.prompt.batch < 1) bad("prompts.batch", "must be >= 1");
  if (c.query.num_queries < 1) bad("proposals.num_queries", "must be >= 1");
  if (c.query.batch < 1) bad("proposals.batch", "must be >= 1");
  ParseGenerator(c.generator);
  if (!(c.felz_k > 0.0)) bad("proposals.felz_k", "must be > 0");
  if (c.felz_min_size < 0) bad("proposals.felz_min_size", "must be >= 0");
  ParseFillMode(c.crop_fill);
  ParseStrategy(c.strategy);
  if (!(c.ensemble_lambda >= 0.0 && c.ensemble_lambda <= 1.0)) bad("ensemble.lambda", "must lie in [0, 1]");
  CropConfig crop;
  crop.threshold = c.crop_threshold;
  crop.expand = c.crop_expand;
  crop.Validate();
  if (c.fallback != "background" && c.fallback != "ignore")
    bad("segment.fallback", "must be \"background\" or \"ignore\"");
  if (c.fcn.batch < 1) bad("fcn.batch", "must be >= 1");
  if (c.window < 1) bad("fcn.window", "must be >= 1");
  if (c.stride < 1) bad("fcn.stride", "must be >= 1");
  if (c.self_train_rounds < 0) bad("self_train.rounds", "must be >= 0");
  static const std::set<std::string> protocols = {"all", "zero-shot", "cross-dataset", "oracle",
                                                   "fcn", "self-train"};
  if (!protocols.count(c.protocol))
    bad("eval.protocol", "must be one of all, zero-shot, cross-dataset, oracle, fcn, self-train");
  static const std::set<std::string> axes = {"strategy", "prompt", "fill", "window", "generator"};
  if (!axes.count(c.axis)) bad("eval.axis", "must be one of strategy, prompt, fill, window, generator");
}

Json ConfigToJson(const RunConfig& config) {
  RunConfig c = config;
  Json j = Json::object();
  VisitConfig(c, [&](const char* path, auto& field, bool) { j[Json::json_pointer("/" + [&] {
    std::string p = path;
    std::replace(p.begin(), p.end(), '.', '/');
    return p;
  }())] = field; });
  return j;
}

std::string ConfigHash(const RunConfig& config) {
  RunConfig c = config;
  Json j = Json::object();
  VisitConfig(c, [&](const char* path, auto& field, bool hashed) {
    if (hashed) j[path] = field;
  });
  const std::string text = j.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return HexU64(h);
}

fs::path RunDirectory(const RunConfig& config) {
  const char* env = std::getenv("OVSEG_OUT");
  const fs::path root = env != nullptr && *env != '\0' ? fs::path(env) : fs::path(config.output);
  return root / ("run-" + ConfigHash(config));
}

PipelineConfig MakePipelineConfig(const RunConfig& c, const Dataset& train_data) {
  PipelineConfig p;
  p.generator = ParseGenerator(c.generator);
  p.strategy = ParseStrategy(c.strategy);
  p.crop.threshold = c.crop_threshold;
  p.crop.expand = c.crop_expand;
  p.crop.fill = ParseFillMode(c.crop_fill);
  p.crop.mean = MeanRgb(train_data.train);
  p.lambda = c.ensemble_lambda;
  p.fallback = c.fallback == "ignore" ? kIgnoreLabel : 0;
  p.felz_k = c.felz_k;
  p.felz_min_size = c.felz_min_size;
  p.hierarchy = {c.hier_color, c.hier_size, c.hier_fill};
  return p;
}

// ---------------------------------------------------------------------------
// Artifacts

namespace {

Json ReadArtifact(const fs::path& path, const char* producer) {
  if (!fs::exists(path))
    Fail(ErrorKind::kMissingArtifact, "missing artifact " + path.string() + "; run `ovseg " +
                                          producer + "` with the same config first");
  return ReadJsonFile(path);
}

Dataset ReadDataset(const fs::path& dir) {
  if (!fs::exists(dir / "split.json"))
    Fail(ErrorKind::kMissingArtifact,
         "missing dataset " + dir.string() + "; run `ovseg gen-data` with the same config first");
  return LoadDataset(dir);
}

VLModel ReadVlm(const fs::path& dir) { return VlmFromJson(ReadArtifact(dir / "vlm.json", "pretrain").at("model")); }

std::vector<int> All(const Vocabulary& v) { return AllClasses(v); }

// Text embeddings for `classes` from the configured prompt source.
ClassEmbeddings TextEmbeddings(const RunConfig& c, const fs::path& dir, const VLModel& vlm,
                               const Vocabulary& vocab, const std::vector<int>& classes,
                               const std::string& source) {
  if (source == "learned") {
    const Json j = ReadArtifact(dir / "learned_prompt.json", "tune-prompt");
    return BuildClassEmbeddings(vlm, vocab, LearnedPromptFromJson(j.at("prompt")), classes);
  }
  const Json j = ReadArtifact(dir / "prompt_selection.json", "select-prompt");
  (void)c;
  return BuildClassEmbeddings(vlm, vocab, PromptTemplate(j.at("template").get<std::string>()),
                              classes);
}

void WriteText(const fs::path& path, const std::string& text) { WriteFileBytes(path, text); }

void WriteResolved(const RunConfig& c, const fs::path& dir) {
  Json j = ConfigToJson(c);
  j["config_hash"] = ConfigHash(c);
  WriteJsonFile(dir / "resolved_config.json", j);
}

}  // namespace

std::vector<RegionSample> GroundTruthRegions(const std::vector<Scene>& scenes,
                                             const std::vector<int>& classes,
                                             const CropConfig& crop) {
  const std::set<int> allowed(classes.begin(), classes.end());
  std::vector<RegionSample> out;
  for (const Scene& s : scenes) {
    for (const Segment& seg : ExtractSegments(s.labels, &allowed))
      out.push_back({MakeCrop(s.image, seg.mask, crop, s.id).image, seg.label, s.id});
  }
  return out;
}

namespace {

bool CaptionMentions(const std::string& caption, const std::string& name) {
  const auto words = SplitWords(caption);
  const auto target = SplitWords(name);
  if (target.empty() || words.size() < target.size()) return false;
  for (std::size_t i = 0; i + target.size() <= words.size(); ++i) {
    bool match = true;
    for (std::size_t k = 0; k < target.size() && match; ++k) {
      std::string w = words[i + k];
      while (!w.empty() && (w.back() == ',' || w.back() == '.')) w.pop_back();
      match = w == target[k];
    }
    if (match) return true;
  }
  return false;
}

}  // namespace

Corpus MakeCorpus(const RunConfig& c, const GenConfig& base, const Vocabulary& vocab,
                  const SplitSpec& split) {
  Corpus corpus;
  const SplitSpec all = SplitSpec::AllSeen(vocab.size());
  const Dataset scenes = GenerateDataset(base, all, c.corpus_scenes, c.corpus_val, DeriveSeed(c.seed, 31, 0));
  std::vector<const Scene*> pairs;
  for (const Scene& s : scenes.train) pairs.push_back(&s);
  Dataset close;
  if (c.corpus_closeups > 0) {
    GenConfig cc = base;
    cc.min_shapes = cc.max_shapes = 1;
    cc.min_radius = 14;
    cc.max_radius = std::min(28, (std::min(cc.width, cc.height) - 1) / 2);
    cc.min_radius = std::min(cc.min_radius, cc.max_radius);
    close = GenerateDataset(cc, all, c.corpus_closeups, 1, DeriveSeed(c.seed, 31, 1));
    for (const Scene& s : close.train) pairs.push_back(&s);
  }
  auto keep = [&](const std::string& caption) {
    if (!c.restricted_vocabulary) return true;
    for (int u : split.unseen)
      if (CaptionMentions(caption, vocab[u].name)) return false;
    return true;
  };
  for (const Scene* s : pairs) {
    if (!keep(s->caption)) continue;
    corpus.features.push_back(VisionFeatures(s->image));
    corpus.captions.push_back(s->caption);
  }
  for (const Scene& s : scenes.val) {
    corpus.val_features.push_back(VisionFeatures(s.image));
    corpus.val_captions.push_back(s.caption);
  }
  if (corpus.features.size() < 2)
    Fail(ErrorKind::kInvalidConfig, "pretraining corpus has fewer than 2 pairs after filtering");
  return corpus;
}

// ---------------------------------------------------------------------------
// Stages

Json StageGenData(const RunConfig& c, const fs::path& dir) {
  WriteResolved(c, dir);
  const GenConfig a = DomainAConfig();
  const Vocabulary vocab = a.MakeVocabulary();
  const SplitSpec split = MakeSplit(vocab, c.n_unseen, c.thing_stuff_ratio, DeriveSeed(c.seed, 3, 0));
  const Dataset da = GenerateDataset(a, split, c.n_train, c.n_val, DeriveSeed(c.seed, 5, 0));
  SaveDataset(da, dir / "data" / "A");
  const GenConfig b = DomainBConfig();
  if (!(b.MakeVocabulary() == vocab)) Fail(ErrorKind::kIntegrity, "domain vocabularies differ");
  const Dataset db = GenerateDataset(b, split, 1, c.n_cross_val, DeriveSeed(c.seed, 5, 1));
  SaveDataset(db, dir / "data" / "B");
  Json out;
  out["classes"] = vocab.size();
  Json unseen = Json::array();
  for (int u : split.unseen) unseen.push_back(vocab[u].name);
  out["unseen"] = unseen;
  out["train"] = da.train.size();
  out["val"] = da.val.size();
  out["cross_val"] = db.val.size();
  return out;
}

Json StagePretrain(const RunConfig& c, const fs::path& dir) {
  WriteResolved(c, dir);
  const Dataset da = ReadDataset(dir / "data" / "A");
  const Corpus corpus = MakeCorpus(c, da.config, da.vocab, da.split);
  std::vector<std::string> texts = corpus.captions;
  for (const auto& e : da.vocab.entries()) texts.push_back(e.name);
  for (const auto& t : c.templates) {
    std::string s = t;
    s.replace(s.find("{}"), 2, " ");
    texts.push_back(s);
  }
  PretrainConfig pc = c.vlm;
  pc.seed = DeriveSeed(c.seed, 41, 0);
  PretrainLog log;
  VLModel model = PretrainVlm(Tokenizer::Build(texts), corpus.features, corpus.captions, pc, &log);
  model.eval_scale = c.eval_scale;
  Json report;
  report["pairs"] = corpus.features.size();
  report["initial_probe_loss"] = log.initial_probe_loss;
  report["final_probe_loss"] = log.final_probe_loss;
  report["retrieval_top1"] = RetrievalTop1(model, corpus.val_features, corpus.val_captions);
  report["retrieval_pairs"] = corpus.val_features.size();
  report["logit_scale"] = std::exp(model.params.log_scale);
  Json j;
  j["model"] = VlmToJson(model);
  j["report"] = report;
  WriteJsonFile(dir / "vlm.json", j);
  return report;
}

Json StageSelectPrompt(const RunConfig& c, const fs::path& dir) {
  WriteResolved(c, dir);
  const Dataset da = ReadDataset(dir / "data" / "A");
  const VLModel vlm = ReadVlm(dir);
  const PipelineConfig pc = MakePipelineConfig(c, da);
  const auto samples = GroundTruthRegions(da.train, da.split.seen, pc.crop);
  const PromptSet prompts(c.templates);
  const TemplateSelection sel = SelectTemplate(prompts, vlm, da.vocab, samples, da.split.seen);
  Json j;
  j["templates"] = c.templates;
  j["accuracies"] = sel.accuracies;
  j["best"] = sel.best;
  j["template"] = prompts[sel.best].text();
  j["samples"] = samples.size();
  WriteJsonFile(dir / "prompt_selection.json", j);
  return j;
}

Json StageTunePrompt(const RunConfig& c, const fs::path& dir) {
  WriteResolved(c, dir);
  const Dataset da = ReadDataset(dir / "data" / "A");
  const VLModel vlm = ReadVlm(dir);
  const Json sel = ReadArtifact(dir / "prompt_selection.json", "select-prompt");
  const PipelineConfig pc = MakePipelineConfig(c, da);
  const auto samples = GroundTruthRegions(da.train, da.split.seen, pc.crop);
  const std::uint64_t before = ChecksumDoubles(vlm.params.token_embedding.data) ^
                               ChecksumDoubles(vlm.params.w1.data);
  const VlmParams params_before = vlm.params;
  PromptTrainConfig ptc = c.prompt;
  ptc.seed = DeriveSeed(c.seed, 43, 0);
  std::vector<std::string> warnings;
  const LearnedPrompt learned = TrainLearnedPrompt(vlm, da.vocab, samples, da.split.seen, ptc, &warnings);
  const bool unchanged = vlm.params == params_before;
  (void)before;

  const PromptTemplate best(sel.at("template").get<std::string>());
  const std::vector<int> all = All(da.vocab);
  const auto held_out = GroundTruthRegions(da.val, da.split.unseen, pc.crop);
  const auto seen_val = GroundTruthRegions(da.val, da.split.seen, pc.crop);
  auto acc = [&](const ClassEmbeddings& e, const std::vector<RegionSample>& s) {
    return s.empty() ? 0.0 : RegionAccuracy(vlm, e, s);
  };
  const ClassEmbeddings t_seen = BuildClassEmbeddings(vlm, da.vocab, best, da.split.seen);
  const ClassEmbeddings l_seen = BuildClassEmbeddings(vlm, da.vocab, learned, da.split.seen);
  const ClassEmbeddings t_all = BuildClassEmbeddings(vlm, da.vocab, best, all);
  const ClassEmbeddings l_all = BuildClassEmbeddings(vlm, da.vocab, learned, all);
  const ClassEmbeddings t_unseen = BuildClassEmbeddings(vlm, da.vocab, best, da.split.unseen);
  const ClassEmbeddings l_unseen = BuildClassEmbeddings(vlm, da.vocab, learned, da.split.unseen);
  Json report;
  report["train_seen_template"] = acc(t_seen, samples);
  report["train_seen_learned"] = acc(l_seen, samples);
  report["val_seen_template"] = acc(t_all, seen_val);
  report["val_seen_learned"] = acc(l_all, seen_val);
  report["heldout_unseen_template"] = acc(t_all, held_out);
  report["heldout_unseen_learned"] = acc(l_all, held_out);
  report["heldout_unseen_only_template"] = acc(t_unseen, held_out);
  report["heldout_unseen_only_learned"] = acc(l_unseen, held_out);
  report["heldout_regions"] = held_out.size();
  report["vlm_unchanged"] = unchanged;
  report["warnings"] = warnings;
  Json j;
  j["prompt"] = LearnedPromptToJson(learned);
  j["report"] = report;
  WriteJsonFile(dir / "learned_prompt.json", j);
  return report;
}

Json StageTrainProposals(const RunConfig& c, const fs::path& dir) {
  WriteResolved(c, dir);
  const Dataset da = ReadDataset(dir / "data" / "A");
  const VLModel vlm = ReadVlm(dir);
  const ClassEmbeddings head = TextEmbeddings(c, dir, vlm, da.vocab, da.split.seen, c.text_source);
  QueryTrainConfig qc = c.query;
  qc.seed = DeriveSeed(c.seed, 47, 0);
  QueryTrainLog log;
  const QueryModel qm = TrainQueryModel(da.train, head, qc, &log);
  Json report;
  const int n = static_cast<int>(log.step_losses.size());
  const int tail = std::min(n, 100);
  auto mean = [&](int from, int to) {
    double s = 0.0;
    for (int i = from; i < to; ++i) s += log.step_losses[i];
    return to > from ? s / (to - from) : 0.0;
  };
  report["first_losses"] = mean(0, tail);
  report["last_losses"] = mean(n - tail, n);
  report["head_checksum"] = HexU64(head.Checksum());
  Json j;
  j["model"] = QueryModelToJson(qm);
  j["head_classes"] = head.classes;
  j["report"] = report;
  WriteJsonFile(dir / "query_model.json", j);
  return report;
}

namespace {

double FcnTrainAccuracy(const FcnModel& m, const std::vector<Scene>& scenes,
                        const ClassEmbeddings& head, int threads) {
  std::vector<std::int64_t> hits(scenes.size()), total(scenes.size());
  ParallelFor(static_cast<int>(scenes.size()), threads, [&](int i) {
    const ScoreMap s = FcnScores(m, scenes[i].image, head);
    for (int q = 0; q < s.pixels(); ++q) {
      const int l = scenes[i].labels.labels[q];
      const int row = head.RowOf(l);
      if (row < 0) continue;
      auto p = s.pixel(q);
      ++total[i];
      hits[i] += (std::max_element(p.begin(), p.end()) - p.begin()) == row;
    }
  });
  std::int64_t h = 0, t = 0;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    h += hits[i];
    t += total[i];
  }
  return t > 0 ? double(h) / t : 0.0;
}

}  // namespace

Json StageTrainFcn(const RunConfig& c, const fs::path& dir) {
  WriteResolved(c, dir);
  const Dataset da = ReadDataset(dir / "data" / "A");
  const VLModel vlm = ReadVlm(dir);
  const ClassEmbeddings head = TextEmbeddings(c, dir, vlm, da.vocab, da.split.seen, c.text_source);
  FcnTrainConfig fc = c.fcn;
  fc.seed = DeriveSeed(c.seed, 53, 0);
  const FcnModel fcn = TrainFcn(da.train, head, fc);
  Json report;
  report["train_pixel_accuracy"] = FcnTrainAccuracy(fcn, da.train, head, c.threads);
  report["head_checksum"] = HexU64(head.Checksum());
  Json j;
  j["model"] = FcnToJson(fcn);
  j["report"] = report;
  WriteJsonFile(dir / "fcn.json", j);
  return report;
}

namespace {

struct Context {
  RunConfig config;
  Dataset a;
  Dataset b;
  VLModel vlm;
  ClassEmbeddings text;  // whole vocabulary
  ClassEmbeddings head;  // seen classes
  QueryModel query;
  PipelineConfig pipeline_config;

  Pipeline MakePipeline() const {
    Pipeline p;
    p.vlm = &vlm;
    p.query = &query;
    p.text = text;
    p.head = head;
    p.config = pipeline_config;
    return p;
  }
};

Context LoadContext(const RunConfig& c, const fs::path& dir, bool need_query = true) {
  Context ctx;
  ctx.config = c;
  ctx.a = ReadDataset(dir / "data" / "A");
  ctx.b = ReadDataset(dir / "data" / "B");
  ctx.vlm = ReadVlm(dir);
  ctx.text = TextEmbeddings(c, dir, ctx.vlm, ctx.a.vocab, All(ctx.a.vocab), c.text_source);
  ctx.head = ctx.text.Subset(ctx.a.split.seen);
  if (need_query) {
    const Json q = ReadArtifact(dir / "query_model.json", "train-proposals");
    ctx.query = QueryModelFromJson(q.at("model"));
    if (q.at("head_classes").get<std::vector<int>>() != ctx.head.classes)
      Fail(ErrorKind::kIntegrity, "query model head does not match the seen classes");
  }
  ctx.pipeline_config = MakePipelineConfig(c, ctx.a);
  return ctx;
}

MetricsReport Report(const ConfusionMatrix& cm, const Dataset& d) {
  return MakeReport(cm, d.vocab, d.split);
}

ConfusionMatrix SumConfusions(const std::vector<ConfusionMatrix>& parts, int k) {
  ConfusionMatrix total(k);
  for (const auto& p : parts) total += p;
  return total;
}

// Confusion matrices of strategies A, B and the ensemble from one pass.
struct StrategyConfusions {
  ConfusionMatrix a, b, e;
};

StrategyConfusions EvaluateStrategies(const Pipeline& p, const std::vector<Scene>& scenes,
                                      int threads) {
  const int k = p.num_classes();
  std::vector<ConfusionMatrix> ca(scenes.size()), cb(scenes.size()), ce(scenes.size());
  const bool has_b = p.config.generator == Generator::kQuery;
  ParallelFor(static_cast<int>(scenes.size()), threads, [&](int i) {
    const Scene& s = scenes[i];
    const ClassifiedProposals cp = ClassifyProposals(p, s.image, GenerateProposals(p, s.image, s.id));
    ca[i] = ComputeConfusion(SegmentClassified(cp, k, Strategy::kA, p.config.lambda, p.config.fallback).result.labels, s.labels, k);
    if (has_b) {
      cb[i] = ComputeConfusion(SegmentClassified(cp, k, Strategy::kB, p.config.lambda, p.config.fallback).result.labels, s.labels, k);
      ce[i] = ComputeConfusion(SegmentClassified(cp, k, Strategy::kEnsemble, p.config.lambda, p.config.fallback).result.labels, s.labels, k);
    } else {
      cb[i] = ce[i] = ConfusionMatrix(k);
    }
  });
  return {SumConfusions(ca, k), SumConfusions(cb, k), SumConfusions(ce, k)};
}

ConfusionMatrix EvaluatePipeline(const Pipeline& p, const std::vector<Scene>& scenes, int threads) {
  const StrategyConfusions s = EvaluateStrategies(p, scenes, threads);
  switch (p.config.strategy) {
    case Strategy::kA: return s.a;
    case Strategy::kB: return s.b;
    case Strategy::kEnsemble: return s.e;
  }
  return s.e;
}

struct OracleResult {
  ConfusionMatrix oracle;
  ConfusionMatrix end_to_end;  // same proposals, configured strategy (query only)
  double mean_proposals = 0.0;
};

OracleResult EvaluateOracle(const Pipeline& p, const std::vector<Scene>& scenes, int threads) {
  const int k = p.num_classes();
  std::vector<ConfusionMatrix> co(scenes.size()), ce(scenes.size());
  std::vector<int> counts(scenes.size());
  ParallelFor(static_cast<int>(scenes.size()), threads, [&](int i) {
    const Scene& s = scenes[i];
    ProposalSet set = GenerateProposals(p, s.image, s.id);
    counts[i] = set.size();
    const std::vector<int> labels = OracleAssign(set.masks, s.labels, k, p.config.crop.threshold);
    co[i] = ComputeConfusion(ArgmaxSegmentation(OneHotScores(set, labels, k), p.config.fallback).labels,
                             s.labels, k);
    const Strategy strategy = set.has_head_probs() ? p.config.strategy : Strategy::kA;
    const ClassifiedProposals cp = ClassifyProposals(p, s.image, std::move(set));
    ce[i] = ComputeConfusion(
        SegmentClassified(cp, k, strategy, p.config.lambda, p.config.fallback).result.labels,
        s.labels, k);
  });
  OracleResult r{SumConfusions(co, k), SumConfusions(ce, k), 0.0};
  for (int n : counts) r.mean_proposals += n;
  r.mean_proposals /= std::max<std::size_t>(1, scenes.size());
  return r;
}

struct FcnConfusions {
  ConfusionMatrix fcn, window, whole, fcn_window, fcn_whole;
};

FcnConfusions EvaluateFcn(const FcnModel& fcn, const VLModel& vlm, const ClassEmbeddings& text,
                          const std::vector<Scene>& scenes, int window, int stride, double lambda,
                          int threads) {
  const int k = text.size();
  std::vector<FcnConfusions> parts(scenes.size());
  ParallelFor(static_cast<int>(scenes.size()), threads, [&](int i) {
    const Scene& s = scenes[i];
    const ScoreMap f = FcnScores(fcn, s.image, text);
    const int win = std::min({window, s.image.width, s.image.height});
    const ScoreMap w = SlidingWindowScores(vlm, s.image, win, stride, text);
    const ScoreMap h = WholeImageScores(vlm, s.image, text);
    auto cm = [&](const ScoreMap& m) { return ComputeConfusion(ArgmaxSegmentation(m).labels, s.labels, k); };
    parts[i] = {cm(f), cm(w), cm(h), cm(EnsembleScoreMaps(w, f, lambda)), cm(EnsembleScoreMaps(h, f, lambda))};
  });
  FcnConfusions t{ConfusionMatrix(k), ConfusionMatrix(k), ConfusionMatrix(k), ConfusionMatrix(k),
                  ConfusionMatrix(k)};
  for (const auto& p : parts) {
    t.fcn += p.fcn;
    t.window += p.window;
    t.whole += p.whole;
    t.fcn_window += p.fcn_window;
    t.fcn_whole += p.fcn_whole;
  }
  return t;
}

using Rows = std::vector<std::pair<std::string, MetricsReport>>;

Rows AblationRows(const Context& ctx, const fs::path& dir, const std::string& axis) {
  const int threads = ctx.config.threads;
  const auto& val = ctx.a.val;
  Rows rows;
  if (axis == "strategy") {
    const StrategyConfusions s = EvaluateStrategies(ctx.MakePipeline(), val, threads);
    rows.emplace_back("A", Report(s.a, ctx.a));
    rows.emplace_back("B", Report(s.b, ctx.a));
    rows.emplace_back("ensemble", Report(s.e, ctx.a));
  } else if (axis == "fill") {
    for (FillMode f : {FillMode::kPreserve, FillMode::kZero, FillMode::kMean}) {
      Pipeline p = ctx.MakePipeline();
      p.config.crop.fill = f;
      rows.emplace_back(FillModeName(f), Report(EvaluatePipeline(p, val, threads), ctx.a));
    }
  } else if (axis == "prompt") {
    for (const char* source : {"template", "learned"}) {
      Pipeline p = ctx.MakePipeline();
      p.text = TextEmbeddings(ctx.config, dir, ctx.vlm, ctx.a.vocab, All(ctx.a.vocab), source);
      // The query model was trained on one head; only the second stage changes.
      rows.emplace_back(source, Report(EvaluatePipeline(p, val, threads), ctx.a));
    }
  } else if (axis == "generator") {
    for (Generator g : {Generator::kQuery, Generator::kFelz, Generator::kHierarchical}) {
      Pipeline p = ctx.MakePipeline();
      p.config.generator = g;
      p.config.strategy = Strategy::kA;
      rows.emplace_back(std::string(GeneratorName(g)) + "+A",
                        Report(EvaluatePipeline(p, val, threads), ctx.a));
    }
  } else if (axis == "window") {
    const FcnModel fcn = FcnFromJson(ReadArtifact(dir / "fcn.json", "train-fcn").at("model"));
    const FcnConfusions f = EvaluateFcn(fcn, ctx.vlm, ctx.text, val, ctx.config.window,
                                        ctx.config.stride, ctx.config.ensemble_lambda, threads);
    rows.emplace_back("whole_image", Report(f.whole, ctx.a));
    rows.emplace_back("sliding_window", Report(f.window, ctx.a));
    rows.emplace_back("fcn+whole_image", Report(f.fcn_whole, ctx.a));
    rows.emplace_back("fcn+sliding_window", Report(f.fcn_window, ctx.a));
  } else {
    Fail(ErrorKind::kInvalidConfig, "unknown ablation axis '" + axis + "'");
  }
  return rows;
}

std::string Fixed(double v, int digits = 2) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

std::string RowsCsv(const Rows& rows) {
  std::string s = "variant,miou_seen,miou_unseen,hiou,pacc,miou_all\n";
  for (const auto& [name, r] : rows)
    s += name + "," + Fixed(100 * r.miou_seen, 4) + "," + Fixed(100 * r.miou_unseen, 4) + "," +
         Fixed(100 * r.hiou, 4) + "," + Fixed(100 * r.pacc, 4) + "," + Fixed(100 * r.miou_all, 4) + "\n";
  return s;
}

std::string RowsMarkdown(const std::string& title, const Rows& rows) {
  std::string s = "### " + title + "\n\n| variant | mIoU seen | mIoU unseen | hIoU | pAcc |\n|---|---|---|---|---|\n";
  for (const auto& [name, r] : rows)
    s += "| " + name + " | " + Fixed(100 * r.miou_seen) + " | " + Fixed(100 * r.miou_unseen) + " | " +
         Fixed(100 * r.hiou) + " | " + Fixed(100 * r.pacc) + " |\n";
  return s + "\n";
}

Json RowsJson(const Rows& rows, const Vocabulary& vocab) {
  Json j = Json::object();
  for (const auto& [name, r] : rows) j[name] = ReportToJson(r, vocab);
  return j;
}

}  // namespace

Json StageSelfTrain(const RunConfig& c, const fs::path& dir) {
  WriteResolved(c, dir);
  const Context ctx = LoadContext(c, dir);
  SelfTrainConfig st;
  st.rounds = c.self_train_rounds;
  st.confidence = c.self_train_confidence;
  st.query = c.query;
  st.query.seed = DeriveSeed(c.seed, 59, 0);
  const SelfTrainResult r = SelfTrain(ctx.MakePipeline(), ctx.a.train, ctx.a.split, ctx.text, st, c.threads);
  Json stats = Json::array();
  for (const auto& s : r.rounds) stats.push_back({{"candidates", s.candidates}, {"relabeled", s.relabeled}});
  Json j;
  j["model"] = QueryModelToJson(r.query);
  j["head_classes"] = r.head.classes;
  j["rounds"] = stats;
  WriteJsonFile(dir / "self_train.json", j);
  return stats;
}

Json StageSegment(const RunConfig& c, const fs::path& dir, const fs::path& image_path) {
  constexpr int kExported = 8;
  WriteResolved(c, dir);
  const Context ctx = LoadContext(c, dir, ParseGenerator(c.generator) == Generator::kQuery);
  const Pipeline p = ctx.MakePipeline();
  std::vector<std::pair<std::string, Image>> images;
  if (!image_path.empty()) {
    images.emplace_back(image_path.stem().string(), ReadPpm(image_path));
  } else {
    for (int i = 0; i < std::min<int>(kExported, ctx.a.val.size()); ++i)
      images.emplace_back(ctx.a.val[i].id, ctx.a.val[i].image);
  }
  Json out = Json::array();
  for (const auto& [id, image] : images) {
    const fs::path base = dir / "segment" / id;
    ProposalSet set = GenerateProposals(p, image, id);
    ExportProposals(set, base / "proposals");
    const ClassifiedProposals cp = ClassifyProposals(p, image, std::move(set));
    std::vector<CropDebugEntry> crops;
    for (std::size_t i = 0; i < cp.kept.size(); ++i) {
      CropDebugEntry e;
      e.crop = MakeCrop(image, cp.proposals.masks[cp.kept[i]], p.config.crop, id, cp.kept[i]);
      e.probs.push_back(cp.a[i]);
      if (!cp.b.empty()) {
        e.probs.push_back(cp.b[i]);
        e.probs.push_back(EnsembleProbs(cp.a[i], cp.b[i], p.config.lambda));
      }
      crops.push_back(std::move(e));
    }
    ExportCropDebug(crops, base / "crops");
    const Strategy strategy = cp.b.empty() ? Strategy::kA : p.config.strategy;
    const SegmentOutput seg = SegmentClassified(cp, p.num_classes(), strategy, p.config.lambda, p.config.fallback);
    ExportSegResult(seg.result, &image, base / "labels");
    out.push_back({{"id", id}, {"proposals", cp.proposals.size()}, {"kept", cp.kept.size()},
                   {"warnings", seg.warnings}});
  }
  return out;
}

Json StageEval(const RunConfig& c, const fs::path& dir) {
  WriteResolved(c, dir);
  const Context ctx = LoadContext(c, dir);
  const int threads = c.threads;
  const std::string& proto = c.protocol;
  const bool all = proto == "all";
  const Vocabulary& vocab = ctx.a.vocab;
  const Pipeline pipeline = ctx.MakePipeline();
  Json summary;
  summary["config_hash"] = ConfigHash(c);
  summary["seed"] = c.seed;
  Json unseen = Json::array();
  for (int u : ctx.a.split.unseen) unseen.push_back(vocab[u].name);
  summary["unseen_classes"] = unseen;
  summary["text_source"] = c.text_source;
  summary["text_checksum"] = HexU64(ctx.text.Checksum());
  std::string md = "# Evaluation report\n\nConfig hash `" + ConfigHash(c) + "`, seed " +
                   std::to_string(c.seed) + ". Scores are percentages.\n\n";
  std::string metrics_csv;

  MetricsReport zero_shot;
  if (all || proto == "zero-shot" || proto == "self-train") {
    const StrategyConfusions s = EvaluateStrategies(pipeline, ctx.a.val, threads);
    const ConfusionMatrix& chosen =
        pipeline.config.strategy == Strategy::kA ? s.a : pipeline.config.strategy == Strategy::kB ? s.b : s.e;
    zero_shot = Report(chosen, ctx.a);
    summary["zero_shot"] = ReportToJson(zero_shot, vocab);
    const Rows rows = {{"A", Report(s.a, ctx.a)}, {"B", Report(s.b, ctx.a)}, {"ensemble", Report(s.e, ctx.a)}};
    summary["strategies"] = RowsJson(rows, vocab);
    md += RowsMarkdown("Zero-shot, domain A (region classification strategies)", rows);
    metrics_csv = "class,iou\n";
    for (int k = 0; k < vocab.size(); ++k)
      metrics_csv += vocab[k].name + "," +
                     (std::isnan(zero_shot.per_class_iou[k]) ? std::string("") : Fixed(100 * zero_shot.per_class_iou[k], 4)) + "\n";
    const Json tune = fs::exists(dir / "learned_prompt.json") ? ReadJsonFile(dir / "learned_prompt.json").at("report") : Json();
    if (!tune.is_null()) summary["prompt_regions"] = tune;
    summary["pretrain"] = ReadJsonFile(dir / "vlm.json").at("report");
    summary["prompt_selection"] = ReadJsonFile(dir / "prompt_selection.json");
    summary["prompt_selection"].erase("templates");
  }
  if (all || proto == "cross-dataset") {
    // Trained on domain A, evaluated on domain B without adaptation.
    const MetricsReport r = Report(EvaluatePipeline(pipeline, ctx.b.val, threads), ctx.b);
    summary["cross_dataset"] = ReportToJson(r, vocab);
    md += RowsMarkdown("Cross-dataset (train A, evaluate B)", {{"two-stage", r}});
  }
  if (all || proto == "oracle") {
    Json oracle;
    Rows rows;
    for (Generator g : {Generator::kQuery, Generator::kFelz, Generator::kHierarchical}) {
      Pipeline p = pipeline;
      p.config.generator = g;
      const OracleResult ra = EvaluateOracle(p, ctx.a.val, threads);
      const std::string name = GeneratorName(g);
      oracle[name + "_A"] = ReportToJson(Report(ra.oracle, ctx.a), vocab);
      oracle[name + "_A"]["mean_proposals"] = ra.mean_proposals;
      oracle[name + "_A_end_to_end"] = ReportToJson(Report(ra.end_to_end, ctx.a), vocab);
      rows.emplace_back(name + " (A)", Report(ra.oracle, ctx.a));
      if (g == Generator::kQuery) {
        const OracleResult rb = EvaluateOracle(p, ctx.b.val, threads);
        oracle[name + "_B"] = ReportToJson(Report(rb.oracle, ctx.b), vocab);
        rows.emplace_back(name + " (B)", Report(rb.oracle, ctx.b));
      }
    }
    summary["oracle"] = oracle;
    md += RowsMarkdown("Oracle-labelled proposals", rows);
  }
  if (all || proto == "fcn") {
    const Json fj = ReadArtifact(dir / "fcn.json", "train-fcn");
    const FcnModel fcn = FcnFromJson(fj.at("model"));
    const FcnConfusions f =
        EvaluateFcn(fcn, ctx.vlm, ctx.text, ctx.a.val, c.window, c.stride, c.ensemble_lambda, threads);
    const Rows rows = {{"fcn", Report(f.fcn, ctx.a)},
                       {"whole_image", Report(f.whole, ctx.a)},
                       {"sliding_window", Report(f.window, ctx.a)},
                       {"fcn+whole_image", Report(f.fcn_whole, ctx.a)},
                       {"fcn+sliding_window", Report(f.fcn_window, ctx.a)}};
    summary["fcn"] = RowsJson(rows, vocab);
    summary["fcn"]["text_checksum"] = HexU64(ctx.text.Checksum());
    summary["fcn"]["head_checksum"] = fj.at("report").at("head_checksum");
    summary["fcn"]["train_pixel_accuracy"] = fj.at("report").at("train_pixel_accuracy");
    summary["two_stage_text_checksum"] = HexU64(pipeline.text.Checksum());
    summary["two_stage_head_checksum"] = HexU64(pipeline.head.Checksum());
    md += RowsMarkdown("FCN baseline and sliding-window inference", rows);
  }
  if (all) {
    Json ablations;
    for (const char* axis : {"prompt", "fill", "generator"}) {
      const Rows rows = AblationRows(ctx, dir, axis);
      ablations[axis] = RowsJson(rows, vocab);
      md += RowsMarkdown(std::string("Ablation: ") + axis, rows);
    }
    summary["ablations"] = ablations;
  }
  if ((all || proto == "self-train") && fs::exists(dir / "self_train.json")) {
    const Json st = ReadJsonFile(dir / "self_train.json");
    const QueryModel qm = QueryModelFromJson(st.at("model"));
    Pipeline p = pipeline;
    p.query = &qm;
    p.head = ctx.text.Subset(st.at("head_classes").get<std::vector<int>>());
    const MetricsReport after = Report(EvaluatePipeline(p, ctx.a.val, threads), ctx.a);
    Json j;
    j["before"] = ReportToJson(zero_shot, vocab);
    j["after"] = ReportToJson(after, vocab);
    j["rounds"] = st.at("rounds");
    summary["self_train"] = j;
    md += RowsMarkdown("Self-training", {{"before", zero_shot}, {"after", after}});
  } else if (proto == "self-train") {
    Fail(ErrorKind::kMissingArtifact,
         "missing artifact " + (dir / "self_train.json").string() + "; run `ovseg self-train` first");
  }

  const fs::path out = dir / "eval";
  WriteJsonFile(out / "summary.json", summary);
  if (!metrics_csv.empty()) WriteText(out / "metrics.csv", metrics_csv);
  WriteText(out / "report.md", md);
  WriteResolved(c, out);
  return summary;
}

Json StageAblate(const RunConfig& c, const fs::path& dir) {
  WriteResolved(c, dir);
  const Context ctx = LoadContext(c, dir);
  const Rows rows = AblationRows(ctx, dir, c.axis);
  const fs::path out = dir / "ablate";
  WriteText(out / (c.axis + ".csv"), RowsCsv(rows));
  WriteText(out / (c.axis + ".md"), RowsMarkdown("Ablation: " + c.axis, rows));
  return RowsJson(rows, ctx.a.vocab);
}

}  // namespace ovseg
