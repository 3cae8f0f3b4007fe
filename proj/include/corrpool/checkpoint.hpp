// corrpool/checkpoint.hpp


// Copyright 2026  The corrpool Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// THIS CODE IS PROVIDED *AS IS* BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
// KIND, EITHER EXPRESS OR IMPLIED, INCLUDING WITHOUT LIMITATION ANY IMPLIED
// WARRANTIES OR CONDITIONS OF TITLE, FITNESS FOR A PARTICULAR PURPOSE,
// MERCHANTABLITY OR NON-INFRINGEMENT.
// See the Apache 2 License for the specific language governing permissions and
// limitations under the License.


// Training checkpoints and the embedding store.
//
// A checkpoint is a directory:
//   tensors.bin   CPT1 records, concatenated in manifest order
//   manifest.txt  one "name dtype shape" line per record, e.g.
//                 "backbone.stem.kernel f32 3x3x1x8"
//   state.json    step, learning-rate state, margin index, RNG and sampler
//                 state, log history and the model-defining config.
// Momentum buffers are stored as "velocity/<name>". Batch-norm statistics
// that were never recorded are stored with shape [0].

#pragma once

#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "corrpool/config.hpp"
#include "corrpool/serialize.hpp"
#include "corrpool/trainer.hpp"

namespace corrpool {

inline constexpr const char* kCheckpointFormat = "corrpool-checkpoint-1";

template <Real T>
struct Checkpoint {
  TrainState<T> state;
  std::vector<std::string> speakers;
};

namespace detail {

inline std::string dtype_name(DType d) { return d == DType::kF32 ? "f32" : "f64"; }

inline std::string shape_token(const Shape& s) {
  if (s.empty()) return "scalar";
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out;
}

inline nlohmann::json finite_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(); }

inline double from_finite_or_null(const nlohmann::json& j) {
  return j.is_null() ? std::numeric_limits<double>::infinity() : j.get<double>();
}

/// Named tensors of a training state in checkpoint order.
template <typename S, typename F>
void visit_state_tensors(S& s, F&& f) {
  visit_model(s.model, [&](const std::string& name, auto& t, bool) { f(name, t); });
  std::size_t i = 0;
  visit_model(s.model, [&](const std::string& name, auto&, bool learnable) {
    if (learnable) f("velocity/" + name, s.opt.velocity.at(i++));
  });
}

}  // namespace detail

template <Real T>
void save_checkpoint(const std::filesystem::path& dir, const TrainState<T>& s, const std::vector<std::string>& speakers,
                     const TrainConfig& train, const AamConfig& aam) {
  namespace fs = std::filesystem;
  const fs::path tmp = dir.string() + ".tmp";
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  {
    std::ofstream bin(tmp / "tensors.bin", std::ios::binary);
    std::ofstream man(tmp / "manifest.txt");
    if (!bin || !man) throw IoError("cannot write checkpoint in " + tmp.string());
    detail::visit_state_tensors(s, [&](const std::string& name, const Tensor<T>& t) {
      const Tensor<T> stored = t.size() == 0 ? Tensor<T>(Shape{0}) : t;
      write_tensor(bin, stored);
      man << name << ' ' << detail::dtype_name(dtype_of<T>()) << ' ' << detail::shape_token(stored.shape()) << '\n';
    });
    if (!bin || !man) throw IoError("failed writing checkpoint tensors");
  }
  std::ostringstream rng;
  rng << s.rng;
  nlohmann::json log = nlohmann::json::array();
  for (const auto& e : s.log)
    log.push_back({{"step", e.step}, {"lr", e.lr}, {"margin", e.margin}, {"train_loss", e.train_loss},
                   {"heldout_loss", detail::finite_or_null(e.heldout_loss)}});
  nlohmann::json j = {
      {"format", kCheckpointFormat},
      {"precision", detail::dtype_name(dtype_of<T>())},
      {"step", s.step},
      {"margin_index", s.margin_index},
      {"lr", {{"lr", s.lr.lr}, {"best_loss", detail::finite_or_null(s.lr.best_loss)},
              {"window_start", s.lr.window_start}, {"halvings", s.lr.halvings}}},
      {"rng", rng.str()},
      {"sampler", {{"order", s.order}, {"cursor", s.cursor}}},
      {"train_loss_sum", s.train_loss_sum},
      {"train_loss_count", s.train_loss_count},
      {"log", log},
      {"speakers", speakers},
      {"resnet", to_json(s.model.resnet)},
      {"pooling", to_json(s.model.pooling)},
      {"train", to_json(train)},
      {"aam", to_json(aam)}};
  {
    std::ofstream js(tmp / "state.json");
    js << j.dump(2) << '\n';
    if (!js) throw IoError("failed writing checkpoint state");
  }
  fs::remove_all(dir);
  fs::rename(tmp, dir);
}

/// Loads a checkpoint into precision T. Tensors saved in the other
/// precision are converted, so only same-precision loads resume bit-exactly.
template <Real T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream js(dir / "state.json");
  if (!js) throw IoError("no checkpoint at " + dir.string() + " (missing state.json)");
  Checkpoint<T> c;
  try {
    const auto j = nlohmann::json::parse(js);
    if (j.at("format") != kCheckpointFormat) throw ConfigError("unsupported checkpoint format in " + dir.string());
    ResNetConfig resnet;
    bool desk = false;
    read_resnet(detail::JsonSection(j.at("resnet"), "resnet"), resnet, desk);
    PoolingConfig pooling;
    read_pooling(detail::JsonSection(j.at("pooling"), "pooling"), pooling);
    c.speakers = j.at("speakers").get<std::vector<std::string>>();
    auto& s = c.state;
    s.model = init_model<T>(resnet, pooling, c.speakers.size(), 0);
    s.opt = init_opt_state(s.model);
    s.step = j.at("step");
    s.margin_index = j.at("margin_index");
    s.lr.lr = j.at("lr").at("lr");
    s.lr.best_loss = detail::from_finite_or_null(j.at("lr").at("best_loss"));
    s.lr.window_start = j.at("lr").at("window_start");
    s.lr.halvings = j.at("lr").at("halvings");
    std::istringstream rng(j.at("rng").get<std::string>());
    rng >> s.rng;
    if (!rng) throw ConfigError("corrupt RNG state in checkpoint " + dir.string());
    s.order = j.at("sampler").at("order").get<std::vector<std::size_t>>();
    s.cursor = j.at("sampler").at("cursor");
    s.train_loss_sum = j.at("train_loss_sum");
    s.train_loss_count = j.at("train_loss_count");
    for (const auto& e : j.at("log"))
      s.log.push_back({e.at("step"), e.at("lr"), e.at("margin"), e.at("train_loss"),
                       detail::from_finite_or_null(e.at("heldout_loss"))});
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed checkpoint state in " + dir.string() + ": " + e.what());
  }

  std::ifstream bin(dir / "tensors.bin", std::ios::binary);
  if (!bin) throw IoError("missing tensors.bin in checkpoint " + dir.string());
  detail::visit_state_tensors(c.state, [&](const std::string& name, Tensor<T>& t) {
    Tensor<T> v = read_tensor<T>(bin);
    const bool unset = v.shape() == Shape{0};
    const bool is_stat = name.ends_with(".bn_mean") || name.ends_with(".bn_var");
    if (unset && is_stat) {
      t = Tensor<T>();
      return;
    }
    if (!is_stat && v.shape() != t.shape())
      throw ConfigError("checkpoint tensor " + name + " has shape " + shape_str(v.shape()) + ", model expects " +
                        shape_str(t.shape()));
    t = std::move(v);
  });
  auto mark = [](auto& cb) { cb.stats.initialized = cb.stats.mean.size() > 0; };
  mark(c.state.model.backbone.stem);
  for (auto& stage : c.state.model.backbone.stages)
    for (auto& blk : stage) {
      mark(blk.conv1);
      mark(blk.conv2);
      if (blk.shortcut) mark(*blk.shortcut);
    }
  return c;
}

// ---------------------------------------------------------------------------
// Embedding store: a directory with ids.txt (one utterance id per line) and
// vectors.cpt, a CPT1 tensor [N, d_e] whose rows follow ids.txt.

struct EmbeddingStore {
  std::vector<std::string> ids;
  Tensor<double> vectors;  // [N, d_e]

  std::span<const double> get(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw ConfigError("embedding store has no entry for id '" + id + "'");
    const std::size_t d = vectors.dim(1);
    return {vectors.data() + it->second * d, d};
  }

  void build_index() {
    index_.clear();
    for (std::size_t i = 0; i < ids.size(); ++i)
      if (!index_.emplace(ids[i], i).second) throw ConfigError("duplicate embedding id '" + ids[i] + "'");
  }

 private:
  std::map<std::string, std::size_t> index_;
};

inline void save_embeddings(const std::filesystem::path& dir, const EmbeddingStore& s) {
  std::filesystem::create_directories(dir);
  std::ofstream ids(dir / "ids.txt");
  for (const auto& id : s.ids) ids << id << '\n';
  if (!ids) throw IoError("cannot write " + (dir / "ids.txt").string());
  save_tensor(dir / "vectors.cpt", s.vectors);
}

inline EmbeddingStore load_embeddings(const std::filesystem::path& dir) {
  EmbeddingStore s;
  std::ifstream ids(dir / "ids.txt");
  if (!ids) throw IoError("no embedding store at " + dir.string());
  for (std::string line; std::getline(ids, line);)
    if (!line.empty()) s.ids.push_back(line);
  s.vectors = load_tensor<double>(dir / "vectors.cpt");
  if (s.vectors.rank() != 2 || s.vectors.dim(0) != s.ids.size())
    throw ConfigError("embedding store " + dir.string() + ": ids and vectors disagree");
  s.build_index();
  return s;
}

/// Cosine scores for every trial; a missing id is a ConfigError naming it.
inline ScoreSet score_trials(const EmbeddingStore& store, const std::vector<Trial>& trials, std::size_t jobs = 1) {
  for (const auto& t : trials) {
    store.get(t.enrol_id);
    store.get(t.test_id);
  }
  ScoreSet out(trials.size());
  parallel_for(trials.size(), jobs, [&](std::size_t i) {
    out[i] = {trials[i], cosine_score<double>(store.get(trials[i].enrol_id), store.get(trials[i].test_id))};
  });
  return out;
}

/// Eval-mode embeddings for the given utterances (full length).
template <Real T>
EmbeddingStore extract_embeddings(const Model<T>& m, const CorpusManifest& manifest,
                                  const std::vector<std::string>& splits, std::size_t jobs = 1) {
  std::vector<const CorpusUtterance*> utts;
  for (const auto& u : manifest.utterances)
    if (splits.empty() || std::find(splits.begin(), splits.end(), u.split) != splits.end()) utts.push_back(&u);
  EmbeddingStore s;
  const std::size_t d = m.pooling.embed_dim;
  s.vectors = Tensor<double>(Shape{utts.size(), d});
  for (const auto* u : utts) s.ids.push_back(u->id);
  parallel_for(utts.size(), jobs, [&](std::size_t i) {
    const Tensor<T> e = embed_utterance(m, load_tensor<T>(manifest.resolve(utts[i]->feats)));
    for (std::size_t k = 0; k < d; ++k) s.vectors[i * d + k] = static_cast<double>(e[k]);
  });
  s.build_index();
  return s;
}

}  // namespace corrpool
