// corrpool/pipeline.hpp


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


// File-level pipeline stages shared by the command-line tool and the
// acceptance suite: synthesize -> train -> extract -> score -> evaluate.
//
// A training directory holds one checkpoint per save, named step-NNNNNN,
// a copy of the last one named "final", and train.log.

#pragma once

#include <cstdio>
#include <optional>

#include "corrpool/checkpoint.hpp"
#include "corrpool/config.hpp"

namespace corrpool {

inline std::filesystem::path manifest_path(const std::filesystem::path& corpus_dir) {
  return corpus_dir / "manifest.json";
}

inline CorpusManifest run_synth(const RunConfig& cfg, const std::filesystem::path& corpus_dir, std::size_t jobs = 1) {
  cfg.validate();
  return build_corpus(cfg.synth, cfg.fbank, corpus_dir, jobs);
}

inline std::string checkpoint_name(std::size_t step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "step-%06zu", step);
  return buf;
}

/// Precision a checkpoint was written in ("f32" or "f64").
inline std::string checkpoint_precision(const std::filesystem::path& dir) {
  std::ifstream js(dir / "state.json");
  if (!js) throw IoError("no checkpoint at " + dir.string() + " (missing state.json)");
  try {
    return nlohmann::json::parse(js).at("precision").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed checkpoint state in " + dir.string() + ": " + e.what());
  }
}

namespace detail {

template <Real T>
std::filesystem::path run_train(const RunConfig& cfg, const std::filesystem::path& corpus_dir,
                                 const std::filesystem::path& train_dir,
                                 const std::optional<std::filesystem::path>& resume, std::ostream* log) {
  namespace fs = std::filesystem;
  const CorpusManifest manifest = load_manifest(manifest_path(corpus_dir));
  const TrainData<T> data = load_train_data<T>(manifest);
  TrainState<T> state;
  if (resume) {
    Checkpoint<T> ck = load_checkpoint<T>(*resume);
    if (ck.speakers != data.speakers)
      throw ConfigError("checkpoint " + resume->string() + " was trained on a different speaker set");
    if (to_json(ck.state.model.resnet) != to_json(cfg.resnet) || to_json(ck.state.model.pooling) != to_json(cfg.pooling))
      throw ConfigError("checkpoint " + resume->string() + " does not match the configured model");
    state = std::move(ck.state);
  } else {
    state = init_train_state<T>(cfg.resnet, cfg.pooling, data.speakers.size(), cfg.train);
  }
  fs::create_directories(train_dir);
  std::ofstream file_log(train_dir / "train.log", resume ? std::ios::app : std::ios::trunc);
  struct Tee : std::streambuf {
    std::ostream* a;
    std::ostream* b;
    int overflow(int c) override {
      if (c == EOF) return 0;
      if (a) a->put(static_cast<char>(c));
      if (b) b->put(static_cast<char>(c));
      return c;
    }
    int sync() override {
      if (a) a->flush();
      if (b) b->flush();
      return 0;
    }
  } tee;
  tee.a = &file_log;
  tee.b = log;
  std::ostream out(&tee);
  train_loop<T>(state, data, cfg.train, cfg.aam, &out, [&](const TrainState<T>& s) {
    save_checkpoint(train_dir / checkpoint_name(s.step), s, data.speakers, cfg.train, cfg.aam);
  });
  save_checkpoint(train_dir / "final", state, data.speakers, cfg.train, cfg.aam);
  return train_dir / "final";
}

template <Real T>
EmbeddingStore run_extract(const std::filesystem::path& checkpoint, const CorpusManifest& manifest,
                           const std::vector<std::string>& splits, std::size_t jobs) {
  const Checkpoint<T> ck = load_checkpoint<T>(checkpoint);
  return extract_embeddings(ck.state.model, manifest, splits, jobs);
}

}  // namespace detail

/// Trains from scratch, or continues from `resume`, writing checkpoints into
/// train_dir. Returns the path of the final checkpoint.
inline std::filesystem::path run_train(const RunConfig& cfg, const std::filesystem::path& corpus_dir,
                                       const std::filesystem::path& train_dir,
                                       const std::optional<std::filesystem::path>& resume = std::nullopt,
                                       std::ostream* log = nullptr) {
  cfg.validate();
  if (cfg.train.precision == "f64") return detail::run_train<double>(cfg, corpus_dir, train_dir, resume, log);
  return detail::run_train<float>(cfg, corpus_dir, train_dir, resume, log);
}

/// Embeds the utterances of the given splits (all when empty) with the
/// model in `checkpoint`, in the precision it was trained in.
inline EmbeddingStore run_extract(const std::filesystem::path& checkpoint, const std::filesystem::path& manifest,
                                  const std::vector<std::string>& splits = {}, std::size_t jobs = 1) {
  const CorpusManifest m = load_manifest(manifest);
  if (checkpoint_precision(checkpoint) == "f64") return detail::run_extract<double>(checkpoint, m, splits, jobs);
  return detail::run_extract<float>(checkpoint, m, splits, jobs);
}

inline ScoreSet run_score(const std::filesystem::path& embeddings, const std::filesystem::path& trials,
                          std::size_t jobs = 1) {
  return score_trials(load_embeddings(embeddings), read_trials(trials), jobs);
}

inline nlohmann::json run_eval(const std::filesystem::path& scores, const std::filesystem::path& trials,
                               const DcfParams& dcf) {
  return metrics_report(read_scores(scores, read_trials(trials)), dcf);
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << j.dump(2) << '\n';
}

}  // namespace corrpool
