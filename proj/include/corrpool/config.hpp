// corrpool/config.hpp


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


// JSON run configuration. Every section and key is optional; omitted keys
// keep the defaults of the corresponding config struct. Unknown keys and
// ill-typed values are rejected with ConfigError.
//
//   {
//     "seed": 0,
//     "fbank":   {"n_mels", "win_ms", "hop_ms", "fmin", "fmax", "floor", "apply_cmn"},
//     "resnet":  {"desk_preset", "stem_channels", "stage_blocks", "stage_channels",
//                 "stage_strides", "input_dim"},
//     "pooling": {"mode", "c_reduced", "f_merge", "reduction_kind", "normalization",
//                 "dropout_p", "embed_dim"},
//     "aam":     {"scale", "margin_schedule", "schedule_boundaries"},
//     "train":   {"lr_init", "momentum", "minibatch", "microbatch", "plateau_updates",
//                 "lr_factor", "improvement_tol", "eval_cadence", "total_steps",
//                 "checkpoint_every", "crop_frames", "precision"},
//     "dcf":     {"p_target", "c_miss", "c_fa"},
//     "synth":   {"n_train_speakers", "n_trial_speakers", "utts_per_speaker",
//                 "heldout_per_speaker", "min_duration_s", "max_duration_s",
//                 "noise_db", "n_target_trials", "n_nontarget_trials"},
//     "paths":   {"corpus_dir", "train_dir", "embeddings", "scores", "metrics"}
//   }
//
// "resnet.desk_preset": true starts from ResNetConfig::desk() before the
// other resnet keys are applied. The top-level seed drives corpus synthesis,
// model initialization and training.

#pragma once

#include <filesystem>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "corrpool/eval.hpp"
#include "corrpool/frontend.hpp"
#include "corrpool/synth.hpp"
#include "corrpool/trainer.hpp"

namespace corrpool {

struct PathsConfig {
  std::string corpus_dir = "corpus";
  std::string train_dir = "train";
  std::string embeddings = "embeddings";
  std::string scores = "scores.txt";
  std::string metrics = "metrics.json";
};

struct RunConfig {
  std::uint64_t seed = 0;
  FbankConfig fbank;
  bool desk_preset = false;
  ResNetConfig resnet;
  PoolingConfig pooling;
  AamConfig aam;
  TrainConfig train;
  DcfParams dcf;
  SynthConfig synth;
  PathsConfig paths;

  /// Pushes the top-level seed into the sections that carry one.
  void apply_seed(std::uint64_t s) {
    seed = s;
    train.seed = s;
    synth.seed = s;
  }

  void validate() const {
    fbank.validate(kSynthSampleRate);
    resnet.validate();
    if (resnet.input_dim != fbank.n_mels)
      throw ConfigError("resnet.input_dim (" + std::to_string(resnet.input_dim) + ") must equal fbank.n_mels (" +
                        std::to_string(fbank.n_mels) + ")");
    pooling.validate(resnet.output_freq(), resnet.output_channels());
    aam.validate();
    train.validate();
    dcf.validate();
    synth.validate();
  }
};

namespace detail {

/// Reads keys from one JSON object and remembers which were consumed.
class JsonSection {
 public:
  JsonSection(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("config: '" + path_ + "' must be a JSON object");
  }

  template <typename V>
  void get(const std::string& key, V& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<V>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("config: '" + where(key) + "' has the wrong type (" + j_.at(key).dump() + ")");
    }
  }

  /// Parses a string-valued key through `parse`.
  template <typename V, typename P>
  void get_enum(const std::string& key, V& out, P&& parse) {
    std::string s;
    if (!j_.contains(key)) {
      seen_.insert(key);
      return;
    }
    get(key, s);
    out = parse(s);
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  JsonSection section(const std::string& key) {
    seen_.insert(key);
    static const nlohmann::json kEmpty = nlohmann::json::object();
    return JsonSection(j_.contains(key) ? j_.at(key) : kEmpty, where(key));
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError("config: unknown key '" + where(k) + "'");
  }

 private:
  std::string where(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline void read_resnet(detail::JsonSection s, ResNetConfig& r, bool& desk) {
  s.get("desk_preset", desk);
  if (desk) r = ResNetConfig::desk();
  s.get("stem_channels", r.stem_channels);
  s.get("stage_blocks", r.stage_blocks);
  s.get("stage_channels", r.stage_channels);
  s.get("stage_strides", r.stage_strides);
  s.get("input_dim", r.input_dim);
  s.finish();
}

inline void read_pooling(detail::JsonSection s, PoolingConfig& p) {
  s.get_enum("mode", p.mode, parse_pooling_mode);
  s.get("c_reduced", p.c_reduced);
  s.get("f_merge", p.f_merge);
  s.get_enum("reduction_kind", p.reduction_kind, parse_reduction_kind);
  s.get_enum("normalization", p.normalization, parse_normalization);
  s.get("dropout_p", p.dropout_p);
  s.get("embed_dim", p.embed_dim);
  s.finish();
}

inline void read_aam(detail::JsonSection s, AamConfig& a) {
  s.get("scale", a.scale);
  s.get("margin_schedule", a.margin_schedule);
  s.get("schedule_boundaries", a.schedule_boundaries);
  s.finish();
}

inline void read_train(detail::JsonSection s, TrainConfig& t) {
  s.get("lr_init", t.lr_init);
  s.get("momentum", t.momentum);
  s.get("minibatch", t.minibatch);
  s.get("microbatch", t.microbatch);
  s.get("plateau_updates", t.plateau_updates);
  s.get("lr_factor", t.lr_factor);
  s.get("improvement_tol", t.improvement_tol);
  s.get("eval_cadence", t.eval_cadence);
  s.get("total_steps", t.total_steps);
  s.get("checkpoint_every", t.checkpoint_every);
  s.get("crop_frames", t.crop_frames);
  s.get("precision", t.precision);
  s.finish();
}

/// Parses and validates a run configuration document.
inline RunConfig parse_run_config(const nlohmann::json& j) {
  RunConfig c;
  detail::JsonSection root(j, "");
  std::uint64_t seed = 0;
  root.get("seed", seed);
  {
    auto s = root.section("fbank");
    s.get("n_mels", c.fbank.n_mels);
    s.get("win_ms", c.fbank.win_ms);
    s.get("hop_ms", c.fbank.hop_ms);
    s.get("fmin", c.fbank.fmin);
    s.get("fmax", c.fbank.fmax);
    s.get("floor", c.fbank.floor);
    s.get("apply_cmn", c.fbank.apply_cmn);
    s.finish();
  }
  read_resnet(root.section("resnet"), c.resnet, c.desk_preset);
  read_pooling(root.section("pooling"), c.pooling);
  read_aam(root.section("aam"), c.aam);
  read_train(root.section("train"), c.train);
  {
    auto s = root.section("dcf");
    s.get("p_target", c.dcf.p_target);
    s.get("c_miss", c.dcf.c_miss);
    s.get("c_fa", c.dcf.c_fa);
    s.finish();
  }
  {
    auto s = root.section("synth");
    s.get("n_train_speakers", c.synth.n_train_speakers);
    s.get("n_trial_speakers", c.synth.n_trial_speakers);
    s.get("utts_per_speaker", c.synth.utts_per_speaker);
    s.get("heldout_per_speaker", c.synth.heldout_per_speaker);
    s.get("min_duration_s", c.synth.min_duration_s);
    s.get("max_duration_s", c.synth.max_duration_s);
    s.get("noise_db", c.synth.noise_db);
    s.get("n_target_trials", c.synth.n_target_trials);
    s.get("n_nontarget_trials", c.synth.n_nontarget_trials);
    s.finish();
  }
  {
    auto s = root.section("paths");
    s.get("corpus_dir", c.paths.corpus_dir);
    s.get("train_dir", c.paths.train_dir);
    s.get("embeddings", c.paths.embeddings);
    s.get("scores", c.paths.scores);
    s.get("metrics", c.paths.metrics);
    s.finish();
  }
  root.finish();
  c.apply_seed(seed);
  c.validate();
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_run_config(j);
}

// Serialization of the model-defining sections, used by checkpoints.

inline nlohmann::json to_json(const ResNetConfig& r) {
  return {{"stem_channels", r.stem_channels}, {"stage_blocks", r.stage_blocks}, {"stage_channels", r.stage_channels},
          {"stage_strides", r.stage_strides}, {"input_dim", r.input_dim}};
}

inline nlohmann::json to_json(const PoolingConfig& p) {
  return {{"mode", to_string(p.mode)},
          {"c_reduced", p.c_reduced},
          {"f_merge", p.f_merge},
          {"reduction_kind", to_string(p.reduction_kind)},
          {"normalization", to_string(p.normalization)},
          {"dropout_p", p.dropout_p},
          {"embed_dim", p.embed_dim}};
}

inline nlohmann::json to_json(const AamConfig& a) {
  return {{"scale", a.scale}, {"margin_schedule", a.margin_schedule}, {"schedule_boundaries", a.schedule_boundaries}};
}

inline nlohmann::json to_json(const TrainConfig& t) {
  return {{"lr_init", t.lr_init},
          {"momentum", t.momentum},
          {"minibatch", t.minibatch},
          {"microbatch", t.microbatch},
          {"plateau_updates", t.plateau_updates},
          {"lr_factor", t.lr_factor},
          {"improvement_tol", t.improvement_tol},
          {"eval_cadence", t.eval_cadence},
          {"total_steps", t.total_steps},
          {"checkpoint_every", t.checkpoint_every},
          {"crop_frames", t.crop_frames},
          {"precision", t.precision}};
}

}  // namespace corrpool
