// tools/corrpool.cpp


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


// corrpool: command-line front end for corpus synthesis, training, embedding
// extraction, scoring, evaluation and the self-test suite.
//
// Exit status: 0 on success, 1 on a runtime failure, 2 on a configuration
// or validation error.

#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "corrpool/parallel.hpp"
#include "corrpool/pipeline.hpp"
#include "corrpool/verify/acceptance.hpp"

namespace {

using namespace corrpool;
namespace fs = std::filesystem;

constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;

struct Common {
  std::string config;
  std::string pooling;
  std::string precision;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::size_t jobs = 1;
};

/// Reads the config file (or an empty document) and applies command-line
/// overrides before validation.
RunConfig resolve_config(const Common& c) {
  nlohmann::json j = nlohmann::json::object();
  if (!c.config.empty()) {
    std::ifstream is(c.config);
    if (!is) throw ConfigError("cannot open config file " + c.config);
    try {
      j = nlohmann::json::parse(is);
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError("config " + c.config + " is not valid JSON: " + e.what());
    }
    if (!j.is_object()) throw ConfigError("config " + c.config + " must hold a JSON object");
  }
  if (!c.pooling.empty()) j["pooling"]["mode"] = c.pooling;
  if (!c.precision.empty()) j["train"]["precision"] = c.precision;
  if (c.seed_set) j["seed"] = c.seed;
  return parse_run_config(j);
}

void add_common(CLI::App* cmd, Common& c, bool model_flags) {
  cmd->add_option("--config", c.config, "JSON run configuration");
  cmd->add_option("--jobs", c.jobs, "worker threads")->check(CLI::PositiveNumber);
  cmd->add_option_function<std::uint64_t>("--seed", [&c](std::uint64_t s) {
    c.seed = s;
    c.seed_set = true;
  }, "top-level seed (overrides the config)");
  if (model_flags) {
    cmd->add_option("--pooling", c.pooling, "pooling mode")
        ->check(CLI::IsMember({"baseline_mean", "baseline_meanstd", "correlation", "combined"}));
    cmd->add_option("--precision", c.precision, "training precision")->check(CLI::IsMember({"f32", "f64"}));
  }
}

int cmd_synth(const Common& c, const std::string& out) {
  const RunConfig cfg = resolve_config(c);
  const fs::path dir = out.empty() ? fs::path(cfg.paths.corpus_dir) : fs::path(out);
  const CorpusManifest m = run_synth(cfg, dir, c.jobs);
  std::cout << "wrote " << m.utterances.size() << " utterances to " << manifest_path(dir).string()
            << " (nearest-centroid accuracy " << m.nearest_centroid_accuracy << ")\n";
  return 0;
}

int cmd_train(const Common& c, const std::string& corpus, const std::string& out, const std::string& resume) {
  const RunConfig cfg = resolve_config(c);
  const fs::path dir = out.empty() ? fs::path(cfg.paths.train_dir) : fs::path(out);
  const fs::path cdir = corpus.empty() ? fs::path(cfg.paths.corpus_dir) : fs::path(corpus);
  std::optional<fs::path> from;
  if (!resume.empty()) from = resume;
  const fs::path final_ckpt = run_train(cfg, cdir, dir, from, &std::cout);
  std::cout << "final checkpoint " << final_ckpt.string() << "\n";
  return 0;
}

int cmd_extract(const Common& c, const std::string& ckpt, const std::string& manifest, const std::string& out,
                const std::vector<std::string>& splits) {
  const EmbeddingStore s = run_extract(ckpt, manifest, splits, c.jobs);
  save_embeddings(out, s);
  std::cout << "wrote " << s.ids.size() << " embeddings of dimension " << s.vectors.dim(1) << " to " << out << "\n";
  return 0;
}

int cmd_score(const Common& c, const std::string& emb, const std::string& trials, const std::string& out) {
  const ScoreSet scores = run_score(emb, trials, c.jobs);
  write_scores(out, scores);
  std::cout << "wrote " << scores.size() << " scores to " << out << "\n";
  return 0;
}

int cmd_eval(const Common& c, const std::string& scores, const std::string& trials, const std::string& out,
             const DcfParams* dcf_override) {
  DcfParams dcf = c.config.empty() ? DcfParams{} : resolve_config(c).dcf;
  if (dcf_override) dcf = *dcf_override;
  dcf.validate();
  const nlohmann::json m = run_eval(scores, trials, dcf);
  if (!out.empty()) write_json(out, m);
  std::cout << "eer " << m["eer"].get<double>() << " min_dcf " << m["min_dcf"].get<double>() << " (p_target "
            << dcf.p_target << ", " << m["n_target"] << " target / " << m["n_nontarget"] << " nontarget trials)\n";
  return 0;
}

int cmd_selftest(const Common& c, bool e2e, bool corrupt, const std::string& work) {
  if (corrupt) {
    flatten_corruption_hook() = true;
    const auto r = verify::check_correlation_invariants(10);
    flatten_corruption_hook() = false;
    verify::print_result(std::cout, r);
    return r.passed ? 0 : kExitRuntime;
  }
  verify::SuiteOptions opt;
  opt.end_to_end = e2e;
  opt.jobs = c.jobs;
  opt.progress = &std::cout;
  if (!work.empty()) opt.work_dir = work;
  const auto results = verify::run_suite(opt);
  std::size_t passed = 0;
  double secs = 0;
  for (const auto& r : results) {
    passed += r.passed;
    secs += r.seconds;
  }
  std::cout << passed << "/" << results.size() << " checks passed in " << secs << " s\n";
  return passed == results.size() ? 0 : kExitRuntime;
}

}  // namespace

int main(int argc, char** argv) {
  retain_freed_memory();
  CLI::App app{"corrpool: speaker embeddings with frequency-wise channel correlation pooling"};
  app.require_subcommand(1);
  Common common;
  std::string out, corpus, resume, ckpt, manifest, trials, scores, emb, work;
  std::vector<std::string> splits;
  bool e2e = false, corrupt = false;
  DcfParams dcf;
  bool dcf_set = false;

  auto* synth = app.add_subcommand("synth", "synthesize a speaker corpus and its features");
  add_common(synth, common, false);
  synth->add_option("--out", out, "corpus directory (default paths.corpus_dir)");

  auto* train = app.add_subcommand("train", "train an embedding extractor");
  add_common(train, common, true);
  train->add_option("--corpus", corpus, "corpus directory (default paths.corpus_dir)");
  train->add_option("--out", out, "training directory (default paths.train_dir)");
  train->add_option("--resume", resume, "checkpoint to continue from");

  auto* extract = app.add_subcommand("extract", "embed every utterance of a manifest");
  add_common(extract, common, false);
  extract->add_option("--checkpoint", ckpt, "checkpoint directory")->required();
  extract->add_option("--manifest", manifest, "corpus manifest.json")->required();
  extract->add_option("--out", out, "embedding store directory")->required();
  extract->add_option("--split", splits, "restrict to these splits (train, heldout, trial)");

  auto* score = app.add_subcommand("score", "cosine-score a trial list");
  add_common(score, common, false);
  score->add_option("--embeddings", emb, "embedding store directory")->required();
  score->add_option("--trials", trials, "trial list")->required();
  score->add_option("--out", out, "score file")->required();

  auto* eval = app.add_subcommand("eval", "EER, minDCF and DET points of a score file");
  add_common(eval, common, false);
  eval->add_option("--scores", scores, "score file")->required();
  eval->add_option("--trials", trials, "trial list")->required();
  eval->add_option("--out", out, "metrics JSON");
  auto dcf_flag = [&](const char* name, double& field, const char* help) {
    eval->add_option_function<double>(name, [&field, &dcf_set](double v) {
      field = v;
      dcf_set = true;
    }, help);
  };
  dcf_flag("--p-target", dcf.p_target, "target prior");
  dcf_flag("--c-miss", dcf.c_miss, "miss cost");
  dcf_flag("--c-fa", dcf.c_fa, "false-alarm cost");

  auto* selftest = app.add_subcommand("selftest", "run the verification suite");
  add_common(selftest, common, false);
  selftest->add_flag("--e2e", e2e, "also run the desk end-to-end experiment (about 15 minutes)");
  selftest->add_flag("--corrupt-flatten", corrupt, "corrupt the flatten ordering and run the invariant check");
  selftest->add_option("--work-dir", work, "scratch directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (*synth) return cmd_synth(common, out);
    if (*train) return cmd_train(common, corpus, out, resume);
    if (*extract) return cmd_extract(common, ckpt, manifest, out, splits);
    if (*score) return cmd_score(common, emb, trials, out);
    if (*eval) {
      if (dcf_set && !common.config.empty()) {
        DcfParams base = resolve_config(common).dcf;
        // explicit flags win over the config file, field by field
        if (!eval->count("--p-target")) dcf.p_target = base.p_target;
        if (!eval->count("--c-miss")) dcf.c_miss = base.c_miss;
        if (!eval->count("--c-fa")) dcf.c_fa = base.c_fa;
      }
      return cmd_eval(common, scores, trials, out, dcf_set ? &dcf : nullptr);
    }
    if (*selftest) return cmd_selftest(common, e2e, corrupt, work);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return 0;
}
