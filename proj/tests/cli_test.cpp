// tests/cli_test.cpp

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

// Runs the corrpool binary as a subprocess and checks exit codes, files and
// messages.

#include <gtest/gtest.h>
#include <sys/wait.h>

#include "corrpool/checkpoint.hpp"
#include "test_util.hpp"

#ifndef CORRPOOL_CLI_PATH
#error "CORRPOOL_CLI_PATH must name the corrpool binary"
#endif

namespace corrpool {
namespace {

namespace fs = std::filesystem;

struct RunResult {
  int code = -1;
  std::string out, err;
};

RunResult run(const fs::path& dir, const std::string& args) {
  const fs::path o = dir / "stdout.txt", e = dir / "stderr.txt";
  const std::string cmd = std::string("'") + CORRPOOL_CLI_PATH + "' " + args + " > '" + o.string() + "' 2> '" +
                          e.string() + "'";
  const int status = std::system(cmd.c_str());
  RunResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = testing::read_file(o);
  r.err = testing::read_file(e);
  return r;
}

void write_json(const fs::path& p, const nlohmann::json& j) { std::ofstream(p) << j.dump(2); }

nlohmann::json tiny_config(const fs::path& dir) {
  return {{"seed", 5},
          {"resnet", {{"desk_preset", true}}},
          {"pooling", {{"mode", "correlation"}, {"c_reduced", 4}, {"f_merge", 2}, {"embed_dim", 16}}},
          {"train",
           {{"minibatch", 4}, {"microbatch", 2}, {"total_steps", 2}, {"eval_cadence", 1}, {"plateau_updates", 1},
            {"crop_frames", 40}}},
          {"synth",
           {{"n_train_speakers", 3}, {"n_trial_speakers", 2}, {"utts_per_speaker", 3}, {"heldout_per_speaker", 1},
            {"min_duration_s", 0.6}, {"max_duration_s", 0.8}, {"n_target_trials", 4}, {"n_nontarget_trials", 5}}},
          {"paths", {{"corpus_dir", (dir / "corpus").string()}, {"train_dir", (dir / "train").string()}}}};
}

/// Embedding store with a, b parallel and c orthogonal to them.
void write_store(const fs::path& dir) {
  EmbeddingStore s;
  s.ids = {"a", "b", "c"};
  s.vectors = Tensor<double>::from(Shape{3, 3}, {1, 2, 0, 2, 4, 0, 0, 0, 5});
  s.build_index();
  save_embeddings(dir, s);
}

TEST(Cli, ExitCodes) {
  const auto dir = testing::scratch_dir();
  EXPECT_EQ(run(dir, "--help").code, 0);
  EXPECT_EQ(run(dir, "").code, 2);
  EXPECT_EQ(run(dir, "frobnicate").code, 2);
  EXPECT_EQ(run(dir, "score --trials x").code, 2);
  EXPECT_EQ(run(dir, "train --pooling attention").code, 2);
  const auto r = run(dir, "synth --config '" + (dir / "missing.json").string() + "'");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("missing.json"), std::string::npos) << r.err;
}

TEST(Cli, UnknownConfigKeyIsConfigError) {
  const auto dir = testing::scratch_dir();
  write_json(dir / "c.json", {{"train", {{"learning_rate", 0.1}}}});
  const auto r = run(dir, "synth --config '" + (dir / "c.json").string() + "'");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("learning_rate"), std::string::npos) << r.err;
}

TEST(Cli, SynthCreatesMissingDirectory) {
  const auto dir = testing::scratch_dir();
  write_json(dir / "c.json", tiny_config(dir));
  const fs::path out = dir / "deep" / "nested" / "corpus";
  const auto r = run(dir, "synth --config '" + (dir / "c.json").string() + "' --out '" + out.string() + "'");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(out / "manifest.json"));
  EXPECT_TRUE(fs::exists(out / "trials.txt"));
  EXPECT_EQ(load_manifest(out / "manifest.json").utterances.size(), 15u);
}

TEST(Cli, SynthRejectsSingleSpeaker) {
  const auto dir = testing::scratch_dir();
  auto cfg = tiny_config(dir);
  cfg["synth"]["n_train_speakers"] = 1;
  write_json(dir / "c.json", cfg);
  const auto r = run(dir, "synth --config '" + (dir / "c.json").string() + "'");
  EXPECT_EQ(r.code, 2);
  EXPECT_FALSE(fs::exists(dir / "corpus" / "manifest.json"));
}

TEST(Cli, ScoreIdenticalDirectionsGiveOne) {
  const auto dir = testing::scratch_dir();
  write_store(dir / "emb");
  const std::vector<Trial> trials{{"a", "b", true}, {"a", "c", false}, {"b", "a", true}};
  write_trials(dir / "trials.txt", trials);
  const auto r = run(dir, "score --embeddings '" + (dir / "emb").string() + "' --trials '" +
                              (dir / "trials.txt").string() + "' --out '" + (dir / "scores.txt").string() + "'");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto scores = read_scores(dir / "scores.txt", trials);
  EXPECT_NEAR(scores[0].score, 1.0, 1e-15);
  EXPECT_EQ(scores[1].score, 0.0);
  const auto lib = score_trials(load_embeddings(dir / "emb"), trials);
  for (std::size_t i = 0; i < trials.size(); ++i) EXPECT_EQ(scores[i].score, lib[i].score);
}

TEST(Cli, ScoreMissingIdNamesIt) {
  const auto dir = testing::scratch_dir();
  write_store(dir / "emb");
  write_trials(dir / "trials.txt", {{"a", "ghost-7", true}});
  const auto r = run(dir, "score --embeddings '" + (dir / "emb").string() + "' --trials '" +
                              (dir / "trials.txt").string() + "' --out '" + (dir / "s.txt").string() + "'");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("ghost-7"), std::string::npos) << r.err;
}

TEST(Cli, EvalPerfectAndInverted) {
  const auto dir = testing::scratch_dir();
  const std::vector<Trial> trials{{"a", "b", true}, {"a", "c", false}, {"b", "c", false}, {"c", "d", true}};
  write_trials(dir / "trials.txt", trials);
  auto eval = [&](const std::vector<double>& s) {
    ScoreSet set;
    for (std::size_t i = 0; i < trials.size(); ++i) set.push_back({trials[i], s[i]});
    write_scores(dir / "scores.txt", set);
    const auto r = run(dir, "eval --scores '" + (dir / "scores.txt").string() + "' --trials '" +
                                (dir / "trials.txt").string() + "' --out '" + (dir / "m.json").string() + "'");
    EXPECT_EQ(r.code, 0) << r.err;
    std::ifstream is(dir / "m.json");
    return nlohmann::json::parse(is);
  };
  const auto perfect = eval({0.9, 0.1, 0.2, 0.8});
  EXPECT_EQ(perfect["eer"].get<double>(), 0.0);
  EXPECT_EQ(perfect["min_dcf"].get<double>(), 0.0);
  const auto inverted = eval({0.1, 0.9, 0.8, 0.2});
  EXPECT_EQ(inverted["eer"].get<double>(), 1.0);

  const auto bad = run(dir, "eval --scores '" + (dir / "scores.txt").string() + "' --trials '" +
                                (dir / "trials.txt").string() + "' --p-target 2");
  EXPECT_EQ(bad.code, 2);
}

TEST(Cli, SelftestRejectsCorruptedFlatten) {
  const auto dir = testing::scratch_dir();
  const auto r = run(dir, "selftest --corrupt-flatten");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("FAIL"), std::string::npos) << r.out;
}

// synth -> train -> extract -> score -> eval on a tiny configuration.
TEST(Cli, PipelineRunsEndToEnd) {
  const auto dir = testing::scratch_dir();
  write_json(dir / "c.json", tiny_config(dir));
  const std::string cfg = "--config '" + (dir / "c.json").string() + "'";
  ASSERT_EQ(run(dir, "synth " + cfg).code, 0);
  const auto tr = run(dir, "train " + cfg);
  ASSERT_EQ(tr.code, 0) << tr.err;
  EXPECT_NE(tr.out.find("step 2 "), std::string::npos) << tr.out;
  const auto pos = tr.out.find("final checkpoint ");
  ASSERT_NE(pos, std::string::npos) << tr.out;
  std::string ckpt = tr.out.substr(pos + 17);
  ckpt = ckpt.substr(0, ckpt.find('\n'));
  ASSERT_TRUE(fs::exists(fs::path(ckpt) / "state.json")) << ckpt;

  const auto corpus = dir / "corpus";
  auto ex = run(dir, "extract --checkpoint '" + ckpt + "' --manifest '" + (corpus / "manifest.json").string() +
                         "' --split trial --out '" + (dir / "emb").string() + "'");
  ASSERT_EQ(ex.code, 0) << ex.err;
  EXPECT_EQ(load_embeddings(dir / "emb").ids.size(), 6u);
  ASSERT_EQ(run(dir, "score --embeddings '" + (dir / "emb").string() + "' --trials '" +
                         (corpus / "trials.txt").string() + "' --out '" + (dir / "scores.txt").string() + "'")
                .code,
            0);
  const auto ev = run(dir, "eval --scores '" + (dir / "scores.txt").string() + "' --trials '" +
                               (corpus / "trials.txt").string() + "'");
  ASSERT_EQ(ev.code, 0) << ev.err;
  EXPECT_NE(ev.out.find("eer "), std::string::npos);

  // Resuming from the final checkpoint has nothing left to do.
  const auto again = run(dir, "train " + cfg + " --out '" + (dir / "train2").string() + "' --resume '" + ckpt + "'");
  EXPECT_EQ(again.code, 0) << again.err;
}

}  // namespace
}  // namespace corrpool
