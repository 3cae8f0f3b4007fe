// tests/synth_test.cpp

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

#include <gtest/gtest.h>

#include <set>

#include "corrpool/synth.hpp"
#include "test_util.hpp"

namespace corrpool {
namespace {

SynthConfig small_corpus() {
  SynthConfig c;
  c.n_train_speakers = 4;
  c.n_trial_speakers = 3;
  c.utts_per_speaker = 4;
  c.heldout_per_speaker = 1;
  c.min_duration_s = 0.6;
  c.max_duration_s = 0.9;
  c.n_target_trials = 10;
  c.n_nontarget_trials = 12;
  c.seed = 77;
  return c;
}

/// Mean periodogram power in [lo, hi] Hz over all frames.
double band_power(const Waveform& w, double lo, double hi) {
  const auto p = stft_power(w, {});
  const double bin_hz = 16000.0 / 512.0;
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t t = 0; t < p.dim(0); ++t)
    for (std::size_t k = 0; k < p.dim(1); ++k) {
      const double hz = k * bin_hz;
      if (hz < lo || hz > hi) continue;
      total += p.at(t, k);
      ++count;
    }
  return total / static_cast<double>(count);
}

TEST(SampleSpeakers, Deterministic) {
  const auto a = sample_speakers(12, 5), b = sample_speakers(12, 5), c = sample_speakers(12, 6);
  ASSERT_EQ(a.size(), 12u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].id, b[i].id);
    EXPECT_EQ(a[i].f0, b[i].f0);
    EXPECT_EQ(a[i].formants, b[i].formants);
  }
  EXPECT_NE(a[0].f0, c[0].f0);
}

TEST(SampleSpeakers, SeparationAndRanges) {
  const auto spk = sample_speakers(30, 9);
  std::set<std::string> ids;
  for (std::size_t i = 0; i < spk.size(); ++i) {
    ids.insert(spk[i].id);
    EXPECT_GE(spk[i].f0, kMinF0);
    EXPECT_LE(spk[i].f0, kMaxF0);
    ASSERT_EQ(spk[i].formants.size(), spk[i].bandwidths.size());
    for (std::size_t k = 1; k < spk[i].formants.size(); ++k) EXPECT_GT(spk[i].formants[k], spk[i].formants[k - 1]);
    for (std::size_t j = 0; j < i; ++j) EXPECT_GE(std::abs(spk[i].f0 - spk[j].f0), f0_separation(30));
  }
  EXPECT_EQ(ids.size(), 30u);
}

TEST(SampleSpeakers, TwoSpeakersAreTenHertzApart) {
  EXPECT_EQ(f0_separation(2), 10.0);
  EXPECT_EQ(f0_separation(14), 10.0);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto spk = sample_speakers(2, seed);
    EXPECT_GE(std::abs(spk[0].f0 - spk[1].f0), 10.0);
  }
}

TEST(SampleSpeakers, NeedsTwo) {
  EXPECT_THROW(sample_speakers(1, 0), ConfigError);
  EXPECT_THROW(sample_speakers(0, 0), ConfigError);
}

TEST(GenerateUtterance, DeterministicAndPeakNormalized) {
  const auto spk = sample_speakers(2, 3);
  for (double snr : {std::numeric_limits<double>::infinity(), 20.0}) {
    const Waveform a = generate_utterance(spk[0], 1.0, snr, 11), b = generate_utterance(spk[0], 1.0, snr, 11);
    EXPECT_EQ(a.samples, b.samples);
    EXPECT_EQ(a.sample_rate, 16000.0);
    EXPECT_EQ(a.samples.size(), 16000u);
    double peak = 0.0;
    for (double v : a.samples) peak = std::max(peak, std::abs(v));
    EXPECT_NEAR(peak, 0.5, 1e-6);
  }
  EXPECT_NE(generate_utterance(spk[0], 1.0, 20.0, 11).samples, generate_utterance(spk[0], 1.0, 20.0, 12).samples);
  EXPECT_THROW(generate_utterance(spk[0], 0.4, 20.0, 1), ConfigError);
}

// Moving the first formant up moves spectral energy with it.
TEST(GenerateUtterance, FirstFormantShapesSpectrum) {
  auto spk = sample_speakers(2, 21)[0];
  spk.formants = {400.0, 1500.0, 2600.0, 3600.0};
  auto moved = spk;
  moved.formants[0] = 900.0;
  const double inf = std::numeric_limits<double>::infinity();
  const Waveform a = generate_utterance(spk, 1.5, inf, 4), b = generate_utterance(moved, 1.5, inf, 4);
  EXPECT_GT(band_power(a, 300, 500) / band_power(a, 800, 1000), band_power(b, 300, 500) / band_power(b, 800, 1000));
  EXPECT_GT(band_power(b, 800, 1000), band_power(a, 800, 1000));
}

TEST(DeriveSeed, DistinctStreams) {
  std::set<std::uint64_t> seen;
  for (std::uint64_t a = 0; a < 50; ++a)
    for (std::uint64_t b = 0; b < 50; ++b) seen.insert(derive_seed(1234, a, b));
  EXPECT_EQ(seen.size(), 2500u);
  EXPECT_EQ(derive_seed(1, 2, 3), derive_seed(1, 2, 3));
}

TEST(MakeTrials, BalancedAndWithoutReplacement) {
  std::vector<std::string> ids, spk;
  for (int s = 0; s < 4; ++s)
    for (int u = 0; u < 5; ++u) ids.push_back("s" + std::to_string(s) + "u" + std::to_string(u)), spk.push_back("s" + std::to_string(s));
  const auto trials = make_trials(ids, spk, 30, 40, 8);
  std::set<std::pair<std::string, std::string>> pairs;
  std::size_t n_tgt = 0;
  for (const auto& t : trials) {
    n_tgt += t.target;
    EXPECT_EQ(t.target, t.enrol_id.substr(0, 2) == t.test_id.substr(0, 2));
    EXPECT_NE(t.enrol_id, t.test_id);
    pairs.insert({t.enrol_id, t.test_id});
  }
  EXPECT_EQ(n_tgt, 30u);
  EXPECT_EQ(trials.size(), 70u);
  EXPECT_EQ(pairs.size(), 70u);
  EXPECT_THROW(make_trials(ids, spk, 41, 10, 8), ConfigError);
}

TEST(NearestCentroid, SeparatedClusters) {
  std::vector<std::vector<double>> x{{0, 0}, {0.1, 0}, {0, 0.1}, {5, 5}, {5.1, 5}, {5, 5.1}};
  EXPECT_DOUBLE_EQ(nearest_centroid_accuracy(x, {0, 0, 0, 1, 1, 1}), 1.0);
  EXPECT_THROW(nearest_centroid_accuracy(x, {0, 1}), ShapeError);
}

TEST(SynthConfig, DefaultsAndValidation) {
  const SynthConfig d;
  EXPECT_EQ((d.n_train_speakers + d.n_trial_speakers) * d.utts_per_speaker, 600u);
  EXPECT_NO_THROW(d.validate());
  SynthConfig c = d;
  c.n_train_speakers = 1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = d;
  c.heldout_per_speaker = c.utts_per_speaker;
  EXPECT_THROW(c.validate(), ConfigError);
  c = d;
  c.min_duration_s = 0.2;
  EXPECT_THROW(c.validate(), ConfigError);
  c = d;
  c.n_target_trials = 10 * 190 + 1;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(BuildCorpus, LayoutAndSplits) {
  const auto dir = testing::scratch_dir() / "corpus";
  const auto cfg = small_corpus();
  const auto m = build_corpus(cfg, {}, dir);
  for (const char* f : {"manifest.json", "feats.index", "trials.txt"}) EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
  ASSERT_EQ(m.utterances.size(), 28u);
  EXPECT_GT(m.nearest_centroid_accuracy, 0.8);

  std::set<std::string> train_spk, trial_spk;
  std::size_t n_heldout = 0;
  for (const auto& u : m.utterances) {
    EXPECT_TRUE(std::filesystem::exists(m.resolve(u.wav)));
    const auto feats = load_tensor<float>(m.resolve(u.feats));
    EXPECT_EQ(feats.shape(), (Shape{u.frames, 80}));
    (u.split == "trial" ? trial_spk : train_spk).insert(u.speaker);
    n_heldout += u.split == "heldout";
  }
  EXPECT_EQ(train_spk.size(), 4u);
  EXPECT_EQ(trial_spk.size(), 3u);
  for (const auto& s : trial_spk) EXPECT_EQ(train_spk.count(s), 0u);
  EXPECT_EQ(n_heldout, 4u);
  EXPECT_EQ(m.training_speakers().size(), 4u);

  const auto trials = read_trials(dir / m.trials);
  std::set<std::string> trial_utts;
  for (const auto& u : m.utterances)
    if (u.split == "trial") trial_utts.insert(u.id);
  std::size_t n_tgt = 0;
  for (const auto& t : trials) {
    EXPECT_EQ(trial_utts.count(t.enrol_id), 1u);
    EXPECT_EQ(trial_utts.count(t.test_id), 1u);
    n_tgt += t.target;
  }
  EXPECT_EQ(n_tgt, cfg.n_target_trials);
  EXPECT_EQ(trials.size(), cfg.n_target_trials + cfg.n_nontarget_trials);

  const auto back = load_manifest(dir / "manifest.json");
  EXPECT_EQ(to_json(back), to_json(m));
}

TEST(BuildCorpus, RegenerationIsByteIdentical) {
  const auto dir = testing::scratch_dir();
  const auto cfg = small_corpus();
  build_corpus(cfg, {}, dir / "a", 1);
  build_corpus(cfg, {}, dir / "b", 2);
  for (const char* f : {"manifest.json", "trials.txt", "feats.index", "wav/spk003-u002.wav", "feats/spk005-u001.cpt"})
    EXPECT_EQ(testing::read_file(dir / "a" / f), testing::read_file(dir / "b" / f)) << f;
}

TEST(LoadManifest, Errors) {
  const auto dir = testing::scratch_dir();
  EXPECT_THROW(load_manifest(dir / "none.json"), IoError);
  std::ofstream(dir / "bad.json") << "{\"seed\": 1}";
  EXPECT_THROW(load_manifest(dir / "bad.json"), ConfigError);
}

}  // namespace
}  // namespace corrpool
