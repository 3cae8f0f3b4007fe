// corrpool/synth.hpp


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


// Synthetic multi-speaker corpus.
//
// Each speaker is a source-filter voice: a jittered pulse train at the
// speaker's f0 drives a cascade of two-pole resonators at the speaker's
// formants, followed by a one-pole spectral tilt. Utterances are sequences of
// voiced "syllables" separated by short pauses; formants drift a little from
// syllable to syllable, and white noise is added at a fixed SNR.

#pragma once

#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>

#include <nlohmann/json.hpp>

#include "corrpool/eval.hpp"
#include "corrpool/frontend.hpp"
#include "corrpool/parallel.hpp"
#include "corrpool/serialize.hpp"

namespace corrpool {

struct SynthSpeaker {
  std::string id;
  double f0 = 120.0;
  std::vector<double> formants;    // Hz, strictly increasing
  std::vector<double> bandwidths;  // Hz
  double spectral_tilt = -6.0;     // dB per octave
};

inline constexpr double kMinF0 = 80.0, kMaxF0 = 300.0;
inline constexpr double kSynthSampleRate = 16000.0;
/// Minimum root-sum-square log-ratio distance between two speakers' formants.
inline constexpr double kFormantSeparation = 0.06;

/// Largest f0 gap that still lets n speakers fit in [80, 300] Hz with room to
/// spare: 10 Hz, reduced for large n.
inline double f0_separation(std::size_t n) {
  return std::min(10.0, 0.6 * (kMaxF0 - kMinF0) / static_cast<double>(std::max<std::size_t>(n, 2) - 1));
}

/// SplitMix64 finalizer over (base, a, b).
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(base) ^ a) ^ b);
}

/// Draws n speakers from fixed parameter ranges; candidates too close to an
/// already accepted speaker are redrawn.
inline std::vector<SynthSpeaker> sample_speakers(std::size_t n, std::uint64_t seed) {
  if (n < 2) throw ConfigError("sample_speakers: need at least 2 speakers, got " + std::to_string(n));
  static constexpr double kFormantLo[4] = {300, 900, 2300, 3300}, kFormantHi[4] = {850, 2200, 3100, 4300};
  static constexpr double kBandLo[4] = {60, 80, 120, 160}, kBandHi[4] = {120, 160, 220, 280};
  constexpr std::size_t kMaxAttempts = 2000;
  const double gap = f0_separation(n);
  std::mt19937_64 rng(seed);
  auto uni = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };

  std::vector<SynthSpeaker> out;
  for (std::size_t i = 0; i < n; ++i) {
    bool placed = false;
    for (std::size_t attempt = 0; attempt < kMaxAttempts && !placed; ++attempt) {
      SynthSpeaker s;
      s.f0 = uni(kMinF0, kMaxF0);
      for (int k = 0; k < 4; ++k) {
        s.formants.push_back(uni(kFormantLo[k], kFormantHi[k]));
        s.bandwidths.push_back(uni(kBandLo[k], kBandHi[k]));
      }
      s.spectral_tilt = uni(-12.0, -3.0);
      placed = std::all_of(out.begin(), out.end(), [&](const SynthSpeaker& o) {
        double d2 = 0.0;
        for (int k = 0; k < 4; ++k) d2 += std::pow(std::log(s.formants[k] / o.formants[k]), 2);
        return std::abs(s.f0 - o.f0) >= gap && std::sqrt(d2) >= kFormantSeparation;
      });
      if (placed) {
        char id[32];
        std::snprintf(id, sizeof id, "spk%03zu", i);
        s.id = id;
        out.push_back(std::move(s));
      }
    }
    if (!placed)
      throw ConfigError("sample_speakers: could not place speaker " + std::to_string(i) + " of " + std::to_string(n) +
                        " with the required separation; use a smaller speaker count");
  }
  return out;
}

namespace detail {

struct Resonator {
  double y1 = 0.0, y2 = 0.0;

  /// Two-pole section with unit gain at DC.
  double step(double x, double freq, double bw, double fs) {
    const double r = std::exp(-std::numbers::pi * bw / fs);
    const double b = 2.0 * r * std::cos(2.0 * std::numbers::pi * freq / fs), c = -r * r;
    const double y = (1.0 - b - c) * x + b * y1 + c * y2;
    y2 = y1;
    y1 = y;
    return y;
  }
};

}  // namespace detail

/// Synthesizes one utterance at 16 kHz, peak-normalized to 0.5. noise_db is
/// the SNR in dB; +inf disables noise.
inline Waveform generate_utterance(const SynthSpeaker& spk, double duration_s, double noise_db, std::uint64_t seed) {
  if (!(duration_s >= 0.5)) throw ConfigError("generate_utterance: duration must be at least 0.5 s");
  if (spk.formants.empty() || spk.formants.size() != spk.bandwidths.size())
    throw ConfigError("generate_utterance: speaker " + spk.id + " has inconsistent formant lists");
  const double fs = kSynthSampleRate;
  const std::size_t n = static_cast<std::size_t>(std::llround(duration_s * fs));
  const std::size_t nf = spk.formants.size();
  std::mt19937_64 rng(seed);
  auto uni = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  std::normal_distribution<double> gauss(0.0, 1.0);

  // Per-utterance deviations from the speaker's nominal voice.
  const double f0_base = spk.f0 * (1.0 + 0.02 * gauss(rng));
  const double vib_rate = uni(0.3, 1.2), vib_phase = uni(0.0, 2.0 * std::numbers::pi);
  std::vector<double> utt_formants(nf);
  for (std::size_t k = 0; k < nf; ++k) utt_formants[k] = spk.formants[k] * (1.0 + 0.03 * gauss(rng));

  // Syllable plan: target formants and amplitude per voiced segment.
  struct Segment {
    std::size_t begin, end;
    double amp;
    std::vector<double> formants;
  };
  std::vector<Segment> segs;
  for (std::size_t pos = static_cast<std::size_t>(uni(0.0, 0.08) * fs); pos < n;) {
    const std::size_t len = static_cast<std::size_t>(uni(0.12, 0.30) * fs);
    Segment s{pos, std::min(n, pos + len), uni(0.6, 1.0), utt_formants};
    double prev = 0.0;
    for (auto& f : s.formants) {
      f *= 1.0 + uni(-0.06, 0.06);
      f = std::clamp(f, prev + 50.0, 0.45 * fs);
      prev = f;
    }
    segs.push_back(std::move(s));
    pos += len + static_cast<std::size_t>(uni(0.03, 0.12) * fs);
  }

  std::vector<double> x(n, 0.0);
  std::vector<detail::Resonator> res(nf);
  std::vector<double> cur = utt_formants;
  const double tilt = 1.0 - std::pow(2.0, spk.spectral_tilt / 6.0);
  const double ramp = 0.02 * fs;
  double tilt_state = 0.0, next_pulse = 0.0;
  std::size_t seg = 0;
  for (std::size_t i = 0; i < n; ++i) {
    while (seg < segs.size() && i >= segs[seg].end) ++seg;
    double env = 0.0;
    if (seg < segs.size() && i >= segs[seg].begin) {
      const auto& s = segs[seg];
      const double a = std::min({1.0, static_cast<double>(i - s.begin) / ramp, static_cast<double>(s.end - i) / ramp});
      env = s.amp * 0.5 * (1.0 - std::cos(std::numbers::pi * a));
      for (std::size_t k = 0; k < nf; ++k) cur[k] += 0.005 * (s.formants[k] - cur[k]);
    }
    double src = 0.0;
    if (static_cast<double>(i) >= next_pulse) {
      const double t = static_cast<double>(i) / fs;
      const double f0 = f0_base * (1.0 + 0.06 * std::sin(2.0 * std::numbers::pi * vib_rate * t + vib_phase));
      next_pulse += fs / f0 * (1.0 + 0.01 * gauss(rng));
      src = env * (1.0 + 0.05 * gauss(rng));
    }
    double y = src;
    for (std::size_t k = 0; k < nf; ++k) y = res[k].step(y, cur[k], spk.bandwidths[k], fs);
    tilt_state = (1.0 - tilt) * y + tilt * tilt_state;
    x[i] = tilt_state;
  }

  if (!(std::isinf(noise_db) && noise_db > 0)) {
    double power = 0.0;
    for (double v : x) power += v * v;
    power /= static_cast<double>(n);
    const double sigma = std::sqrt(power / std::pow(10.0, noise_db / 10.0));
    for (double& v : x) v += sigma * gauss(rng);
  }
  double peak = 0.0;
  for (double v : x) peak = std::max(peak, std::abs(v));
  if (peak > 0.0)
    for (double& v : x) v *= 0.5 / peak;
  return {std::move(x), fs};
}

// ---------------------------------------------------------------------------
// Corpus.

struct SynthConfig {
  std::size_t n_train_speakers = 20;
  std::size_t n_trial_speakers = 10;
  std::size_t utts_per_speaker = 20;
  /// Of each training speaker's utterances, this many go to the held-out split.
  std::size_t heldout_per_speaker = 2;
  double min_duration_s = 2.0;
  double max_duration_s = 3.5;
  double noise_db = 20.0;
  std::size_t n_target_trials = 500;
  std::size_t n_nontarget_trials = 500;
  std::uint64_t seed = 1234;

  void validate() const {
    if (n_train_speakers < 2) throw ConfigError("synth.n_train_speakers must be at least 2");
    if (n_trial_speakers < 2) throw ConfigError("synth.n_trial_speakers must be at least 2");
    if (utts_per_speaker < 2) throw ConfigError("synth.utts_per_speaker must be at least 2");
    if (heldout_per_speaker >= utts_per_speaker)
      throw ConfigError("synth.heldout_per_speaker must leave at least one training utterance per speaker");
    if (!(min_duration_s >= 0.5 && max_duration_s >= min_duration_s))
      throw ConfigError("synth durations need 0.5 <= min_duration_s <= max_duration_s");
    if (std::isnan(noise_db)) throw ConfigError("synth.noise_db must be a number");
    const std::size_t per_spk = utts_per_speaker * (utts_per_speaker - 1) / 2;
    if (n_target_trials > n_trial_speakers * per_spk)
      throw ConfigError("synth.n_target_trials exceeds the number of same-speaker pairs");
    if (n_target_trials == 0 || n_nontarget_trials == 0) throw ConfigError("synth: trial counts must be positive");
  }
};

struct CorpusUtterance {
  std::string id;
  std::string speaker;
  std::string split;  // train | heldout | trial
  std::string wav;    // relative to the corpus directory
  std::string feats;
  std::size_t frames = 0;
};

struct CorpusManifest {
  std::filesystem::path root;
  std::uint64_t seed = 0;
  std::vector<SynthSpeaker> speakers;
  std::vector<std::string> speaker_splits;  // train | trial, parallel to speakers
  std::vector<CorpusUtterance> utterances;
  std::string trials = "trials.txt";
  double nearest_centroid_accuracy = 0.0;

  std::filesystem::path resolve(const std::string& rel) const { return root / rel; }

  /// Training speaker ids in manifest order; their position is the class label.
  std::vector<std::string> training_speakers() const {
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < speakers.size(); ++i)
      if (speaker_splits[i] == "train") ids.push_back(speakers[i].id);
    return ids;
  }
};

inline nlohmann::json to_json(const CorpusManifest& m) {
  nlohmann::json spk = nlohmann::json::array(), utt = nlohmann::json::array();
  for (std::size_t i = 0; i < m.speakers.size(); ++i) {
    const auto& s = m.speakers[i];
    spk.push_back({{"id", s.id}, {"split", m.speaker_splits[i]}, {"f0", s.f0}, {"formants", s.formants},
                   {"bandwidths", s.bandwidths}, {"spectral_tilt", s.spectral_tilt}});
  }
  for (const auto& u : m.utterances)
    utt.push_back({{"id", u.id}, {"speaker", u.speaker}, {"split", u.split}, {"wav", u.wav}, {"feats", u.feats},
                   {"frames", u.frames}});
  return {{"seed", m.seed}, {"speakers", spk}, {"utterances", utt}, {"trials", m.trials},
          {"nearest_centroid_accuracy", m.nearest_centroid_accuracy}};
}

inline CorpusManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open manifest " + path.string());
  CorpusManifest m;
  try {
    const auto j = nlohmann::json::parse(is);
    m.root = path.parent_path();
    m.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& s : j.at("speakers")) {
      m.speakers.push_back({s.at("id"), s.at("f0"), s.at("formants").get<std::vector<double>>(),
                            s.at("bandwidths").get<std::vector<double>>(), s.at("spectral_tilt")});
      m.speaker_splits.push_back(s.at("split"));
    }
    for (const auto& u : j.at("utterances"))
      m.utterances.push_back({u.at("id"), u.at("speaker"), u.at("split"), u.at("wav"), u.at("feats"), u.at("frames")});
    m.trials = j.at("trials");
    m.nearest_centroid_accuracy = j.value("nearest_centroid_accuracy", 0.0);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed manifest " + path.string() + ": " + e.what());
  }
  return m;
}

/// Leave-one-out nearest-centroid classification accuracy of row vectors
/// `x` [n, d] with integer labels, by Euclidean distance.
inline double nearest_centroid_accuracy(const std::vector<std::vector<double>>& x, const std::vector<std::size_t>& labels) {
  if (x.empty() || x.size() != labels.size()) throw ShapeError("nearest_centroid_accuracy: bad inputs");
  const std::size_t k = *std::max_element(labels.begin(), labels.end()) + 1, d = x[0].size();
  std::vector<std::vector<double>> sum(k, std::vector<double>(d, 0.0));
  std::vector<std::size_t> count(k, 0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    for (std::size_t j = 0; j < d; ++j) sum[labels[i]][j] += x[i][j];
    ++count[labels[i]];
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t arg = 0;
    for (std::size_t c = 0; c < k; ++c) {
      const std::size_t cnt = count[c] - (c == labels[i]);
      if (cnt == 0) continue;
      double dist = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double mu = (sum[c][j] - (c == labels[i] ? x[i][j] : 0.0)) / static_cast<double>(cnt);
        dist += (x[i][j] - mu) * (x[i][j] - mu);
      }
      if (dist < best) best = dist, arg = c;
    }
    correct += arg == labels[i];
  }
  return static_cast<double>(correct) / static_cast<double>(x.size());
}

inline constexpr double kCentroidAccuracyFloor = 0.8;

/// Balanced trial list over the given utterances (speaker ids parallel to
/// ids): n_target same-speaker pairs and n_nontarget cross-speaker pairs,
/// drawn without replacement.
inline std::vector<Trial> make_trials(const std::vector<std::string>& ids, const std::vector<std::string>& speakers,
                                      std::size_t n_target, std::size_t n_nontarget, std::uint64_t seed) {
  std::vector<Trial> tgt, non;
  for (std::size_t i = 0; i < ids.size(); ++i)
    for (std::size_t j = i + 1; j < ids.size(); ++j)
      (speakers[i] == speakers[j] ? tgt : non).push_back({ids[i], ids[j], speakers[i] == speakers[j]});
  if (tgt.size() < n_target || non.size() < n_nontarget)
    throw ConfigError("not enough utterance pairs for the requested trial counts");
  std::mt19937_64 rng(seed);
  std::shuffle(tgt.begin(), tgt.end(), rng);
  std::shuffle(non.begin(), non.end(), rng);
  std::vector<Trial> out(tgt.begin(), tgt.begin() + static_cast<std::ptrdiff_t>(n_target));
  out.insert(out.end(), non.begin(), non.begin() + static_cast<std::ptrdiff_t>(n_nontarget));
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

/// Generates the corpus under `dir`: wav/, feats/ (CPT1 float32 log-mel),
/// feats.index, trials.txt and manifest.json. Throws Error when the
/// nearest-centroid sanity check falls to 80% or below.
inline CorpusManifest build_corpus(const SynthConfig& cfg, const FbankConfig& fbank, const std::filesystem::path& dir,
                                   std::size_t jobs = 1) {
  cfg.validate();
  fbank.validate(kSynthSampleRate);
  namespace fs = std::filesystem;
  fs::create_directories(dir / "wav");
  fs::create_directories(dir / "feats");

  CorpusManifest m;
  m.root = dir;
  m.seed = cfg.seed;
  const std::size_t n_spk = cfg.n_train_speakers + cfg.n_trial_speakers;
  m.speakers = sample_speakers(n_spk, derive_seed(cfg.seed, 1));
  for (std::size_t s = 0; s < n_spk; ++s) m.speaker_splits.push_back(s < cfg.n_train_speakers ? "train" : "trial");

  for (std::size_t s = 0; s < n_spk; ++s)
    for (std::size_t u = 0; u < cfg.utts_per_speaker; ++u) {
      CorpusUtterance e;
      char suffix[32];
      std::snprintf(suffix, sizeof suffix, "-u%03zu", u);
      e.id = m.speakers[s].id + suffix;
      e.speaker = m.speakers[s].id;
      e.split = s >= cfg.n_train_speakers ? "trial" : (u < cfg.utts_per_speaker - cfg.heldout_per_speaker ? "train" : "heldout");
      e.wav = "wav/" + e.id + ".wav";
      e.feats = "feats/" + e.id + ".cpt";
      m.utterances.push_back(std::move(e));
    }

  FbankConfig raw = fbank;
  raw.apply_cmn = false;
  std::vector<std::vector<double>> mean_feats(m.utterances.size());
  parallel_for(m.utterances.size(), jobs, [&](std::size_t i) {
    auto& e = m.utterances[i];
    const std::size_t s = i / cfg.utts_per_speaker, u = i % cfg.utts_per_speaker;
    std::mt19937_64 drng(derive_seed(cfg.seed, 2 + s, u));
    const double dur = std::uniform_real_distribution<double>(cfg.min_duration_s, cfg.max_duration_s)(drng);
    const Waveform w = quantize_pcm16(generate_utterance(m.speakers[s], dur, cfg.noise_db, derive_seed(cfg.seed, 3 + s, u)));
    write_wav(dir / e.wav, w);
    const auto feats = log_mel<float>(w, fbank, e.id);
    save_tensor(dir / e.feats, feats.frames);
    e.frames = feats.frames.dim(0);
    const auto plain = log_mel<double>(w, raw);
    const std::size_t t = plain.frames.dim(0), d = plain.frames.dim(1);
    mean_feats[i].assign(d, 0.0);
    for (std::size_t r = 0; r < t; ++r)
      for (std::size_t j = 0; j < d; ++j) mean_feats[i][j] += plain.frames[r * d + j] / static_cast<double>(t);
  });

  std::vector<std::size_t> labels(m.utterances.size());
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = i / cfg.utts_per_speaker;
  m.nearest_centroid_accuracy = nearest_centroid_accuracy(mean_feats, labels);

  {
    std::ofstream idx(dir / "feats.index");
    for (const auto& e : m.utterances) idx << e.id << ' ' << e.feats << '\n';
    if (!idx) throw IoError("cannot write " + (dir / "feats.index").string());
  }
  std::vector<std::string> trial_ids, trial_spk;
  for (const auto& e : m.utterances)
    if (e.split == "trial") trial_ids.push_back(e.id), trial_spk.push_back(e.speaker);
  write_trials(dir / m.trials,
               make_trials(trial_ids, trial_spk, cfg.n_target_trials, cfg.n_nontarget_trials, derive_seed(cfg.seed, 4)));
  {
    std::ofstream os(dir / "manifest.json");
    os << to_json(m).dump(2) << '\n';
    if (!os) throw IoError("cannot write " + (dir / "manifest.json").string());
  }
  if (m.nearest_centroid_accuracy <= kCentroidAccuracyFloor)
    throw Error("synthetic corpus sanity check failed: nearest-centroid accuracy " +
                std::to_string(m.nearest_centroid_accuracy) + " is not above 0.8");
  return m;
}

}  // namespace corrpool
