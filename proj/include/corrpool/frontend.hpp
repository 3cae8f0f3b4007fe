// corrpool/frontend.hpp

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

// Log-mel filterbank features: Hann-windowed frames, power spectrum,
// triangular mel filters, natural log with a floor, and optional
// per-utterance mean normalization. No pre-emphasis, no dithering.

#pragma once

#include <bit>
#include <complex>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>

#include <unsupported/Eigen/FFT>

#include "corrpool/tensor.hpp"

namespace corrpool {

struct Waveform {
  std::vector<double> samples;
  double sample_rate = 16000.0;

  double duration() const { return static_cast<double>(samples.size()) / sample_rate; }
};

struct FbankConfig {
  std::size_t n_mels = 80;
  double win_ms = 25.0;
  double hop_ms = 10.0;
  double fmin = 20.0;
  double fmax = 7600.0;
  double floor = 1e-10;
  bool apply_cmn = true;

  void validate(double sample_rate) const {
    if (!(sample_rate > 0)) throw ConfigError("sample rate must be positive");
    if (n_mels < 2) throw ConfigError("fbank.n_mels must be >= 2");
    if (!(fmin >= 0 && fmin < fmax && fmax <= sample_rate / 2))
      throw ConfigError("fbank: need 0 <= fmin < fmax <= sample_rate / 2");
    if (!(win_ms > 0 && hop_ms > 0)) throw ConfigError("fbank: window and hop must be positive");
    if (!(floor > 0)) throw ConfigError("fbank.floor must be positive");
  }
  std::size_t win_samples(double sr) const { return static_cast<std::size_t>(std::lround(win_ms * 1e-3 * sr)); }
  std::size_t hop_samples(double sr) const { return static_cast<std::size_t>(std::lround(hop_ms * 1e-3 * sr)); }
  std::size_t n_fft(double sr) const { return std::bit_ceil(win_samples(sr)); }

  /// floor((n - win) / hop) + 1, or 0 when shorter than one window.
  std::size_t num_frames(std::size_t n_samples, double sr) const {
    const std::size_t win = win_samples(sr);
    return n_samples < win ? 0 : (n_samples - win) / hop_samples(sr) + 1;
  }
};

template <Real T>
struct FeatureMatrix {
  std::string id;
  Tensor<T> frames;  // [T_i, n_mels]
};

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

/// Per-frame |FFT|^2 of Hann-windowed frames; [T_i, n_fft / 2 + 1].
inline Tensor<double> stft_power(const Waveform& w, const FbankConfig& cfg) {
  cfg.validate(w.sample_rate);
  const std::size_t win = cfg.win_samples(w.sample_rate), hop = cfg.hop_samples(w.sample_rate);
  const std::size_t nfft = cfg.n_fft(w.sample_rate), nbins = nfft / 2 + 1;
  const std::size_t frames = cfg.num_frames(w.samples.size(), w.sample_rate);
  if (frames == 0)
    throw ConfigError("utterance of " + std::to_string(w.samples.size()) +
                      " samples is shorter than one analysis window (" + std::to_string(win) + ")");
  std::vector<double> window(win);
  for (std::size_t i = 0; i < win; ++i)
    window[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(win));

  Eigen::FFT<double> fft;
  std::vector<double> buf(nfft, 0.0);
  std::vector<std::complex<double>> spec;
  Tensor<double> out(Shape{frames, nbins});
  for (std::size_t t = 0; t < frames; ++t) {
    std::fill(buf.begin(), buf.end(), 0.0);
    for (std::size_t i = 0; i < win; ++i) buf[i] = w.samples[t * hop + i] * window[i];
    fft.fwd(spec, buf);
    for (std::size_t k = 0; k < nbins; ++k) out[t * nbins + k] = std::norm(spec[k]);
  }
  return out;
}

/// Triangular filters [n_fft / 2 + 1, n_mels] with centers equally spaced on
/// the mel scale between fmin and fmax; each column is scaled to peak at 1.
inline Tensor<double> mel_matrix(const FbankConfig& cfg, std::size_t n_fft, double sample_rate) {
  cfg.validate(sample_rate);
  const std::size_t nbins = n_fft / 2 + 1, m = cfg.n_mels;
  const double lo = hz_to_mel(cfg.fmin), hi = hz_to_mel(cfg.fmax);
  std::vector<double> edges(m + 2);
  for (std::size_t i = 0; i < m + 2; ++i)
    edges[i] = mel_to_hz(lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(m + 1));
  Tensor<double> out(Shape{nbins, m});
  for (std::size_t j = 0; j < m; ++j) {
    const double l = edges[j], c = edges[j + 1], r = edges[j + 2];
    double peak = 0.0;
    for (std::size_t k = 0; k < nbins; ++k) {
      const double f = static_cast<double>(k) * sample_rate / static_cast<double>(n_fft);
      double v = 0.0;
      if (f > l && f <= c) v = (f - l) / (c - l);
      else if (f > c && f < r) v = (r - f) / (r - c);
      out[k * m + j] = v;
      peak = std::max(peak, v);
    }
    if (peak <= 0.0)
      throw ConfigError("mel filter " + std::to_string(j) + " covers no FFT bin; n_mels=" +
                        std::to_string(m) + " is too large for n_fft=" + std::to_string(n_fft));
    for (std::size_t k = 0; k < nbins; ++k) out[k * m + j] /= peak;
  }
  return out;
}

/// Center frequency (Hz) of each mel filter.
inline std::vector<double> mel_centers(const FbankConfig& cfg) {
  const double lo = hz_to_mel(cfg.fmin), hi = hz_to_mel(cfg.fmax);
  std::vector<double> c(cfg.n_mels);
  for (std::size_t j = 0; j < cfg.n_mels; ++j)
    c[j] = mel_to_hz(lo + (hi - lo) * static_cast<double>(j + 1) / static_cast<double>(cfg.n_mels + 1));
  return c;
}

/// log(max(power * mel, floor)), then per-dimension mean removal if
/// cfg.apply_cmn. Output [T_i, n_mels].
template <Real T = float>
FeatureMatrix<T> log_mel(const Waveform& w, const FbankConfig& cfg, std::string id = {}) {
  const Tensor<double> power = stft_power(w, cfg);
  const std::size_t nfft = cfg.n_fft(w.sample_rate);
  const Tensor<double> mel = mel_matrix(cfg, nfft, w.sample_rate);
  const std::size_t frames = power.dim(0), nbins = power.dim(1), m = cfg.n_mels;
  std::vector<double> feats(frames * m, 0.0);
  for (std::size_t t = 0; t < frames; ++t)
    for (std::size_t k = 0; k < nbins; ++k) {
      const double p = power[t * nbins + k];
      if (p == 0.0) continue;
      for (std::size_t j = 0; j < m; ++j) feats[t * m + j] += p * mel[k * m + j];
    }
  for (auto& v : feats) v = std::log(std::max(v, cfg.floor));
  if (cfg.apply_cmn) {
    for (std::size_t j = 0; j < m; ++j) {
      double mu = 0.0;
      for (std::size_t t = 0; t < frames; ++t) mu += feats[t * m + j];
      mu /= static_cast<double>(frames);
      for (std::size_t t = 0; t < frames; ++t) feats[t * m + j] -= mu;
    }
  }
  return {std::move(id), Tensor<T>(Shape{frames, m}, std::vector<T>(feats.begin(), feats.end()))};
}

// ---------------------------------------------------------------------------
// Mono 16-bit PCM WAV.

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
inline void put_u16(std::ostream& os, std::uint16_t v) { os.write(reinterpret_cast<const char*>(&v), 2); }

}  // namespace detail

/// Samples are clipped to [-1, 1] and rounded to 16-bit integers.
inline void write_wav(const std::filesystem::path& path, const Waveform& w) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  const auto n = static_cast<std::uint32_t>(w.samples.size());
  const auto sr = static_cast<std::uint32_t>(std::lround(w.sample_rate));
  os.write("RIFF", 4);
  detail::put_u32(os, 36 + 2 * n);
  os.write("WAVEfmt ", 8);
  detail::put_u32(os, 16);
  detail::put_u16(os, 1);  // PCM
  detail::put_u16(os, 1);  // mono
  detail::put_u32(os, sr);
  detail::put_u32(os, sr * 2);
  detail::put_u16(os, 2);
  detail::put_u16(os, 16);
  os.write("data", 4);
  detail::put_u32(os, 2 * n);
  for (double s : w.samples) {
    const double c = std::clamp(s, -1.0, 1.0);
    const auto q = static_cast<std::int16_t>(std::lround(c * 32767.0));
    os.write(reinterpret_cast<const char*>(&q), 2);
  }
  if (!os) throw IoError("failed writing " + path.string());
}

/// The waveform a 16-bit round trip would produce.
inline Waveform quantize_pcm16(const Waveform& w) {
  Waveform q = w;
  for (auto& s : q.samples) s = static_cast<double>(std::lround(std::clamp(s, -1.0, 1.0) * 32767.0)) / 32767.0;
  return q;
}

inline Waveform read_wav(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  auto u32 = [&] { std::uint32_t v = 0; is.read(reinterpret_cast<char*>(&v), 4); return v; };
  auto u16 = [&] { std::uint16_t v = 0; is.read(reinterpret_cast<char*>(&v), 2); return v; };
  char tag[4];
  is.read(tag, 4);
  if (!is || std::string(tag, 4) != "RIFF") throw IoError(path.string() + ": not a RIFF file");
  u32();
  is.read(tag, 4);
  if (!is || std::string(tag, 4) != "WAVE") throw IoError(path.string() + ": not a WAVE file");
  Waveform w;
  bool have_fmt = false;
  while (is.read(tag, 4)) {
    const std::string id(tag, 4);
    const std::uint32_t size = u32();
    if (id == "fmt ") {
      const std::uint16_t format = u16(), channels = u16();
      w.sample_rate = u32();
      u32();
      u16();
      const std::uint16_t bits = u16();
      if (format != 1 || channels != 1 || bits != 16)
        throw IoError(path.string() + ": only mono 16-bit PCM is supported");
      is.seekg(size - 16, std::ios::cur);
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) throw IoError(path.string() + ": data chunk before fmt chunk");
      std::vector<std::int16_t> raw(size / 2);
      is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size() * 2));
      if (!is) throw IoError(path.string() + ": truncated data chunk");
      w.samples.reserve(raw.size());
      for (std::int16_t s : raw) w.samples.push_back(static_cast<double>(s) / 32767.0);
      return w;
    } else {
      is.seekg(size + (size & 1), std::ios::cur);
    }
  }
  throw IoError(path.string() + ": no data chunk");
}

}  // namespace corrpool
