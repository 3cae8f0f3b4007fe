// corrpool/eval.hpp

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

// Verification trials, cosine scoring and detection metrics.
//
// A trial is accepted when score >= threshold. Operating points are taken at
// every distinct score value plus one threshold above the largest score
// (reject everything), so n distinct scores give n + 1 points ordered by
// increasing threshold: P_miss rises from 0 to 1 while P_fa falls from 1 to 0.

#pragma once

#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <span>

#include <nlohmann/json.hpp>

#include "corrpool/tensor.hpp"

namespace corrpool {

struct Trial {
  std::string enrol_id;
  std::string test_id;
  bool target = false;
};

struct ScoredTrial {
  Trial trial;
  double score = 0.0;
};

using ScoreSet = std::vector<ScoredTrial>;

struct DcfParams {
  double p_target = 0.05;
  double c_miss = 1.0;
  double c_fa = 1.0;

  void validate() const {
    if (!(p_target > 0.0 && p_target < 1.0)) throw ConfigError("dcf.p_target must be in (0, 1)");
    if (!(c_miss > 0.0 && c_fa > 0.0)) throw ConfigError("dcf costs must be positive");
  }
};

struct OperatingPoint {
  double threshold = 0.0;
  double p_fa = 0.0;
  double p_miss = 0.0;
};

struct EerResult {
  double eer = 0.0;
  double threshold = 0.0;
};

struct DcfResult {
  double min_dcf = 0.0;
  double threshold = 0.0;
};

/// dot(a, b) / (|a| |b|), with norms floored at 1e-12.
template <typename T>
double cosine_score(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size())
    throw ShapeError("cosine_score: length " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  return dot / (std::max(std::sqrt(na), 1e-12) * std::max(std::sqrt(nb), 1e-12));
}

/// DET staircase over all thresholds; see the file comment for ordering.
inline std::vector<OperatingPoint> det_points(const ScoreSet& scores) {
  std::vector<std::pair<double, bool>> sorted;
  sorted.reserve(scores.size());
  std::size_t n_tgt = 0;
  for (const auto& s : scores) {
    if (!std::isfinite(s.score)) throw ConfigError("non-finite score for trial " + s.trial.enrol_id + " " + s.trial.test_id);
    sorted.emplace_back(s.score, s.trial.target);
    n_tgt += s.trial.target;
  }
  const std::size_t n_non = scores.size() - n_tgt;
  if (n_tgt == 0 || n_non == 0)
    throw ConfigError("detection metrics need at least one target and one nontarget trial");
  std::sort(sorted.begin(), sorted.end());

  std::vector<OperatingPoint> pts;
  std::size_t tgt_below = 0, non_below = 0;
  for (std::size_t i = 0; i < sorted.size();) {
    const double v = sorted[i].first;
    pts.push_back({v, static_cast<double>(n_non - non_below) / static_cast<double>(n_non),
                   static_cast<double>(tgt_below) / static_cast<double>(n_tgt)});
    for (; i < sorted.size() && sorted[i].first == v; ++i) (sorted[i].second ? tgt_below : non_below)++;
  }
  pts.push_back({std::nextafter(sorted.back().first, std::numeric_limits<double>::infinity()), 0.0, 1.0});
  return pts;
}

/// Equal error rate by linear interpolation between the two adjacent
/// operating points where P_miss - P_fa changes sign. The returned threshold
/// is that of the bracketing point closer to equality.
inline EerResult compute_eer(const ScoreSet& scores) {
  const auto pts = det_points(scores);
  for (std::size_t i = 1; i < pts.size(); ++i) {
    const double d = pts[i].p_miss - pts[i].p_fa;
    if (d < 0.0) continue;
    if (d == 0.0) return {pts[i].p_miss, pts[i].threshold};
    const double dp = pts[i - 1].p_miss - pts[i - 1].p_fa;
    const double alpha = -dp / (d - dp);
    const double eer = pts[i - 1].p_miss + alpha * (pts[i].p_miss - pts[i - 1].p_miss);
    return {eer, (-dp <= d) ? pts[i - 1].threshold : pts[i].threshold};
  }
  return {pts.back().p_miss, pts.back().threshold};  // unreachable: last point has d = 1
}

/// Minimum normalized detection cost
///   (c_miss p P_miss + c_fa (1 - p) P_fa) / min(c_miss p, c_fa (1 - p))
/// over all operating points; the lowest threshold wins ties.
inline DcfResult compute_min_dcf(const ScoreSet& scores, const DcfParams& params = {}) {
  params.validate();
  const auto pts = det_points(scores);
  const double wm = params.c_miss * params.p_target, wf = params.c_fa * (1.0 - params.p_target);
  const double norm = std::min(wm, wf);
  DcfResult best{std::numeric_limits<double>::infinity(), 0.0};
  for (const auto& p : pts) {
    const double c = (wm * p.p_miss + wf * p.p_fa) / norm;
    if (c < best.min_dcf) best = {c, p.threshold};
  }
  return best;
}

// ---------------------------------------------------------------------------
// File formats.

/// Trial list: one "label enrol_id test_id" per line, label target|nontarget.
inline std::vector<Trial> read_trials(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open trial list " + path.string());
  std::vector<Trial> trials;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::istringstream ls(line);
    std::string label, enrol, test, extra;
    if (!(ls >> label)) continue;
    if (!(ls >> enrol >> test) || (ls >> extra))
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": expected 'label enrol_id test_id'");
    if (label != "target" && label != "nontarget")
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": label must be target or nontarget");
    trials.push_back({enrol, test, label == "target"});
  }
  return trials;
}

inline void write_trials(const std::filesystem::path& path, const std::vector<Trial>& trials) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  for (const auto& t : trials) os << (t.target ? "target" : "nontarget") << ' ' << t.enrol_id << ' ' << t.test_id << '\n';
}

/// Score file: one "enrol_id test_id score" per line.
inline void write_scores(const std::filesystem::path& path, const ScoreSet& scores) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os.precision(17);
  for (const auto& s : scores) os << s.trial.enrol_id << ' ' << s.trial.test_id << ' ' << s.score << '\n';
}

/// Joins a score file with trial labels. Every trial must have a score.
inline ScoreSet read_scores(const std::filesystem::path& path, const std::vector<Trial>& trials) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open score file " + path.string());
  std::map<std::pair<std::string, std::string>, double> by_pair;
  std::string enrol, test, line;
  while (std::getline(is, line)) {
    std::istringstream ls(line);
    double score = 0;
    if (!(ls >> enrol)) continue;
    if (!(ls >> test >> score)) throw ConfigError(path.string() + ": malformed line '" + line + "'");
    by_pair[{enrol, test}] = score;
  }
  ScoreSet out;
  for (const auto& t : trials) {
    auto it = by_pair.find({t.enrol_id, t.test_id});
    if (it == by_pair.end()) throw ConfigError("no score for trial " + t.enrol_id + " " + t.test_id);
    out.push_back({t, it->second});
  }
  return out;
}

inline nlohmann::json metrics_report(const ScoreSet& scores, const DcfParams& params) {
  const auto eer = compute_eer(scores);
  const auto dcf = compute_min_dcf(scores, params);
  nlohmann::json det = nlohmann::json::array();
  for (const auto& p : det_points(scores)) det.push_back({p.p_fa, p.p_miss});
  std::size_t n_tgt = 0;
  for (const auto& s : scores) n_tgt += s.trial.target;
  return {{"eer", eer.eer},
          {"eer_threshold", eer.threshold},
          {"min_dcf", dcf.min_dcf},
          {"min_dcf_threshold", dcf.threshold},
          {"dcf_params", {{"p_target", params.p_target}, {"c_miss", params.c_miss}, {"c_fa", params.c_fa}}},
          {"n_target", n_tgt},
          {"n_nontarget", scores.size() - n_tgt},
          {"det", det}};
}

}  // namespace corrpool
