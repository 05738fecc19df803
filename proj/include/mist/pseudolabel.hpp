#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "mist/config.hpp"
#include "mist/error.hpp"
#include "mist/formats.hpp"
#include "mist/manifest.hpp"
#include "mist/milgen.hpp"

namespace mist {

// Soft clip-level pseudo labels for one video.
struct PseudoLabelSeries {
  std::string video_id;
  std::vector<double> labels;  // in [0,1]
  std::string generator_checkpoint;
  int64_t k = 0;
  bool degenerate = false;  // constant raw scores: labels forced to zero
};

// Moving-average smoothing over the window [i-k, i+k], truncated at the
// series boundaries and normalized by the actual window length.
inline std::vector<double> smooth(const std::vector<double>& scores, int64_t k) {
  if (scores.empty()) throw ValidationError("smooth: empty score series");
  if (k < 0) throw ValidationError("smooth: k must be >= 0");
  if (k == 0) return scores;
  const int64_t n = static_cast<int64_t>(scores.size());
  std::vector<double> out(scores.size());
  for (int64_t i = 0; i < n; ++i) {
    const int64_t lo = std::max<int64_t>(0, i - k);
    const int64_t hi = std::min<int64_t>(n - 1, i + k);
    double sum = 0.0;
    for (int64_t j = lo; j <= hi; ++j) sum += scores[static_cast<size_t>(j)];
    out[static_cast<size_t>(i)] = sum / static_cast<double>(hi - lo + 1);
  }
  return out;
}

inline constexpr double kMinMaxDegenerateRange = 1e-8;

// Min-max normalization to [0,1]. A (near-)constant series carries no
// ranking information, so it maps to all zeros with the degenerate flag
// set rather than fabricating confident labels.
inline std::pair<std::vector<double>, bool> minmax(const std::vector<double>& scores) {
  if (scores.empty()) throw ValidationError("minmax: empty score series");
  const auto [mn_it, mx_it] = std::minmax_element(scores.begin(), scores.end());
  const double mn = *mn_it, mx = *mx_it;
  std::vector<double> out(scores.size());
  if (mx - mn < kMinMaxDegenerateRange) {
    std::fill(out.begin(), out.end(), 0.0);
    return {out, true};
  }
  // Direct division so the extremes map to exactly 0 and 1.
  const double range = mx - mn;
  for (size_t i = 0; i < scores.size(); ++i) out[i] = (scores[i] - mn) / range;
  return {out, false};
}

inline PseudoLabelSeries refine_scores(const ScoreSeries& raw, int64_t k,
                                       const std::string& checkpoint_id) {
  PseudoLabelSeries out;
  out.video_id = raw.video_id;
  out.generator_checkpoint = checkpoint_id;
  out.k = k;
  auto [labels, degenerate] = minmax(smooth(raw.scores, k));
  out.labels = std::move(labels);
  out.degenerate = degenerate;
  return out;
}

// ---------------------------------------------------------------------------
// Pseudo-label files: MISTSCOR payload + JSON sidecar.
// ---------------------------------------------------------------------------

inline std::string pseudo_label_path(const std::string& dir, const std::string& video_id) {
  return (std::filesystem::path(dir) / (video_id + ".plabel")).string();
}

inline void write_pseudo_labels(const PseudoLabelSeries& pl, const std::string& dir) {
  ScoreSeries s;
  s.video_id = pl.video_id;
  s.scores = pl.labels;
  const std::string path = pseudo_label_path(dir, pl.video_id);
  write_score_file(s, path);
  nlohmann::ordered_json side;
  side["generator_checkpoint"] = pl.generator_checkpoint;
  side["k"] = pl.k;
  side["degenerate"] = pl.degenerate;
  std::ofstream out(path + ".json");
  if (!out) throw IoError("cannot write pseudo-label sidecar: " + path + ".json");
  out << side.dump(2) << "\n";
}

inline PseudoLabelSeries read_pseudo_labels(const std::string& dir, const std::string& video_id) {
  const std::string path = pseudo_label_path(dir, video_id);
  if (!std::filesystem::exists(path))
    throw IoError("missing pseudo-label file for video '" + video_id + "': " + path);
  ScoreSeries s = read_score_file(path, video_id);
  PseudoLabelSeries pl;
  pl.video_id = video_id;
  pl.labels = std::move(s.scores);
  std::ifstream in(path + ".json");
  if (in) {
    nlohmann::json side;
    try {
      in >> side;
      pl.generator_checkpoint = side.value("generator_checkpoint", "");
      pl.k = side.value("k", int64_t{0});
      pl.degenerate = side.value("degenerate", false);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("pseudo-label sidecar " + path + ".json: " + e.what());
    }
  }
  return pl;
}

// ---------------------------------------------------------------------------
// Stage-I output: labels for every training video.
// ---------------------------------------------------------------------------

struct PseudoLabelRun {
  std::map<std::string, PseudoLabelSeries> labels;  // all training videos
  std::vector<std::string> degenerate_videos;
};

// Scores each abnormal training video with the generator and refines the
// scores into soft labels; normal training videos get all-zero labels
// (their clip-level labels are known) without touching the generator.
inline PseudoLabelRun generate_pseudo_labels(const GeneratorParams& params,
                                             const Manifest& manifest, const HyperParams& hp,
                                             const std::string& checkpoint_id,
                                             const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  PseudoLabelRun run;
  for (const auto& v : manifest.videos) {
    if (v.split != Split::train) continue;
    PseudoLabelSeries pl;
    if (v.label == 1) {
      FeatureSequence seq = read_feature_file(v.feature_path, v.video_id);
      if (seq.num_clips() != v.num_clips)
        throw ValidationError("video '" + v.video_id + "': feature file clip count mismatch");
      pl = refine_scores(score_video(params, seq), hp.k, checkpoint_id);
      if (pl.degenerate) run.degenerate_videos.push_back(v.video_id);
    } else {
      pl.video_id = v.video_id;
      pl.labels.assign(static_cast<size_t>(v.num_clips), 0.0);
      pl.generator_checkpoint = checkpoint_id;
      pl.k = hp.k;
    }
    write_pseudo_labels(pl, out_dir);
    run.labels.emplace(pl.video_id, std::move(pl));
  }
  return run;
}

}  // namespace mist
