#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "mist/error.hpp"
#include "mist/formats.hpp"
#include "mist/manifest.hpp"

namespace mist {

// Spreads clip scores to frames: frame f gets the score of clip
// floor(f / frames_per_clip), clamped to the last clip for a trailing
// partial clip. A mismatch of more than one clip is an error.
inline std::vector<double> expand_to_frames(const ScoreSeries& series, int64_t frames_per_clip,
                                            int64_t total_frames) {
  if (frames_per_clip < 1) throw ValidationError("expand_to_frames: frames_per_clip must be >= 1");
  if (total_frames < 1) throw ValidationError("expand_to_frames: total_frames must be >= 1");
  const int64_t n = static_cast<int64_t>(series.scores.size());
  if (n < 1) throw ValidationError("expand_to_frames: empty score series");
  if (total_frames > (n + 1) * frames_per_clip || total_frames <= (n - 1) * frames_per_clip)
    throw ValidationError("expand_to_frames: video '" + series.video_id + "' has " +
                          std::to_string(total_frames) + " frames but " + std::to_string(n) +
                          " clips of " + std::to_string(frames_per_clip) +
                          " frames (off by more than one clip)");
  std::vector<double> frames(static_cast<size_t>(total_frames));
  for (int64_t f = 0; f < total_frames; ++f) {
    const int64_t clip = std::min(f / frames_per_clip, n - 1);
    frames[static_cast<size_t>(f)] = series.scores[static_cast<size_t>(clip)];
  }
  return frames;
}

// Rank-based ROC AUC with ties counted as 1/2 (midranks). Exactly the
// pairwise statistic, at O(n log n).
inline double frame_auc(const std::vector<double>& scores, const std::vector<uint8_t>& labels) {
  if (scores.size() != labels.size())
    throw ValidationError("frame_auc: scores and labels differ in length");
  const size_t n = scores.size();
  size_t pos = 0;
  for (uint8_t l : labels) pos += l ? 1 : 0;
  const size_t neg = n - pos;
  if (pos == 0 || neg == 0)
    throw MetricError("frame_auc: ground truth contains a single class only");

  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return scores[a] < scores[b]; });

  // Midrank sum over positives; tie groups share the average rank.
  double rank_sum_pos = 0.0;
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j + 1);  // ranks are 1-based
    for (size_t t = i; t <= j; ++t)
      if (labels[order[t]]) rank_sum_pos += midrank;
    i = j + 1;
  }
  const double p = static_cast<double>(pos);
  return (rank_sum_pos - p * (p + 1.0) / 2.0) / (p * static_cast<double>(neg));
}

// Independent O(P*N) oracle: mean over all (positive, negative) pairs of
// 1 / 0.5 / 0 for win / tie / loss.
inline double auc_bruteforce(const std::vector<double>& scores,
                             const std::vector<uint8_t>& labels) {
  if (scores.size() != labels.size())
    throw ValidationError("auc_bruteforce: scores and labels differ in length");
  std::vector<double> pos, neg;
  for (size_t i = 0; i < scores.size(); ++i) (labels[i] ? pos : neg).push_back(scores[i]);
  if (pos.empty() || neg.empty())
    throw MetricError("auc_bruteforce: ground truth contains a single class only");
  double wins = 0.0;
  for (double sp : pos)
    for (double sn : neg) {
      if (sp > sn)
        wins += 1.0;
      else if (sp == sn)
        wins += 0.5;
    }
  return wins / (static_cast<double>(pos.size()) * static_cast<double>(neg.size()));
}

// Fraction of ground-truth-normal frames scored at or above threshold.
inline double false_alarm_rate(const std::vector<double>& scores,
                               const std::vector<uint8_t>& labels, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0))
    throw ValidationError("false_alarm_rate: threshold must be in (0,1)");
  if (scores.size() != labels.size())
    throw ValidationError("false_alarm_rate: scores and labels differ in length");
  int64_t normal = 0, alarms = 0;
  for (size_t i = 0; i < scores.size(); ++i) {
    if (labels[i]) continue;
    ++normal;
    if (scores[i] >= threshold) ++alarms;
  }
  if (normal == 0) throw MetricError("false_alarm_rate: no normal frames in the selection");
  return static_cast<double>(alarms) / static_cast<double>(normal);
}

// Mean score over anomalous frames minus mean over normal frames.
inline double score_gap(const std::vector<double>& scores, const std::vector<uint8_t>& labels) {
  if (scores.size() != labels.size())
    throw ValidationError("score_gap: scores and labels differ in length");
  double sum_pos = 0.0, sum_neg = 0.0;
  int64_t n_pos = 0, n_neg = 0;
  for (size_t i = 0; i < scores.size(); ++i) {
    if (labels[i]) {
      sum_pos += scores[i];
      ++n_pos;
    } else {
      sum_neg += scores[i];
      ++n_neg;
    }
  }
  if (n_pos == 0 || n_neg == 0)
    throw MetricError("score_gap: ground truth contains a single class only");
  return sum_pos / static_cast<double>(n_pos) - sum_neg / static_cast<double>(n_neg);
}

// ---------------------------------------------------------------------------
// Test-set evaluation report.
// ---------------------------------------------------------------------------

enum class FarSubset { all, normal, abnormal };

inline std::string to_string(FarSubset s) {
  switch (s) {
    case FarSubset::all: return "all";
    case FarSubset::normal: return "normal";
    default: return "abnormal";
  }
}

inline FarSubset far_subset_from_string(const std::string& s) {
  if (s == "all") return FarSubset::all;
  if (s == "normal") return FarSubset::normal;
  if (s == "abnormal") return FarSubset::abnormal;
  throw ValidationError("far subset must be all|normal|abnormal, got '" + s + "'");
}

struct VideoEval {
  std::string video_id;
  int label = 0;
  int64_t frames = 0;
  double mean_score = 0.0;
};

struct EvalReport {
  double frame_auc = 0.0;
  double far = 0.0;
  double score_gap = 0.0;
  double far_threshold = 0.5;
  FarSubset far_subset = FarSubset::all;
  int64_t num_videos = 0;
  int64_t num_frames = 0;
  std::vector<VideoEval> per_video;
};

// Pools frame scores of the test split (micro-ROC) and computes the
// headline metrics. Scores are read per video from `scores` keyed by
// video_id.
inline EvalReport evaluate_scores(const Manifest& manifest, const GroundTruthMap& gt,
                                  const std::map<std::string, ScoreSeries>& scores,
                                  double far_threshold, FarSubset far_subset = FarSubset::all) {
  std::vector<double> pooled_scores;
  std::vector<uint8_t> pooled_labels;
  std::vector<double> far_scores;
  std::vector<uint8_t> far_labels;
  EvalReport rep;
  rep.far_threshold = far_threshold;
  rep.far_subset = far_subset;

  for (const auto& v : manifest.videos) {
    if (v.split != Split::test) continue;
    auto sit = scores.find(v.video_id);
    if (sit == scores.end())
      throw IoError("no scores for test video '" + v.video_id + "'");
    auto git = gt.find(v.video_id);
    if (git == gt.end())
      throw ValidationError("no ground truth for test video '" + v.video_id + "'");
    const FrameGroundTruth& g = git->second;
    if (static_cast<int64_t>(sit->second.scores.size()) != v.num_clips)
      throw ValidationError("video '" + v.video_id + "': score series has " +
                            std::to_string(sit->second.scores.size()) + " clips, manifest says " +
                            std::to_string(v.num_clips));
    std::vector<double> frames = expand_to_frames(sit->second, v.frames_per_clip, g.total_frames);

    VideoEval ve;
    ve.video_id = v.video_id;
    ve.label = v.label;
    ve.frames = g.total_frames;
    double sum = 0.0;
    for (int64_t f = 0; f < g.total_frames; ++f) {
      const double s = frames[static_cast<size_t>(f)];
      const uint8_t y = g.frame_is_anomalous(f) ? 1 : 0;
      pooled_scores.push_back(s);
      pooled_labels.push_back(y);
      const bool in_far = far_subset == FarSubset::all ||
                          (far_subset == FarSubset::normal && v.label == 0) ||
                          (far_subset == FarSubset::abnormal && v.label == 1);
      if (in_far) {
        far_scores.push_back(s);
        far_labels.push_back(y);
      }
      sum += s;
    }
    ve.mean_score = sum / static_cast<double>(g.total_frames);
    rep.per_video.push_back(std::move(ve));
    ++rep.num_videos;
    rep.num_frames += g.total_frames;
  }

  if (rep.num_videos == 0) throw ValidationError("evaluate_scores: no test videos in manifest");
  rep.frame_auc = frame_auc(pooled_scores, pooled_labels);
  rep.far = false_alarm_rate(far_scores, far_labels, far_threshold);
  rep.score_gap = score_gap(pooled_scores, pooled_labels);
  return rep;
}

inline nlohmann::ordered_json eval_report_to_json(const EvalReport& rep) {
  nlohmann::ordered_json j;
  j["frame_auc"] = rep.frame_auc;
  j["far"] = rep.far;
  j["score_gap"] = rep.score_gap;
  j["far_threshold"] = rep.far_threshold;
  j["far_subset"] = to_string(rep.far_subset);
  j["num_videos"] = rep.num_videos;
  j["num_frames"] = rep.num_frames;
  nlohmann::ordered_json per = nlohmann::ordered_json::array();
  for (const auto& v : rep.per_video) {
    nlohmann::ordered_json e;
    e["video_id"] = v.video_id;
    e["label"] = v.label;
    e["frames"] = v.frames;
    e["mean_score"] = v.mean_score;
    per.push_back(std::move(e));
  }
  j["per_video"] = std::move(per);
  return j;
}

inline void write_eval_report(const EvalReport& rep, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write eval report: " + path);
  out << eval_report_to_json(rep).dump(2) << "\n";
}

// Clip-level labels derived from frame ground truth: a clip is anomalous
// iff its frame span intersects an anomalous interval.
inline std::vector<uint8_t> clip_labels_from_gt(const FrameGroundTruth& gt, int64_t num_clips,
                                                int64_t frames_per_clip) {
  std::vector<uint8_t> labels(static_cast<size_t>(num_clips), 0);
  for (int64_t c = 0; c < num_clips; ++c) {
    const int64_t lo = c * frames_per_clip;
    const int64_t hi = std::min((c + 1) * frames_per_clip, gt.total_frames);
    for (const auto& [s, e] : gt.intervals)
      if (s < hi && e > lo) {
        labels[static_cast<size_t>(c)] = 1;
        break;
      }
  }
  return labels;
}

}  // namespace mist
