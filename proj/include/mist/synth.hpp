#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mist/error.hpp"
#include "mist/formats.hpp"
#include "mist/manifest.hpp"
#include "mist/rng.hpp"

namespace mist {

// Desk-scale stand-in for feature extraction: normal clips are unit
// Gaussian noise; each abnormal video carries one contiguous span of
// clips whose mean is shifted by anomaly_shift along the all-ones
// direction. Raw pixel clips carry the same planted span as a shifted
// patch so Stage II has something to learn from.
struct SynthSpec {
  int64_t num_normal = 20;    // per split
  int64_t num_abnormal = 20;  // per split
  int64_t clips_min = 16;
  int64_t clips_max = 32;
  int64_t feature_dim = 64;
  double anomaly_shift = 2.0;
  int64_t anomaly_min_len = 3;
  int64_t anomaly_max_len = 6;
  int64_t frames_per_clip = 16;
  int64_t clip_height = 16;
  int64_t clip_width = 16;
  bool emit_clips = true;
};

struct SynthResult {
  std::string manifest_path;
  std::string ground_truth_path;
  Manifest manifest;
  GroundTruthMap ground_truth;
};

inline void validate(const SynthSpec& s) {
  auto fail = [](const std::string& why) { throw ValidationError("synth spec: " + why); };
  if (s.num_normal < 0 || s.num_abnormal < 0) fail("video counts must be >= 0");
  if (s.num_normal + s.num_abnormal < 1) fail("at least one video required");
  if (s.clips_min < 1) fail("clips_min must be >= 1");
  if (s.clips_min > s.clips_max) fail("clips_min must be <= clips_max");
  if (s.feature_dim < 1) fail("feature_dim must be >= 1");
  if (!(s.anomaly_shift > 0.0)) fail("anomaly_shift must be > 0");
  if (s.anomaly_min_len < 1) fail("anomaly_min_len must be >= 1");
  if (s.anomaly_min_len > s.anomaly_max_len) fail("anomaly_min_len must be <= anomaly_max_len");
  if (s.anomaly_max_len > s.clips_min)
    fail("anomaly_max_len must be <= clips_min so every video can hold the span");
  if (s.frames_per_clip < 1) fail("frames_per_clip must be >= 1");
  if (s.clip_height < 2 || s.clip_width < 2) fail("clip dimensions must be >= 2");
}

namespace detail {

struct PlantedSpan {
  int64_t start = 0;  // clip index
  int64_t len = 0;    // 0 means no anomaly
};

inline void synth_one_video(const SynthSpec& spec, const std::string& video_id, int label,
                            Split split, const std::string& out_dir, Rng rng, Manifest& manifest,
                            GroundTruthMap& gt) {
  const int64_t n_clips = rng.uniform_int(spec.clips_min, spec.clips_max);
  PlantedSpan span;
  if (label == 1) {
    span.len = rng.uniform_int(spec.anomaly_min_len, spec.anomaly_max_len);
    span.start = rng.uniform_int(0, n_clips - span.len);
  }

  FeatureSequence seq;
  seq.video_id = video_id;
  seq.data = Tensor({n_clips, spec.feature_dim});
  for (int64_t i = 0; i < n_clips; ++i) {
    const bool anomalous = label == 1 && i >= span.start && i < span.start + span.len;
    double* row = seq.data.data() + i * spec.feature_dim;
    for (int64_t d = 0; d < spec.feature_dim; ++d)
      row[d] = rng.normal() + (anomalous ? spec.anomaly_shift : 0.0);
  }
  const auto feat_path = std::filesystem::path(out_dir) / "features" / (video_id + ".feat");
  write_feature_file(seq, feat_path.string());

  std::string clip_path;
  if (spec.emit_clips) {
    const int64_t h = spec.clip_height, w = spec.clip_width, f = spec.frames_per_clip;
    ClipVolume vol;
    vol.video_id = video_id;
    vol.data = Tensor({n_clips, 1, f, h, w});
    // One static bright patch per video; anomalous clips shift it.
    const int64_t ph = h / 2, pw = w / 2;
    const int64_t py = rng.uniform_int(0, h - ph);
    const int64_t px = rng.uniform_int(0, w - pw);
    for (int64_t i = 0; i < n_clips; ++i) {
      const bool anomalous = label == 1 && i >= span.start && i < span.start + span.len;
      double* clip = vol.data.data() + i * f * h * w;
      for (int64_t t = 0; t < f; ++t)
        for (int64_t y = 0; y < h; ++y)
          for (int64_t x = 0; x < w; ++x) {
            double v = rng.normal();
            if (anomalous && y >= py && y < py + ph && x >= px && x < px + pw)
              v += spec.anomaly_shift;
            clip[(t * h + y) * w + x] = v;
          }
    }
    const auto cp = std::filesystem::path(out_dir) / "clips" / (video_id + ".clip");
    write_clip_file(vol, cp.string());
    clip_path = cp.string();
  }

  VideoRecord rec;
  rec.video_id = video_id;
  rec.label = label;
  rec.split = split;
  rec.num_clips = n_clips;
  rec.frames_per_clip = spec.frames_per_clip;
  rec.feature_path = feat_path.string();
  rec.clip_path = clip_path;
  manifest.videos.push_back(std::move(rec));

  FrameGroundTruth g;
  g.video_id = video_id;
  g.total_frames = n_clips * spec.frames_per_clip;
  if (span.len > 0)
    g.intervals.emplace_back(span.start * spec.frames_per_clip,
                             (span.start + span.len) * spec.frames_per_clip);
  gt.emplace(video_id, std::move(g));
}

}  // namespace detail

// Generates both a train and a test split, each with num_normal +
// num_abnormal videos. Deterministic: every video draws from its own
// stream keyed by (seed, video_id).
inline SynthResult synth_dataset(const SynthSpec& spec, uint64_t seed,
                                 const std::string& out_dir) {
  validate(spec);
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(out_dir) / "features");
  if (spec.emit_clips) fs::create_directories(fs::path(out_dir) / "clips");

  Rng root(seed);
  SynthResult result;
  char idbuf[64];
  for (Split split : {Split::train, Split::test}) {
    for (int label : {0, 1}) {
      const int64_t count = label == 0 ? spec.num_normal : spec.num_abnormal;
      for (int64_t i = 0; i < count; ++i) {
        std::snprintf(idbuf, sizeof idbuf, "%s_%s_%03lld", to_string(split).c_str(),
                      label == 0 ? "normal" : "abnormal", static_cast<long long>(i));
        const std::string video_id = idbuf;
        detail::synth_one_video(spec, video_id, label, split, out_dir,
                                root.fork("synth/" + video_id), result.manifest,
                                result.ground_truth);
      }
    }
  }

  result.manifest_path = (fs::path(out_dir) / "manifest.json").string();
  result.ground_truth_path = (fs::path(out_dir) / "gt.json").string();
  write_manifest(result.manifest, result.manifest_path);
  write_ground_truth(result.ground_truth, result.ground_truth_path);
  return result;
}

}  // namespace mist
