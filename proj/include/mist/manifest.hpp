#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "mist/error.hpp"

namespace mist {

enum class Split { train, test };

inline std::string to_string(Split s) { return s == Split::train ? "train" : "test"; }

inline Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "test") return Split::test;
  throw ValidationError("split must be 'train' or 'test', got '" + s + "'");
}

struct VideoRecord {
  std::string video_id;
  int label = 0;  // bag label Y: 1 = contains an anomaly
  Split split = Split::train;
  int64_t num_clips = 0;
  int64_t frames_per_clip = 0;
  std::string feature_path;  // resolved to an absolute path on load
  std::string clip_path;     // optional; empty if the video has no raw clips
};

struct Manifest {
  std::vector<VideoRecord> videos;

  std::vector<const VideoRecord*> select(Split split, int label) const {
    std::vector<const VideoRecord*> out;
    for (const auto& v : videos)
      if (v.split == split && v.label == label) out.push_back(&v);
    return out;
  }

  std::vector<const VideoRecord*> select(Split split) const {
    std::vector<const VideoRecord*> out;
    for (const auto& v : videos)
      if (v.split == split) out.push_back(&v);
    return out;
  }

  const VideoRecord& by_id(const std::string& id) const {
    for (const auto& v : videos)
      if (v.video_id == id) return v;
    throw ValidationError("manifest has no video '" + id + "'");
  }
};

inline Manifest read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("manifest parse failure in " + path + ": " + e.what());
  }
  if (!j.is_array()) throw ValidationError("manifest root must be a JSON array: " + path);

  const auto base = std::filesystem::path(path).parent_path();
  Manifest m;
  std::set<std::string> seen;
  for (const auto& e : j) {
    if (!e.is_object()) throw ValidationError("manifest entry must be an object: " + path);
    VideoRecord r;
    try {
      r.video_id = e.at("video_id").get<std::string>();
      r.label = e.at("label").get<int>();
      r.split = split_from_string(e.at("split").get<std::string>());
      r.num_clips = e.at("num_clips").get<int64_t>();
      r.frames_per_clip = e.at("frames_per_clip").get<int64_t>();
      r.feature_path = e.at("feature_path").get<std::string>();
      if (e.contains("clip_path")) r.clip_path = e.at("clip_path").get<std::string>();
    } catch (const nlohmann::json::exception& ex) {
      throw ValidationError("manifest entry invalid in " + path + ": " + ex.what());
    }
    if (r.video_id.empty()) throw ValidationError("manifest entry with empty video_id: " + path);
    if (!seen.insert(r.video_id).second)
      throw ValidationError("duplicate video_id '" + r.video_id + "' in manifest " + path);
    if (r.label != 0 && r.label != 1)
      throw ValidationError("video '" + r.video_id + "': label must be 0 or 1");
    if (r.num_clips < 1)
      throw ValidationError("video '" + r.video_id + "': num_clips must be >= 1");
    if (r.frames_per_clip < 1)
      throw ValidationError("video '" + r.video_id + "': frames_per_clip must be >= 1");
    if (r.feature_path.empty())
      throw ValidationError("video '" + r.video_id + "': missing feature_path");
    r.feature_path = (base / r.feature_path).string();
    if (!r.clip_path.empty()) r.clip_path = (base / r.clip_path).string();
    m.videos.push_back(std::move(r));
  }
  return m;
}

// Paths are written relative to the manifest's directory.
inline void write_manifest(const Manifest& m, const std::string& path) {
  const auto base = std::filesystem::path(path).parent_path();
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto& r : m.videos) {
    nlohmann::ordered_json e;
    e["video_id"] = r.video_id;
    e["label"] = r.label;
    e["split"] = to_string(r.split);
    e["num_clips"] = r.num_clips;
    e["frames_per_clip"] = r.frames_per_clip;
    e["feature_path"] = std::filesystem::relative(r.feature_path, base).generic_string();
    if (!r.clip_path.empty())
      e["clip_path"] = std::filesystem::relative(r.clip_path, base).generic_string();
    arr.push_back(std::move(e));
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot write manifest: " + path);
  out << arr.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Frame-level ground truth.
// ---------------------------------------------------------------------------

struct FrameGroundTruth {
  std::string video_id;
  int64_t total_frames = 0;
  std::vector<std::pair<int64_t, int64_t>> intervals;  // [start, end)

  bool operator==(const FrameGroundTruth&) const = default;

  bool frame_is_anomalous(int64_t f) const {
    for (const auto& [s, e] : intervals)
      if (f >= s && f < e) return true;
    return false;
  }

  int64_t anomalous_frames() const {
    int64_t n = 0;
    for (const auto& [s, e] : intervals) n += e - s;
    return n;
  }
};

using GroundTruthMap = std::map<std::string, FrameGroundTruth>;

inline void validate_ground_truth(const FrameGroundTruth& gt) {
  if (gt.total_frames < 1)
    throw ValidationError("ground truth '" + gt.video_id + "': total_frames must be >= 1");
  int64_t prev_end = -1;
  for (const auto& [s, e] : gt.intervals) {
    if (s < 0 || e > gt.total_frames || s >= e)
      throw ValidationError("ground truth '" + gt.video_id + "': interval out of range");
    if (s < prev_end)
      throw ValidationError("ground truth '" + gt.video_id + "': intervals overlap or are unsorted");
    prev_end = e;
  }
}

inline GroundTruthMap read_ground_truth(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open ground truth: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("ground truth parse failure in " + path + ": " + e.what());
  }
  if (!j.is_object()) throw ValidationError("ground truth root must be a JSON object: " + path);
  GroundTruthMap map;
  for (auto it = j.begin(); it != j.end(); ++it) {
    FrameGroundTruth gt;
    gt.video_id = it.key();
    try {
      gt.total_frames = it.value().at("total_frames").get<int64_t>();
      for (const auto& iv : it.value().at("intervals")) {
        if (!iv.is_array() || iv.size() != 2)
          throw ValidationError("ground truth '" + gt.video_id + "': interval must be [start,end)");
        gt.intervals.emplace_back(iv[0].get<int64_t>(), iv[1].get<int64_t>());
      }
    } catch (const nlohmann::json::exception& ex) {
      throw ValidationError("ground truth entry invalid for '" + gt.video_id + "': " + ex.what());
    }
    std::sort(gt.intervals.begin(), gt.intervals.end());
    validate_ground_truth(gt);
    map.emplace(gt.video_id, std::move(gt));
  }
  return map;
}

inline void write_ground_truth(const GroundTruthMap& map, const std::string& path) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& [id, gt] : map) {
    nlohmann::ordered_json e;
    e["total_frames"] = gt.total_frames;
    nlohmann::ordered_json ivs = nlohmann::ordered_json::array();
    for (const auto& [s, en] : gt.intervals) ivs.push_back({s, en});
    e["intervals"] = std::move(ivs);
    j[id] = std::move(e);
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot write ground truth: " + path);
  out << j.dump(2) << "\n";
}

}  // namespace mist
