#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "mist/error.hpp"
#include "mist/tensor.hpp"

namespace mist {

// Per-video matrix of clip features: data is [N, D].
struct FeatureSequence {
  std::string video_id;
  Tensor data;

  int64_t num_clips() const { return data.shape.empty() ? 0 : data.shape[0]; }
  int64_t feature_dim() const { return data.shape.size() < 2 ? 0 : data.shape[1]; }
};

// Per-clip anomaly scores for one video.
struct ScoreSeries {
  std::string video_id;
  std::vector<double> scores;
};

// Raw clips of one video: data is [N, C, T, H, W].
struct ClipVolume {
  std::string video_id;
  Tensor data;

  int64_t num_clips() const { return data.shape.empty() ? 0 : data.shape[0]; }
};

namespace detail {

class BinReader {
public:
  BinReader(const std::string& path, const char* what) : path_(path), what_(what) {
    in_.open(path, std::ios::binary);
    if (!in_) throw IoError(std::string("cannot open ") + what + " file: " + path);
  }

  void expect_magic(const char magic[8]) {
    char buf[8];
    read_raw(buf, 8);
    if (std::memcmp(buf, magic, 8) != 0)
      throw FormatError(std::string(what_) + " file " + path_ + ": bad magic at byte 0");
  }

  uint32_t read_u32() {
    uint8_t b[4];
    read_raw(b, 4);
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
  }

  void expect_version(uint32_t want) {
    size_t at = offset_;
    uint32_t got = read_u32();
    if (got != want)
      throw FormatError(std::string(what_) + " file " + path_ + ": unsupported version " +
                        std::to_string(got) + " at byte " + std::to_string(at));
  }

  void read_f32(double* dst, size_t count) {
    std::vector<float> buf(count);
    read_raw(buf.data(), count * sizeof(float));
    for (size_t i = 0; i < count; ++i) dst[i] = static_cast<double>(buf[i]);
  }

  void read_f64(double* dst, size_t count) { read_raw(dst, count * sizeof(double)); }

  std::string read_string(size_t len) {
    std::string s(len, '\0');
    read_raw(s.data(), len);
    return s;
  }

  void expect_eof() {
    char c;
    in_.read(&c, 1);
    if (!in_.eof())
      throw FormatError(std::string(what_) + " file " + path_ + ": trailing bytes at byte " +
                        std::to_string(offset_));
  }

  size_t offset() const { return offset_; }

private:
  void read_raw(void* dst, size_t n) {
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<size_t>(in_.gcount()) != n)
      throw FormatError(std::string(what_) + " file " + path_ + ": truncated at byte " +
                        std::to_string(offset_ + static_cast<size_t>(in_.gcount())));
    offset_ += n;
  }

  std::string path_;
  const char* what_;
  std::ifstream in_;
  size_t offset_ = 0;
};

class BinWriter {
public:
  BinWriter(const std::string& path, const char* what) : path_(path) {
    out_.open(path, std::ios::binary | std::ios::trunc);
    if (!out_) throw IoError(std::string("cannot write ") + what + " file: " + path);
  }

  void write_magic(const char magic[8]) { write_raw(magic, 8); }

  void write_u32(uint32_t x) {
    uint8_t b[4] = {static_cast<uint8_t>(x), static_cast<uint8_t>(x >> 8),
                    static_cast<uint8_t>(x >> 16), static_cast<uint8_t>(x >> 24)};
    write_raw(b, 4);
  }

  void write_f32(const double* src, size_t count) {
    std::vector<float> buf(count);
    for (size_t i = 0; i < count; ++i) buf[i] = static_cast<float>(src[i]);
    write_raw(buf.data(), count * sizeof(float));
  }

  void write_f64(const double* src, size_t count) { write_raw(src, count * sizeof(double)); }

  void write_string(const std::string& s) { write_raw(s.data(), s.size()); }

  void close() {
    out_.close();
    if (!out_) throw IoError("write failure on file: " + path_);
  }

private:
  void write_raw(const void* src, size_t n) {
    out_.write(static_cast<const char*>(src), static_cast<std::streamsize>(n));
    if (!out_) throw IoError("write failure on file: " + path_);
  }

  std::string path_;
  std::ofstream out_;
};

inline void check_finite(const double* p, size_t n, const char* what, const std::string& id) {
  for (size_t i = 0; i < n; ++i)
    if (!std::isfinite(p[i]))
      throw ValidationError(std::string(what) + " for '" + id + "' contains a non-finite value");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Feature files: "MISTFEAT" | u32 version=1 | u32 N | u32 D | N*D float32 LE.
// ---------------------------------------------------------------------------

inline constexpr char kFeatureMagic[8] = {'M', 'I', 'S', 'T', 'F', 'E', 'A', 'T'};
inline constexpr char kScoreMagic[8] = {'M', 'I', 'S', 'T', 'S', 'C', 'O', 'R'};
inline constexpr char kClipMagic[8] = {'M', 'I', 'S', 'T', 'C', 'L', 'I', 'P'};
inline constexpr char kParamMagic[8] = {'M', 'I', 'S', 'T', 'P', 'A', 'R', 'M'};

inline void write_feature_file(const FeatureSequence& seq, const std::string& path) {
  if (seq.num_clips() < 1 || seq.feature_dim() < 1)
    throw ValidationError("feature sequence '" + seq.video_id + "' must be a non-empty N x D matrix");
  detail::check_finite(seq.data.data(), seq.data.v.size(), "features", seq.video_id);
  detail::BinWriter w(path, "feature");
  w.write_magic(kFeatureMagic);
  w.write_u32(1);
  w.write_u32(static_cast<uint32_t>(seq.num_clips()));
  w.write_u32(static_cast<uint32_t>(seq.feature_dim()));
  w.write_f32(seq.data.data(), seq.data.v.size());
  w.close();
}

inline FeatureSequence read_feature_file(const std::string& path, std::string video_id = "") {
  detail::BinReader r(path, "feature");
  r.expect_magic(kFeatureMagic);
  r.expect_version(1);
  uint32_t n = r.read_u32();
  uint32_t d = r.read_u32();
  if (n < 1 || d < 1)
    throw FormatError("feature file " + path + ": empty dimensions in header");
  FeatureSequence seq;
  seq.video_id = std::move(video_id);
  seq.data = Tensor({static_cast<int64_t>(n), static_cast<int64_t>(d)});
  r.read_f32(seq.data.data(), seq.data.v.size());
  r.expect_eof();
  detail::check_finite(seq.data.data(), seq.data.v.size(), "features", path);
  return seq;
}

// ---------------------------------------------------------------------------
// Score files: "MISTSCOR" | u32 version=1 | u32 N | N float32 LE.
// Pseudo-label files reuse this container.
// ---------------------------------------------------------------------------

inline void write_score_file(const ScoreSeries& series, const std::string& path) {
  if (series.scores.empty())
    throw ValidationError("score series '" + series.video_id + "' is empty");
  detail::check_finite(series.scores.data(), series.scores.size(), "scores", series.video_id);
  detail::BinWriter w(path, "score");
  w.write_magic(kScoreMagic);
  w.write_u32(1);
  w.write_u32(static_cast<uint32_t>(series.scores.size()));
  w.write_f32(series.scores.data(), series.scores.size());
  w.close();
}

inline ScoreSeries read_score_file(const std::string& path, std::string video_id = "") {
  detail::BinReader r(path, "score");
  r.expect_magic(kScoreMagic);
  r.expect_version(1);
  uint32_t n = r.read_u32();
  if (n < 1) throw FormatError("score file " + path + ": empty series in header");
  ScoreSeries s;
  s.video_id = std::move(video_id);
  s.scores.assign(n, 0.0);
  r.read_f32(s.scores.data(), s.scores.size());
  r.expect_eof();
  detail::check_finite(s.scores.data(), s.scores.size(), "scores", path);
  return s;
}

// ---------------------------------------------------------------------------
// Clip files: "MISTCLIP" | u32 version=1 | u32 N C T H W | data float32 LE.
// ---------------------------------------------------------------------------

inline void write_clip_file(const ClipVolume& clips, const std::string& path) {
  if (clips.data.ndim() != 5 || clips.data.numel() == 0)
    throw ValidationError("clip volume '" + clips.video_id + "' must be [N,C,T,H,W]");
  detail::check_finite(clips.data.data(), clips.data.v.size(), "clips", clips.video_id);
  detail::BinWriter w(path, "clip");
  w.write_magic(kClipMagic);
  w.write_u32(1);
  for (int i = 0; i < 5; ++i) w.write_u32(static_cast<uint32_t>(clips.data.shape[i]));
  w.write_f32(clips.data.data(), clips.data.v.size());
  w.close();
}

inline ClipVolume read_clip_file(const std::string& path, std::string video_id = "") {
  detail::BinReader r(path, "clip");
  r.expect_magic(kClipMagic);
  r.expect_version(1);
  std::vector<int64_t> shape(5);
  for (auto& d : shape) {
    d = static_cast<int64_t>(r.read_u32());
    if (d < 1) throw FormatError("clip file " + path + ": zero dimension in header");
  }
  ClipVolume c;
  c.video_id = std::move(video_id);
  c.data = Tensor(shape);
  r.read_f32(c.data.data(), c.data.v.size());
  r.expect_eof();
  return c;
}

// ---------------------------------------------------------------------------
// Parameter blobs: "MISTPARM" | u32 version=1 | u32 count | entries of
// (u32 name_len | name | u32 ndim | u32 dims... | float64 data).
// Doubles are stored losslessly so a reload is bit-exact.
// ---------------------------------------------------------------------------

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

inline void write_param_blob(const NamedTensors& params, const std::string& path) {
  detail::BinWriter w(path, "parameter");
  w.write_magic(kParamMagic);
  w.write_u32(1);
  w.write_u32(static_cast<uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    w.write_u32(static_cast<uint32_t>(name.size()));
    w.write_string(name);
    w.write_u32(static_cast<uint32_t>(t.shape.size()));
    for (int64_t d : t.shape) w.write_u32(static_cast<uint32_t>(d));
    w.write_f64(t.data(), t.v.size());
  }
  w.close();
}

inline NamedTensors read_param_blob(const std::string& path) {
  detail::BinReader r(path, "parameter");
  r.expect_magic(kParamMagic);
  r.expect_version(1);
  uint32_t count = r.read_u32();
  NamedTensors params;
  params.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    uint32_t name_len = r.read_u32();
    std::string name = r.read_string(name_len);
    uint32_t ndim = r.read_u32();
    std::vector<int64_t> shape(ndim);
    for (auto& d : shape) d = static_cast<int64_t>(r.read_u32());
    Tensor t(shape);
    r.read_f64(t.data(), t.v.size());
    params.emplace_back(std::move(name), std::move(t));
  }
  r.expect_eof();
  return params;
}

inline const Tensor& find_param(const NamedTensors& params, const std::string& name,
                                const std::string& path) {
  for (const auto& [n, t] : params)
    if (n == name) return t;
  throw FormatError("parameter blob " + path + ": missing tensor '" + name + "'");
}

}  // namespace mist
