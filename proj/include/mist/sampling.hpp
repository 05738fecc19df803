#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mist/error.hpp"
#include "mist/formats.hpp"
#include "mist/tensor.hpp"

namespace mist {

// L sub-bags of T consecutive clips drawn from one video.
struct BagSample {
  std::string video_id;
  Tensor subbags;                       // [L, T, D]
  std::vector<int64_t> start_indices;   // length L, non-decreasing

  int64_t L() const { return subbags.shape[0]; }
  int64_t T() const { return subbags.shape[1]; }
  int64_t D() const { return subbags.shape[2]; }
};

// Deterministic uniform placement of L windows of length T across the
// video; windows overlap when the video is shorter than L*T clips, and
// tile it exactly when N == L*T.
inline std::vector<int64_t> sparse_continuous_starts(int64_t n, int64_t l_count, int64_t t_len) {
  if (n < 1 || l_count < 1 || t_len < 1)
    throw ValidationError("sparse_continuous_starts: N, L, T must all be >= 1");
  const int64_t n_eff = std::max(n, t_len);
  const int64_t range = n_eff - t_len;
  const int64_t denom = std::max<int64_t>(l_count - 1, 1);
  std::vector<int64_t> starts(static_cast<size_t>(l_count));
  for (int64_t l = 0; l < l_count; ++l) {
    double x = static_cast<double>(l) * static_cast<double>(range) / static_cast<double>(denom);
    starts[static_cast<size_t>(l)] = static_cast<int64_t>(std::floor(x + 0.5));
  }
  return starts;
}

// Ablation baseline: one clip per segment, i.e. T=1 windows at
// floor(l*N/L).
inline std::vector<int64_t> uniform_segment_starts(int64_t n, int64_t l_count) {
  if (n < 1 || l_count < 1)
    throw ValidationError("uniform_segment_starts: N and L must be >= 1");
  std::vector<int64_t> starts(static_cast<size_t>(l_count));
  for (int64_t l = 0; l < l_count; ++l)
    starts[static_cast<size_t>(l)] = (l * n) / l_count;
  return starts;
}

// Materializes sub-bags from a feature sequence. Sequences shorter than
// T are padded by repeating the final clip.
inline BagSample gather_subbags(const FeatureSequence& seq, const std::vector<int64_t>& starts,
                                int64_t t_len) {
  const int64_t n = seq.num_clips();
  const int64_t d = seq.feature_dim();
  const int64_t n_eff = std::max(n, t_len);
  BagSample bag;
  bag.video_id = seq.video_id;
  bag.start_indices = starts;
  bag.subbags = Tensor({static_cast<int64_t>(starts.size()), t_len, d});
  double* out = bag.subbags.data();
  for (size_t l = 0; l < starts.size(); ++l) {
    const int64_t s = starts[l];
    if (s < 0 || s + t_len > n_eff)
      throw ValidationError("gather_subbags: start " + std::to_string(s) +
                            " out of bounds for N=" + std::to_string(n) +
                            ", T=" + std::to_string(t_len));
    for (int64_t t = 0; t < t_len; ++t) {
      const int64_t clip = std::min(s + t, n - 1);  // repeat-last padding
      const double* src = seq.data.data() + clip * d;
      double* dst = out + (static_cast<int64_t>(l) * t_len + t) * d;
      std::copy(src, src + d, dst);
    }
  }
  return bag;
}

enum class SamplingMode { sparse_continuous, uniform };

inline std::string to_string(SamplingMode m) {
  return m == SamplingMode::sparse_continuous ? "sparse-continuous" : "uniform";
}

inline SamplingMode sampling_mode_from_string(const std::string& s) {
  if (s == "sparse-continuous") return SamplingMode::sparse_continuous;
  if (s == "uniform") return SamplingMode::uniform;
  throw ValidationError("sampling mode must be 'sparse-continuous' or 'uniform', got '" + s + "'");
}

// Bag construction used by generator training and scoring. Uniform mode
// degenerates each sub-bag to a single clip (T=1).
inline BagSample make_bag(const FeatureSequence& seq, int64_t l_count, int64_t t_len,
                          SamplingMode mode) {
  if (mode == SamplingMode::sparse_continuous)
    return gather_subbags(seq, sparse_continuous_starts(seq.num_clips(), l_count, t_len), t_len);
  return gather_subbags(seq, uniform_segment_starts(seq.num_clips(), l_count), 1);
}

}  // namespace mist
