#pragma once

#include <cstdint>
#include <fstream>
#include <string>

#include <json.hpp>

#include "mist/error.hpp"

namespace mist {

// Flat hyperparameter set shared by both training stages. Stage-specific
// knobs carry a gen_ / ft_ prefix. Defaults are the published values for
// UCF-Crime; gen_iters has no published value and defaults to 200.
struct HyperParams {
  // Bag construction and MIL loss.
  int64_t L = 32;        // sub-bags per bag
  int64_t T = 3;         // consecutive clips per sub-bag
  double epsilon = 1.0;  // ranking margin
  double lambda = 0.01;  // sparsity weight

  // Pseudo-label refinement.
  int64_t k = 5;  // smoothing half-window

  // Self-guided attention.
  int64_t K = 8;  // detectors per class in the guided head

  // Stage I: pseudo-label generator.
  double dropout_p = 0.6;
  double gen_lr = 0.01;
  int64_t gen_batch_abnormal = 40;
  int64_t gen_batch_normal = 40;
  int64_t gen_iters = 200;

  // Stage II: encoder fine-tuning.
  double ft_lr = 1e-4;
  double ft_weight_decay = 5e-4;
  int64_t ft_epochs = 300;
  int64_t ft_warmup_epochs = 5;
  int64_t ft_videos_per_class_per_batch = 16;
  int64_t ft_clips_per_video = 3;
  double w0 = 1.2;  // abnormal-class weight
  double w1 = 0.8;  // normal-class weight

  // Data and evaluation.
  int64_t frames_per_clip = 16;
  int64_t seed = 0;
  double far_threshold = 0.5;
};

inline void validate(const HyperParams& hp) {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ValidationError("config field '" + field + "' " + why);
  };
  if (hp.L < 1) fail("L", "must be >= 1");
  if (hp.T < 1) fail("T", "must be >= 1");
  if (hp.K < 1) fail("K", "must be >= 1");
  if (!(hp.epsilon > 0.0)) fail("epsilon", "must be > 0");
  if (hp.lambda < 0.0) fail("lambda", "must be >= 0");
  if (hp.k < 0) fail("k", "must be >= 0");
  if (hp.dropout_p < 0.0 || hp.dropout_p >= 1.0) fail("dropout_p", "must be in [0,1)");
  if (!(hp.gen_lr > 0.0)) fail("gen_lr", "must be > 0");
  if (hp.gen_batch_abnormal < 1) fail("gen_batch_abnormal", "must be >= 1");
  if (hp.gen_batch_normal < 1) fail("gen_batch_normal", "must be >= 1");
  if (hp.gen_iters < 1) fail("gen_iters", "must be >= 1");
  if (!(hp.ft_lr > 0.0)) fail("ft_lr", "must be > 0");
  if (hp.ft_weight_decay < 0.0) fail("ft_weight_decay", "must be >= 0");
  if (hp.ft_epochs < 1) fail("ft_epochs", "must be >= 1");
  if (hp.ft_warmup_epochs < 0) fail("ft_warmup_epochs", "must be >= 0");
  if (hp.ft_videos_per_class_per_batch < 1) fail("ft_videos_per_class_per_batch", "must be >= 1");
  if (hp.ft_clips_per_video < 1) fail("ft_clips_per_video", "must be >= 1");
  if (!(hp.w0 > 0.0)) fail("w0", "must be > 0");
  if (!(hp.w1 > 0.0)) fail("w1", "must be > 0");
  if (hp.frames_per_clip < 1) fail("frames_per_clip", "must be >= 1");
  if (!(hp.far_threshold > 0.0 && hp.far_threshold < 1.0)) fail("far_threshold", "must be in (0,1)");
}

namespace detail {

template <typename F>
inline void for_each_field(HyperParams& hp, F&& f) {
  f("L", hp.L);
  f("T", hp.T);
  f("epsilon", hp.epsilon);
  f("lambda", hp.lambda);
  f("k", hp.k);
  f("K", hp.K);
  f("dropout_p", hp.dropout_p);
  f("gen_lr", hp.gen_lr);
  f("gen_batch_abnormal", hp.gen_batch_abnormal);
  f("gen_batch_normal", hp.gen_batch_normal);
  f("gen_iters", hp.gen_iters);
  f("ft_lr", hp.ft_lr);
  f("ft_weight_decay", hp.ft_weight_decay);
  f("ft_epochs", hp.ft_epochs);
  f("ft_warmup_epochs", hp.ft_warmup_epochs);
  f("ft_videos_per_class_per_batch", hp.ft_videos_per_class_per_batch);
  f("ft_clips_per_video", hp.ft_clips_per_video);
  f("w0", hp.w0);
  f("w1", hp.w1);
  f("frames_per_clip", hp.frames_per_clip);
  f("seed", hp.seed);
  f("far_threshold", hp.far_threshold);
}

inline void assign_field(HyperParams& hp, const std::string& key, const nlohmann::json& val) {
  bool found = false;
  for_each_field(hp, [&](const char* name, auto& field) {
    if (found || key != name) return;
    found = true;
    using T = std::decay_t<decltype(field)>;
    if constexpr (std::is_same_v<T, int64_t>) {
      if (!val.is_number_integer())
        throw ValidationError("config field '" + key + "' must be an integer");
      field = val.get<int64_t>();
    } else {
      if (!val.is_number())
        throw ValidationError("config field '" + key + "' must be a number");
      field = val.get<double>();
    }
  });
  if (!found) throw ValidationError("unknown config key '" + key + "'");
}

}  // namespace detail

inline HyperParams config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ValidationError("config root must be a JSON object");
  HyperParams hp;
  for (auto it = j.begin(); it != j.end(); ++it) detail::assign_field(hp, it.key(), it.value());
  validate(hp);
  return hp;
}

inline nlohmann::ordered_json config_to_json(const HyperParams& hp) {
  nlohmann::ordered_json j;
  detail::for_each_field(const_cast<HyperParams&>(hp),
                         [&](const char* name, auto& field) { j[name] = field; });
  return j;
}

inline HyperParams load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("config parse failure in " + path + ": " + e.what());
  }
  return config_from_json(j);
}

inline void save_config(const HyperParams& hp, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write config file: " + path);
  out << config_to_json(hp).dump(2) << "\n";
}

// Applies one "key=value" override on top of an existing config.
inline void apply_override(HyperParams& hp, const std::string& kv) {
  auto eq = kv.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ValidationError("override must look like key=value, got '" + kv + "'");
  std::string key = kv.substr(0, eq);
  std::string val = kv.substr(eq + 1);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(val);
  } catch (const nlohmann::json::exception&) {
    throw ValidationError("override value for '" + key + "' is not a number: '" + val + "'");
  }
  detail::assign_field(hp, key, j);
  validate(hp);
}

}  // namespace mist
