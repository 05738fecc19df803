#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mist/config.hpp"
#include "mist/error.hpp"
#include "mist/formats.hpp"
#include "mist/manifest.hpp"
#include "mist/rng.hpp"
#include "mist/sampling.hpp"
#include "mist/tensor.hpp"

namespace mist {

// 3-layer scoring MLP D -> 512 -> 32 -> 1. ReLU after the first layer,
// sigmoid after the last; dropout sits between consecutive layers during
// training.
struct GeneratorParams {
  Tensor w1, b1;  // [512, D], [512]
  Tensor w2, b2;  // [32, 512], [32]
  Tensor w3, b3;  // [1, 32], [1]

  int64_t feature_dim() const { return w1.shape.empty() ? 0 : w1.shape[1]; }

  std::vector<Tensor*> all() { return {&w1, &b1, &w2, &b2, &w3, &b3}; }
  std::vector<const Tensor*> all() const { return {&w1, &b1, &w2, &b2, &w3, &b3}; }
};

inline constexpr int64_t kGenHidden1 = 512;
inline constexpr int64_t kGenHidden2 = 32;

// Fan-in scaled uniform init.
inline GeneratorParams init_generator(int64_t feature_dim, Rng& rng) {
  if (feature_dim < 1) throw ValidationError("generator feature_dim must be >= 1");
  GeneratorParams p;
  auto layer = [&](int64_t out, int64_t in, Tensor& w, Tensor& b) {
    double bound = 1.0 / std::sqrt(static_cast<double>(in));
    w = random_uniform({out, in}, -bound, bound, rng);
    b = random_uniform({out}, -bound, bound, rng);
  };
  layer(kGenHidden1, feature_dim, p.w1, p.b1);
  layer(kGenHidden2, kGenHidden1, p.w2, p.b2);
  layer(1, kGenHidden2, p.w3, p.b3);
  return p;
}

// Per-instance scores of one bag plus the mean-pooled sub-bag scores.
struct SubBagScores {
  Tensor instance_scores;      // [L, T], each in (0,1)
  std::vector<double> pooled;  // length L: S_l = mean_t s_{l,t}
};

// S_l = (1/T) sum_t s_{l,t} over an [L,T] score grid.
inline std::vector<double> pool_instance_scores(const Tensor& instance_scores) {
  if (instance_scores.ndim() != 2)
    throw ValidationError("pool_instance_scores expects an [L,T] grid");
  const int64_t L = instance_scores.shape[0], T = instance_scores.shape[1];
  std::vector<double> pooled(static_cast<size_t>(L), 0.0);
  for (int64_t l = 0; l < L; ++l) {
    double acc = 0.0;
    for (int64_t t = 0; t < T; ++t) acc += instance_scores.at2(l, t);
    pooled[static_cast<size_t>(l)] = acc / static_cast<double>(T);
  }
  return pooled;
}

// Activations retained for backprop through one bag.
struct GenForwardCache {
  Tensor d1;                  // [LT, 512] layer-1 output after relu+dropout
  Tensor d2;                  // [LT, 32]  layer-2 output after dropout
  std::vector<uint8_t> relu1;  // [LT*512] z1 > 0
  std::vector<uint8_t> mask1;  // [LT*512] dropout keep mask
  std::vector<uint8_t> mask2;  // [LT*32]
  std::vector<double> s;       // [LT] sigmoid outputs
  bool training = false;
  double keep1_inv = 1.0;  // 1/(1-p) inverted-dropout scale
};

// Scores every instance of a bag. With training=true, dropout masks are
// drawn from `rng` (deterministic under the caller's stream discipline);
// inference applies no dropout and needs no rescaling.
inline SubBagScores generator_forward(const GeneratorParams& p, const Tensor& subbags,
                                      bool training, double dropout_p, Rng* rng,
                                      GenForwardCache* cache = nullptr) {
  if (subbags.ndim() != 3) throw ValidationError("generator_forward expects an [L,T,D] bag");
  const int64_t L = subbags.shape[0], T = subbags.shape[1], D = subbags.shape[2];
  if (D != p.feature_dim())
    throw ValidationError("generator_forward: feature dim " + std::to_string(D) +
                          " does not match params dim " + std::to_string(p.feature_dim()));
  if (training && !rng)
    throw ValidationError("generator_forward: training mode requires an RNG");

  const int64_t n_inst = L * T;
  const double keep = 1.0 - dropout_p;
  const double keep_inv = keep > 0.0 ? 1.0 / keep : 0.0;

  SubBagScores out;
  out.instance_scores = Tensor({L, T});

  if (cache) {
    cache->d1 = Tensor({n_inst, kGenHidden1});
    cache->d2 = Tensor({n_inst, kGenHidden2});
    cache->relu1.assign(static_cast<size_t>(n_inst * kGenHidden1), 1);
    cache->mask1.assign(static_cast<size_t>(n_inst * kGenHidden1), 1);
    cache->mask2.assign(static_cast<size_t>(n_inst * kGenHidden2), 1);
    cache->s.assign(static_cast<size_t>(n_inst), 0.0);
    cache->training = training;
    cache->keep1_inv = keep_inv;
  }

  std::vector<double> z1(kGenHidden1), z2(kGenHidden2);
  for (int64_t i = 0; i < n_inst; ++i) {
    const double* f = subbags.data() + i * D;
    affine_forward(p.w1, p.b1, f, z1.data());
    for (int64_t j = 0; j < kGenHidden1; ++j) {
      bool pos = z1[j] > 0.0;
      double a = pos ? z1[j] : 0.0;
      bool kept = true;
      if (training && dropout_p > 0.0) {
        kept = !rng->bernoulli(dropout_p);
        a = kept ? a * keep_inv : 0.0;
      }
      z1[j] = a;
      if (cache) {
        cache->relu1[static_cast<size_t>(i * kGenHidden1 + j)] = pos ? 1 : 0;
        cache->mask1[static_cast<size_t>(i * kGenHidden1 + j)] = kept ? 1 : 0;
        cache->d1.v[static_cast<size_t>(i * kGenHidden1 + j)] = a;
      }
    }
    affine_forward(p.w2, p.b2, z1.data(), z2.data());
    for (int64_t j = 0; j < kGenHidden2; ++j) {
      bool kept = true;
      double a = z2[j];
      if (training && dropout_p > 0.0) {
        kept = !rng->bernoulli(dropout_p);
        a = kept ? a * keep_inv : 0.0;
      }
      z2[j] = a;
      if (cache) {
        cache->mask2[static_cast<size_t>(i * kGenHidden2 + j)] = kept ? 1 : 0;
        cache->d2.v[static_cast<size_t>(i * kGenHidden2 + j)] = a;
      }
    }
    double z3 = p.b3[0];
    for (int64_t j = 0; j < kGenHidden2; ++j) z3 += p.w3[static_cast<size_t>(j)] * z2[j];
    double s = sigmoid(z3);
    out.instance_scores.v[static_cast<size_t>(i)] = s;
    if (cache) cache->s[static_cast<size_t>(i)] = s;
  }

  out.pooled = pool_instance_scores(out.instance_scores);
  return out;
}

// Backprop of dL/dS_l (per pooled sub-bag score) into parameter
// gradients. `subbags` and `cache` must come from the matching forward
// call.
inline void generator_backward(const GeneratorParams& p, const Tensor& subbags,
                               const GenForwardCache& cache, const std::vector<double>& d_pooled,
                               GeneratorParams& grads) {
  const int64_t L = subbags.shape[0], T = subbags.shape[1], D = subbags.shape[2];
  std::vector<double> dz1(kGenHidden1), dd1(kGenHidden1), dz2(kGenHidden2), dd2(kGenHidden2);
  const double inv_t = 1.0 / static_cast<double>(T);
  for (int64_t l = 0; l < L; ++l) {
    const double ds_pool = d_pooled[static_cast<size_t>(l)];
    if (ds_pool == 0.0) continue;
    for (int64_t t = 0; t < T; ++t) {
      const int64_t i = l * T + t;
      const double s = cache.s[static_cast<size_t>(i)];
      const double dz3 = ds_pool * inv_t * s * (1.0 - s);
      const double* d2 = cache.d2.data() + i * kGenHidden2;
      grads.b3[0] += dz3;
      for (int64_t j = 0; j < kGenHidden2; ++j) {
        grads.w3[static_cast<size_t>(j)] += dz3 * d2[j];
        dd2[static_cast<size_t>(j)] = dz3 * p.w3[static_cast<size_t>(j)];
      }
      const uint8_t* m2 = cache.mask2.data() + i * kGenHidden2;
      for (int64_t j = 0; j < kGenHidden2; ++j)
        dz2[static_cast<size_t>(j)] =
            (cache.training && !m2[j]) ? 0.0 : dd2[static_cast<size_t>(j)] *
                                                   (cache.training ? cache.keep1_inv : 1.0);
      const double* d1 = cache.d1.data() + i * kGenHidden1;
      affine_backward(p.w2, d1, dz2.data(), grads.w2, grads.b2, dd1.data());
      const uint8_t* m1 = cache.mask1.data() + i * kGenHidden1;
      const uint8_t* r1 = cache.relu1.data() + i * kGenHidden1;
      for (int64_t j = 0; j < kGenHidden1; ++j) {
        double g = dd1[static_cast<size_t>(j)];
        if (!r1[j] || (cache.training && !m1[j]))
          g = 0.0;
        else if (cache.training)
          g *= cache.keep1_inv;
        dz1[static_cast<size_t>(j)] = g;
      }
      const double* f = subbags.data() + i * D;
      affine_backward(p.w1, f, dz1.data(), grads.w1, grads.b1, nullptr);
    }
  }
}

// ---------------------------------------------------------------------------
// Deep MIL ranking loss with sparse regularization:
//   loss = max(0, eps - max_l Sa_l + max_l Sn_l) + (lambda/L) * sum_l Sa_l.
// ---------------------------------------------------------------------------

inline double mil_ranking_loss(const std::vector<double>& s_abnormal,
                               const std::vector<double>& s_normal, double epsilon,
                               double lambda) {
  if (s_abnormal.empty() || s_normal.empty())
    throw ValidationError("mil_ranking_loss: score vectors must be non-empty");
  const double max_a = *std::max_element(s_abnormal.begin(), s_abnormal.end());
  const double max_n = *std::max_element(s_normal.begin(), s_normal.end());
  double hinge = epsilon - max_a + max_n;
  if (hinge < 0.0) hinge = 0.0;
  double sum_a = 0.0;
  for (double s : s_abnormal) sum_a += s;
  return hinge + lambda / static_cast<double>(s_abnormal.size()) * sum_a;
}

// Subgradient of the loss above; max ties break toward the first index.
inline double mil_ranking_loss_grad(const std::vector<double>& s_abnormal,
                                    const std::vector<double>& s_normal, double epsilon,
                                    double lambda, std::vector<double>& d_abnormal,
                                    std::vector<double>& d_normal) {
  if (s_abnormal.empty() || s_normal.empty())
    throw ValidationError("mil_ranking_loss: score vectors must be non-empty");
  const size_t arg_a = static_cast<size_t>(
      std::max_element(s_abnormal.begin(), s_abnormal.end()) - s_abnormal.begin());
  const size_t arg_n =
      static_cast<size_t>(std::max_element(s_normal.begin(), s_normal.end()) - s_normal.begin());
  const double hinge = epsilon - s_abnormal[arg_a] + s_normal[arg_n];
  const double lam_term = lambda / static_cast<double>(s_abnormal.size());
  d_abnormal.assign(s_abnormal.size(), lam_term);
  d_normal.assign(s_normal.size(), 0.0);
  double sum_a = 0.0;
  for (double s : s_abnormal) sum_a += s;
  double loss = lam_term * sum_a;
  if (hinge > 0.0) {
    loss += hinge;
    d_abnormal[arg_a] -= 1.0;
    d_normal[arg_n] += 1.0;
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Stage-I training.
// ---------------------------------------------------------------------------

struct TrainLogEntry {
  int64_t iteration = 0;
  double loss = 0.0;
};

struct GeneratorTrainResult {
  GeneratorParams params;
  std::vector<TrainLogEntry> log;
};

namespace detail {

// Draws `count` indices from [0, pool): a shuffled prefix when the pool
// is large enough, otherwise uniform draws with replacement.
inline std::vector<size_t> sample_batch_indices(size_t pool, size_t count, Rng& rng) {
  std::vector<size_t> out;
  out.reserve(count);
  if (pool >= count) {
    std::vector<size_t> idx(pool);
    for (size_t i = 0; i < pool; ++i) idx[i] = i;
    rng.shuffle(idx);
    out.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(count));
  } else {
    for (size_t i = 0; i < count; ++i) out.push_back(rng.uniform_index(pool));
  }
  return out;
}

struct AdagradState {
  std::vector<Tensor> accum;
  double lr = 0.01;
  double eps = 1e-10;

  void init(const std::vector<Tensor*>& params, double lr_) {
    lr = lr_;
    accum.clear();
    for (const Tensor* p : params) accum.push_back(p->zeros_like());
  }

  void step(const std::vector<Tensor*>& params, const std::vector<Tensor*>& grads) {
    for (size_t i = 0; i < params.size(); ++i) {
      Tensor& w = *params[i];
      const Tensor& g = *grads[i];
      Tensor& a = accum[i];
      for (size_t j = 0; j < w.v.size(); ++j) {
        a.v[j] += g.v[j] * g.v[j];
        w.v[j] -= lr * g.v[j] / (std::sqrt(a.v[j]) + eps);
      }
    }
  }
};

}  // namespace detail

// Trains the pseudo-label generator on pre-extracted features. Each
// iteration samples gen_batch_abnormal abnormal and gen_batch_normal
// normal videos, forms bags, pairs the i-th abnormal bag with the i-th
// normal bag, and averages the ranking loss over pairs.
inline GeneratorTrainResult train_generator(const Manifest& manifest,
                                            const HyperParams& hp, uint64_t seed,
                                            SamplingMode mode = SamplingMode::sparse_continuous) {
  auto abnormal = manifest.select(Split::train, 1);
  auto normal = manifest.select(Split::train, 0);
  if (abnormal.empty())
    throw ValidationError("train_generator: manifest has no abnormal training videos");
  if (normal.empty())
    throw ValidationError("train_generator: manifest has no normal training videos");

  // Preload features; bags are rebuilt per iteration (they are
  // deterministic per video, so build once here).
  std::vector<BagSample> bags_a, bags_n;
  int64_t feat_dim = -1;
  auto load_bags = [&](const std::vector<const VideoRecord*>& vids, std::vector<BagSample>& out) {
    for (const auto* v : vids) {
      FeatureSequence seq = read_feature_file(v->feature_path, v->video_id);
      if (seq.num_clips() != v->num_clips)
        throw ValidationError("video '" + v->video_id + "': feature file has " +
                              std::to_string(seq.num_clips()) + " clips, manifest says " +
                              std::to_string(v->num_clips));
      if (feat_dim < 0) feat_dim = seq.feature_dim();
      if (seq.feature_dim() != feat_dim)
        throw ValidationError("video '" + v->video_id + "': inconsistent feature dim");
      out.push_back(make_bag(seq, hp.L, hp.T, mode));
    }
  };
  load_bags(abnormal, bags_a);
  load_bags(normal, bags_n);

  Rng root(seed);
  Rng init_rng = root.fork("gen/init");
  Rng batch_rng = root.fork("gen/batch");

  GeneratorTrainResult result;
  result.params = init_generator(feat_dim, init_rng);
  GeneratorParams& params = result.params;

  GeneratorParams grads = params;  // same shapes
  auto zero_grads = [&] {
    for (Tensor* g : grads.all()) g->fill(0.0);
  };

  detail::AdagradState opt;
  opt.init(params.all(), hp.gen_lr);

  const size_t n_pairs = static_cast<size_t>(std::min(hp.gen_batch_abnormal, hp.gen_batch_normal));

  for (int64_t iter = 0; iter < hp.gen_iters; ++iter) {
    auto pick_a = detail::sample_batch_indices(bags_a.size(),
                                               static_cast<size_t>(hp.gen_batch_abnormal),
                                               batch_rng);
    auto pick_n = detail::sample_batch_indices(bags_n.size(),
                                               static_cast<size_t>(hp.gen_batch_normal),
                                               batch_rng);
    Rng drop_rng = root.fork("gen/dropout/" + std::to_string(iter));

    struct BagState {
      const BagSample* bag;
      GenForwardCache cache;
      std::vector<double> pooled;
      std::vector<double> d_pooled;
    };
    std::vector<BagState> state_a(pick_a.size()), state_n(pick_n.size());
    auto run_forward = [&](const std::vector<size_t>& pick, const std::vector<BagSample>& bags,
                           std::vector<BagState>& states) {
      for (size_t i = 0; i < pick.size(); ++i) {
        states[i].bag = &bags[pick[i]];
        SubBagScores sc = generator_forward(params, states[i].bag->subbags, true, hp.dropout_p,
                                            &drop_rng, &states[i].cache);
        states[i].pooled = std::move(sc.pooled);
        states[i].d_pooled.assign(states[i].pooled.size(), 0.0);
      }
    };
    run_forward(pick_a, bags_a, state_a);
    run_forward(pick_n, bags_n, state_n);

    double loss_sum = 0.0;
    std::vector<double> da, dn;
    const double inv_pairs = 1.0 / static_cast<double>(n_pairs);
    for (size_t i = 0; i < n_pairs; ++i) {
      loss_sum += mil_ranking_loss_grad(state_a[i].pooled, state_n[i].pooled, hp.epsilon,
                                        hp.lambda, da, dn);
      for (size_t l = 0; l < da.size(); ++l) state_a[i].d_pooled[l] += da[l] * inv_pairs;
      for (size_t l = 0; l < dn.size(); ++l) state_n[i].d_pooled[l] += dn[l] * inv_pairs;
    }

    zero_grads();
    for (auto& st : state_a)
      generator_backward(params, st.bag->subbags, st.cache, st.d_pooled, grads);
    for (auto& st : state_n)
      generator_backward(params, st.bag->subbags, st.cache, st.d_pooled, grads);

    opt.step(params.all(), grads.all());
    result.log.push_back({iter, loss_sum * inv_pairs});
  }
  return result;
}

// Clip-level scores for one video, dropout disabled.
inline ScoreSeries score_video(const GeneratorParams& params, const FeatureSequence& seq) {
  const int64_t n = seq.num_clips();
  Tensor one({n, 1, seq.feature_dim()});
  one.v = seq.data.v;
  SubBagScores sc = generator_forward(params, one, false, 0.0, nullptr);
  ScoreSeries out;
  out.video_id = seq.video_id;
  out.scores = std::move(sc.pooled);  // T=1: pooled == per-clip scores
  return out;
}

// ---------------------------------------------------------------------------
// Checkpointing: parameter blob + JSON sidecar.
// ---------------------------------------------------------------------------

inline void save_generator_checkpoint(const GeneratorParams& params, const HyperParams& hp,
                                      uint64_t seed, int64_t iterations, SamplingMode mode,
                                      const std::string& path) {
  NamedTensors blob = {{"w1", params.w1}, {"b1", params.b1}, {"w2", params.w2},
                       {"b2", params.b2}, {"w3", params.w3}, {"b3", params.b3}};
  write_param_blob(blob, path);
  nlohmann::ordered_json side;
  side["kind"] = "generator";
  side["feature_dim"] = params.feature_dim();
  side["hyperparams"] = config_to_json(hp);
  side["seed"] = seed;
  side["iterations"] = iterations;
  side["sampling"] = to_string(mode);
  std::ofstream out(path + ".json");
  if (!out) throw IoError("cannot write checkpoint sidecar: " + path + ".json");
  out << side.dump(2) << "\n";
}

struct GeneratorCheckpoint {
  GeneratorParams params;
  nlohmann::json sidecar;
};

inline GeneratorCheckpoint load_generator_checkpoint(const std::string& path) {
  GeneratorCheckpoint ck;
  std::ifstream in(path + ".json");
  if (!in) throw IoError("cannot open checkpoint sidecar: " + path + ".json");
  try {
    in >> ck.sidecar;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint sidecar " + path + ".json: " + e.what());
  }
  if (ck.sidecar.value("kind", "") != "generator")
    throw ValidationError("checkpoint " + path + " is not a generator checkpoint");
  NamedTensors blob = read_param_blob(path);
  ck.params.w1 = find_param(blob, "w1", path);
  ck.params.b1 = find_param(blob, "b1", path);
  ck.params.w2 = find_param(blob, "w2", path);
  ck.params.b2 = find_param(blob, "b2", path);
  ck.params.w3 = find_param(blob, "w3", path);
  ck.params.b3 = find_param(blob, "b3", path);
  return ck;
}

}  // namespace mist
