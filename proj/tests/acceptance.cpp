// Acceptance suite: every criterion prints exactly one PASS/FAIL line.
// Exit status is the number of failed criteria.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "mist/mist.hpp"
#include "test_util.hpp"

using namespace mist;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void fail(const std::string& why) {
    pass = false;
    if (!detail.empty()) detail += "; ";
    detail += why;
  }

  void note(const std::string& info) {
    if (detail.empty()) detail = info;
  }

  void expect(bool cond, const std::string& why) {
    if (!cond) fail(why);
  }
};

double now_seconds() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

std::string fmt(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4g", x);
  return buf;
}

// ---------------------------------------------------------------------------
// Criterion 1: gradient suites.
// ---------------------------------------------------------------------------

Outcome criterion_gradients() {
  Outcome out;
  const double t0 = now_seconds();

  // (a) MIL ranking loss vs central differences at 100 non-degenerate
  // points.
  Rng rng(1001);
  int bad_points = 0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> sa, sn;
    double gap_a, gap_n, hinge_margin;
    do {
      sa.clear();
      sn.clear();
      for (int i = 0; i < 4; ++i) sa.push_back(rng.uniform(0.02, 0.98));
      for (int i = 0; i < 4; ++i) sn.push_back(rng.uniform(0.02, 0.98));
      auto top2_gap = [](std::vector<double> v) {
        std::sort(v.begin(), v.end());
        return v[v.size() - 1] - v[v.size() - 2];
      };
      gap_a = top2_gap(sa);
      gap_n = top2_gap(sn);
      hinge_margin = std::abs(1.0 - *std::max_element(sa.begin(), sa.end()) +
                              *std::max_element(sn.begin(), sn.end()));
    } while (gap_a < 1e-3 || gap_n < 1e-3 || hinge_margin < 1e-3);
    const double lam = rng.uniform(0.0, 0.05);
    std::vector<double> da, dn;
    mil_ranking_loss_grad(sa, sn, 1.0, lam, da, dn);
    for (size_t i = 0; i < sa.size(); ++i) {
      const double fd =
          testutil::central_diff([&] { return mil_ranking_loss(sa, sn, 1.0, lam); }, sa[i]);
      if (testutil::rel_err(da[i], fd) >= 1e-4) ++bad_points;
    }
    for (size_t i = 0; i < sn.size(); ++i) {
      const double fd =
          testutil::central_diff([&] { return mil_ranking_loss(sa, sn, 1.0, lam); }, sn[i]);
      if (testutil::rel_err(dn[i], fd) >= 1e-4) ++bad_points;
    }
  }
  out.expect(bad_points == 0,
             "mil_ranking_loss gradient mismatches at " + std::to_string(bad_points) + " coords");

  // (b) weighted cross-entropy vs central differences, away from the
  // clamp region.
  int bad_ce = 0;
  for (int trial = 0; trial < 100; ++trial) {
    double p = rng.uniform(0.01, 0.99);
    const double y = rng.uniform();
    const double w0 = rng.uniform(0.5, 2.0), w1 = rng.uniform(0.5, 2.0);
    const double fd =
        testutil::central_diff([&] { return weighted_ce(p, y, w0, w1); }, p, 1e-7);
    if (testutil::rel_err(weighted_ce_grad(p, y, w0, w1), fd) >= 1e-4) ++bad_ce;
  }
  out.expect(bad_ce == 0, "weighted_ce gradient mismatches at " + std::to_string(bad_ce) +
                              " points");

  // (c) Full SGA encoder on a tiny configuration: K=2, 8x8 frames.
  EncoderConfig cfg;
  cfg.in_channels = 1;
  cfg.block_channels = {2, 2, 3, 3, 4};
  cfg.K = 2;
  Rng prng(1002);
  EncoderParams params = init_encoder(cfg, prng);
  Tensor clip = random_normal({1, 8, 8, 8}, prng);
  const double y = 0.7, w0 = 1.2, w1 = 0.8;

  auto loss_fn = [&] {
    EncoderActs acts;
    encoder_forward(params, clip, acts);
    return encoder_clip_loss(params, acts, y, w0, w1);
  };
  EncoderActs acts;
  encoder_forward(params, clip, acts);
  EncoderParams grads = zero_grads_like(params);
  encoder_backward(params, clip, acts, y, w0, w1, true, grads);

  auto ptensors = params.all();
  auto gtensors = grads.all();
  int bad_full = 0, checked = 0;
  double worst = 0.0;
  for (size_t pi = 0; pi < ptensors.size(); ++pi) {
    for (size_t j = 0; j < ptensors[pi]->v.size(); ++j) {
      const double fd = testutil::central_diff(loss_fn, ptensors[pi]->v[j], 1e-5);
      const double an = gtensors[pi]->v[j];
      if (std::abs(fd) < 1e-9 && std::abs(an) < 1e-9) continue;
      const double err = testutil::rel_err(an, fd);
      worst = std::max(worst, err);
      if (err >= 1e-3) ++bad_full;
      ++checked;
    }
  }
  out.expect(checked > 500, "full-network check exercised too few coordinates");
  out.expect(bad_full == 0, "encoder gradient mismatches at " + std::to_string(bad_full) + "/" +
                                std::to_string(checked) + " coords");

  const double elapsed = now_seconds() - t0;
  out.expect(elapsed < 60.0, "runtime " + fmt(elapsed) + "s exceeds 60s");
  out.note("worst full-net rel err " + fmt(worst) + ", " + fmt(elapsed) + "s");
  return out;
}

// ---------------------------------------------------------------------------
// Criterion 2: frame_auc equals the brute-force oracle.
// ---------------------------------------------------------------------------

Outcome criterion_auc_oracle() {
  Outcome out;
  Rng rng(2002);
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const size_t n = 2 + rng.uniform_index(49);
    std::vector<double> scores;
    std::vector<uint8_t> labels;
    for (size_t i = 0; i < n; ++i) {
      // Coarse quantization forces plenty of ties.
      scores.push_back(std::floor(rng.uniform() * 6.0) / 6.0);
      labels.push_back(rng.bernoulli(0.45) ? 1 : 0);
    }
    labels[0] = 1;
    labels[n - 1] = 0;
    const double diff = std::abs(frame_auc(scores, labels) - auc_bruteforce(scores, labels));
    worst = std::max(worst, diff);
    if (diff > 1e-12) {
      out.fail("instance " + std::to_string(trial) + " differs by " + fmt(diff));
      break;
    }
  }
  out.note("worst |fast - oracle| = " + fmt(worst) + " over 200 instances");
  return out;
}

// ---------------------------------------------------------------------------
// Criterion 3: pseudo-label affine invariance.
// ---------------------------------------------------------------------------

Outcome criterion_affine_invariance() {
  Outcome out;
  Rng rng(3003);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const size_t n = 2 + rng.uniform_index(40);
    const int64_t k = static_cast<int64_t>(rng.uniform_index(8));
    std::vector<double> s, s2;
    for (size_t i = 0; i < n; ++i) s.push_back(rng.uniform());
    const double a = rng.uniform(0.05, 20.0);
    const double b = rng.uniform(-10.0, 10.0);
    for (double v : s) s2.push_back(a * v + b);
    auto [l1, d1] = minmax(smooth(s, k));
    auto [l2, d2] = minmax(smooth(s2, k));
    if (d1 != d2) {
      out.fail("degenerate flags diverge on trial " + std::to_string(trial));
      break;
    }
    for (size_t i = 0; i < n; ++i) worst = std::max(worst, std::abs(l1[i] - l2[i]));
  }
  out.expect(worst <= 1e-9, "max elementwise deviation " + fmt(worst) + " > 1e-9");
  out.note("max deviation " + fmt(worst));
  return out;
}

// ---------------------------------------------------------------------------
// Criterion 4: attention identity and saturation.
// ---------------------------------------------------------------------------

Outcome criterion_attention_identity() {
  Outcome out;
  Rng rng(4004);
  for (int trial = 0; trial < 20; ++trial) {
    const int64_t c = 1 + static_cast<int64_t>(rng.uniform_index(8));
    const int64_t t = 1 + static_cast<int64_t>(rng.uniform_index(4));
    const int64_t h = 1 + static_cast<int64_t>(rng.uniform_index(6));
    const int64_t w = 1 + static_cast<int64_t>(rng.uniform_index(6));
    Tensor m = random_normal({c, t, h, w}, rng);
    Tensor a0({1, t, h, w});
    Tensor a1({1, t, h, w});
    a1.fill(1.0);
    Tensor id = attention_apply(m, a0);
    Tensor sat = attention_apply(m, a1);
    for (size_t i = 0; i < m.v.size(); ++i) {
      if (id.v[i] != m.v[i]) {
        out.fail("A=0 identity violated");
        return out;
      }
      if (sat.v[i] != 2.0 * m.v[i]) {
        out.fail("A=1 saturation violated");
        return out;
      }
    }
  }
  out.note("20 random maps, exact equality");
  return out;
}

// ---------------------------------------------------------------------------
// Criterion 5: Stage-I learning on the synthetic benchmark.
// ---------------------------------------------------------------------------

Outcome criterion_stage1() {
  Outcome out;
  const double t0 = now_seconds();
  const auto dir = testutil::temp_dir("acceptance_stage1");
  SynthSpec spec;
  spec.num_normal = 20;
  spec.num_abnormal = 20;
  spec.clips_min = 16;
  spec.clips_max = 32;
  spec.feature_dim = 64;
  spec.anomaly_shift = 2.0;
  spec.anomaly_min_len = 3;
  spec.anomaly_max_len = 6;
  spec.frames_per_clip = 16;
  spec.emit_clips = false;
  auto ds = synth_dataset(spec, 50, dir);

  HyperParams hp;  // paper defaults: L=32, T=3, lambda=0.01, lr=0.01
  hp.gen_iters = 200;
  auto res = train_generator(ds.manifest, hp, 7);

  std::vector<double> scores;
  std::vector<uint8_t> labels;
  for (const auto* v : ds.manifest.select(Split::test)) {
    auto seq = read_feature_file(v->feature_path, v->video_id);
    auto s = score_video(res.params, seq);
    auto cl = clip_labels_from_gt(ds.ground_truth.at(v->video_id), v->num_clips,
                                  v->frames_per_clip);
    scores.insert(scores.end(), s.scores.begin(), s.scores.end());
    labels.insert(labels.end(), cl.begin(), cl.end());
  }
  const double auc = frame_auc(scores, labels);
  const double elapsed = now_seconds() - t0;
  out.expect(auc >= 0.95, "held-out clip AUC " + fmt(auc) + " < 0.95");
  out.expect(elapsed < 300.0, "runtime " + fmt(elapsed) + "s exceeds 5 min");
  out.note("clip AUC " + fmt(auc) + " in " + fmt(elapsed) + "s / 200 iters");
  return out;
}

// ---------------------------------------------------------------------------
// Criterion 6: full two-stage pipeline on raw synthetic clips.
// ---------------------------------------------------------------------------

HyperParams pipeline_hp() {
  HyperParams hp;
  hp.L = 8;
  hp.T = 3;
  hp.gen_iters = 80;
  hp.gen_batch_abnormal = 12;
  hp.gen_batch_normal = 12;
  hp.ft_lr = 2e-3;
  hp.ft_epochs = 120;
  hp.ft_warmup_epochs = 5;
  hp.ft_videos_per_class_per_batch = 8;
  hp.ft_clips_per_video = 3;
  return hp;
}

SynthSpec pipeline_spec() {
  SynthSpec spec;
  spec.num_normal = 12;
  spec.num_abnormal = 12;
  spec.clips_min = 10;
  spec.clips_max = 16;
  spec.feature_dim = 32;
  spec.anomaly_shift = 2.0;
  spec.anomaly_min_len = 3;  // spans >= T
  spec.anomaly_max_len = 5;
  spec.frames_per_clip = 16;
  spec.clip_height = 16;
  spec.clip_width = 16;
  return spec;
}

Outcome criterion_pipeline() {
  Outcome out;
  const double t0 = now_seconds();
  const auto dir = testutil::temp_dir("acceptance_pipeline");
  auto ds = synth_dataset(pipeline_spec(), 60, dir);

  PipelineOptions opt;
  opt.manifest_path = ds.manifest_path;
  opt.ground_truth_path = ds.ground_truth_path;
  opt.out_dir = dir + "/run";
  opt.hp = pipeline_hp();
  opt.seed = 1;
  opt.encoder.block_channels = {8, 16, 32, 32, 64};
  opt.encoder.K = opt.hp.K;

  auto rec = run_pipeline(opt);
  const double elapsed = now_seconds() - t0;
  out.expect(rec.report.frame_auc >= 0.85,
             "frame AUC " + fmt(rec.report.frame_auc) + " < 0.85");
  out.expect(rec.report.score_gap >= 0.3, "score gap " + fmt(rec.report.score_gap) + " < 0.3");
  out.expect(elapsed < 900.0, "runtime " + fmt(elapsed) + "s exceeds 15 min");
  out.note("frame AUC " + fmt(rec.report.frame_auc) + ", gap " + fmt(rec.report.score_gap) +
           ", " + fmt(elapsed) + "s");
  return out;
}

// ---------------------------------------------------------------------------
// Criterion 7: ablation trends over 5 seeds (direction only).
// ---------------------------------------------------------------------------

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

Outcome criterion_ablations() {
  Outcome out;

  // Harder features than criterion 6 so the sampling comparison has
  // headroom; pixel clips keep the stronger planted patch.
  SynthSpec spec = pipeline_spec();
  spec.num_normal = 10;
  spec.num_abnormal = 10;
  spec.feature_dim = 12;
  spec.anomaly_shift = 0.8;

  HyperParams hp = pipeline_hp();
  hp.gen_iters = 60;
  hp.gen_batch_abnormal = 10;
  hp.gen_batch_normal = 10;
  hp.ft_epochs = 80;

  EncoderConfig enc_small;
  enc_small.block_channels = {4, 8, 8, 8, 16};
  enc_small.K = 4;

  std::vector<double> auc_sparse, auc_uniform, auc_full, auc_nosga;
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    const auto dir = testutil::temp_dir("acceptance_ablate_" + std::to_string(seed));
    auto ds = synth_dataset(spec, 500 + seed, dir);

    // Stage-I sampling comparison: clip-level AUC on the test split.
    for (auto mode : {SamplingMode::sparse_continuous, SamplingMode::uniform}) {
      auto res = train_generator(ds.manifest, hp, seed, mode);
      std::vector<double> scores;
      std::vector<uint8_t> labels;
      for (const auto* v : ds.manifest.select(Split::test)) {
        auto seq = read_feature_file(v->feature_path, v->video_id);
        auto s = score_video(res.params, seq);
        auto cl = clip_labels_from_gt(ds.ground_truth.at(v->video_id), v->num_clips,
                                      v->frames_per_clip);
        scores.insert(scores.end(), s.scores.begin(), s.scores.end());
        labels.insert(labels.end(), cl.begin(), cl.end());
      }
      (mode == SamplingMode::sparse_continuous ? auc_sparse : auc_uniform)
          .push_back(frame_auc(scores, labels));
    }

    // Stage-II ablation: shared Stage-I artifacts, two fine-tunes.
    PipelineOptions opt;
    opt.manifest_path = ds.manifest_path;
    opt.ground_truth_path = ds.ground_truth_path;
    opt.hp = hp;
    opt.seed = seed;
    opt.encoder = enc_small;

    opt.out_dir = dir + "/full";
    auto rec_full = run_pipeline(opt);
    auc_full.push_back(rec_full.report.frame_auc);

    opt.out_dir = dir + "/nosga";
    opt.encoder.disable_sga = true;
    auto rec_nosga = run_pipeline(opt);
    auc_nosga.push_back(rec_nosga.report.frame_auc);
  }

  const double med_sparse = median(auc_sparse), med_uniform = median(auc_uniform);
  const double med_full = median(auc_full), med_nosga = median(auc_nosga);
  out.expect(med_sparse >= med_uniform, "median sparse AUC " + fmt(med_sparse) +
                                            " < median uniform " + fmt(med_uniform));
  out.expect(med_full >= med_nosga,
             "median full AUC " + fmt(med_full) + " < median no-SGA " + fmt(med_nosga));
  out.note("sparse " + fmt(med_sparse) + " vs uniform " + fmt(med_uniform) + "; full " +
           fmt(med_full) + " vs no-SGA " + fmt(med_nosga));
  return out;
}

// ---------------------------------------------------------------------------
// Criterion 8: determinism and persistence.
// ---------------------------------------------------------------------------

Outcome criterion_determinism() {
  Outcome out;
  const auto dir = testutil::temp_dir("acceptance_determinism");
  SynthSpec spec = pipeline_spec();
  spec.num_normal = 5;
  spec.num_abnormal = 5;
  spec.clip_height = 8;
  spec.clip_width = 8;
  spec.frames_per_clip = 8;
  auto ds = synth_dataset(spec, 70, dir);

  HyperParams hp = pipeline_hp();
  hp.gen_iters = 20;
  hp.gen_batch_abnormal = 5;
  hp.gen_batch_normal = 5;
  hp.ft_epochs = 6;
  hp.ft_videos_per_class_per_batch = 5;

  PipelineOptions opt;
  opt.manifest_path = ds.manifest_path;
  opt.ground_truth_path = ds.ground_truth_path;
  opt.hp = hp;
  opt.seed = 9;
  opt.encoder.block_channels = {2, 4, 4, 4, 8};
  opt.encoder.K = 2;

  opt.out_dir = dir + "/r1";
  run_pipeline(opt);
  opt.out_dir = dir + "/r2";
  run_pipeline(opt);
  out.expect(testutil::same_bytes(dir + "/r1/report.json", dir + "/r2/report.json"),
             "EvalReports differ between identically seeded runs");

  // Checkpoint reloads reproduce scores within 1e-6.
  auto gen = load_generator_checkpoint(dir + "/r1/generator.ckpt");
  auto enc = load_encoder_checkpoint(dir + "/r1/encoder.ckpt");
  double worst = 0.0;
  for (const auto* v : ds.manifest.select(Split::test)) {
    auto seq = read_feature_file(v->feature_path, v->video_id);
    auto s1 = score_video(gen.params, seq);
    auto s2 = score_video(load_generator_checkpoint(dir + "/r1/generator.ckpt").params, seq);
    for (size_t i = 0; i < s1.scores.size(); ++i)
      worst = std::max(worst, std::abs(s1.scores[i] - s2.scores[i]));

    auto clips = read_clip_file(v->clip_path, v->video_id);
    auto e1 = encoder_score_video(enc.params, clips);
    auto stored = read_score_file(dir + "/r1/scores/" + v->video_id + ".score", v->video_id);
    for (size_t i = 0; i < e1.scores.size(); ++i)
      worst = std::max(worst, std::abs(e1.scores[i] - stored.scores[i]));
  }
  out.expect(worst <= 1e-6, "reloaded checkpoints deviate by " + fmt(worst));
  out.note("max reload deviation " + fmt(worst));
  return out;
}

// ---------------------------------------------------------------------------
// Criterion 9: sampling invariant suite.
// ---------------------------------------------------------------------------

Outcome criterion_sampling_grid() {
  Outcome out;
  Rng rng(9009);
  int64_t cases = 0;
  for (int64_t n = 1; n <= 40 && out.pass; ++n)
    for (int64_t l_count : {1, 4, 32})
      for (int64_t t_len : {1, 3, 7}) {
        ++cases;
        const auto starts = sparse_continuous_starts(n, l_count, t_len);
        const int64_t n_eff = std::max(n, t_len);
        // L=1 yields the single start 0 by the formula; the last-start
        // coverage condition applies from two windows up.
        const int64_t want_last = l_count > 1 ? n_eff - t_len : 0;
        if (static_cast<int64_t>(starts.size()) != l_count ||
            starts.front() != 0 || starts.back() != want_last) {
          out.fail("bad endpoints at N=" + std::to_string(n) + " L=" + std::to_string(l_count) +
                   " T=" + std::to_string(t_len));
          break;
        }
        for (size_t i = 0; i < starts.size(); ++i) {
          if (starts[i] < 0 || starts[i] + t_len > n_eff ||
              (i > 0 && starts[i] < starts[i - 1])) {
            out.fail("out-of-range or unordered start at N=" + std::to_string(n));
            break;
          }
        }
        // Sub-bags are T consecutive (padded) clips of the source.
        FeatureSequence seq;
        seq.video_id = "v";
        seq.data = random_normal({n, 3}, rng);
        auto bag = gather_subbags(seq, starts, t_len);
        for (int64_t l = 0; l < bag.L() && out.pass; ++l)
          for (int64_t t = 0; t < bag.T(); ++t) {
            const int64_t src = std::min(starts[static_cast<size_t>(l)] + t, n - 1);
            for (int64_t d = 0; d < 3; ++d)
              if (bag.subbags.v[static_cast<size_t>((l * t_len + t) * 3 + d)] !=
                  seq.data.at2(src, d)) {
                out.fail("sub-bag content mismatch at N=" + std::to_string(n));
                break;
              }
          }
      }
  out.note(std::to_string(cases) + " grid cases");
  return out;
}

}  // namespace

int main() {
  struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> fn;
  };
  const std::vector<Criterion> criteria = {
      {1, "gradient suites (ranking loss, weighted CE, full encoder)", criterion_gradients},
      {2, "frame_auc equals brute-force oracle on 200 instances", criterion_auc_oracle},
      {3, "pseudo-label pipeline affine invariance", criterion_affine_invariance},
      {4, "attention identity (A=0) and saturation (A=1)", criterion_attention_identity},
      {5, "Stage-I synthetic learning, held-out clip AUC >= 0.95", criterion_stage1},
      {6, "full pipeline on raw clips, AUC >= 0.85 and gap >= 0.3", criterion_pipeline},
      {7, "ablation trends over 5 seeds (sampling, SGA)", criterion_ablations},
      {8, "determinism and checkpoint persistence", criterion_determinism},
      {9, "sampling invariants over the (N,L,T) grid", criterion_sampling_grid},
  };

  int failures = 0;
  for (const auto& c : criteria) {
    const double t0 = now_seconds();
    Outcome out;
    try {
      out = c.fn();
    } catch (const std::exception& e) {
      out.pass = false;
      out.detail = std::string("exception: ") + e.what();
    }
    const double dt = now_seconds() - t0;
    std::printf("[%s] criterion %d: %s (%.1fs)%s%s\n", out.pass ? "PASS" : "FAIL", c.id, c.name,
                dt, out.detail.empty() ? "" : " -- ", out.detail.c_str());
    std::fflush(stdout);
    if (!out.pass) ++failures;
  }
  if (failures == 0)
    std::printf("all %zu acceptance criteria passed\n", criteria.size());
  else
    std::printf("%d acceptance criteria FAILED\n", failures);
  return failures;
}
