#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "mist/config.hpp"
#include "mist/encoder.hpp"
#include "mist/error.hpp"
#include "mist/evaluation.hpp"
#include "mist/manifest.hpp"
#include "mist/milgen.hpp"
#include "mist/plot.hpp"
#include "mist/pseudolabel.hpp"
#include "mist/sampling.hpp"
#include "mist/synth.hpp"

namespace mist {

namespace detail {

inline void ensure_parent_dir(const std::string& path) {
  const auto p = std::filesystem::path(path).parent_path();
  if (!p.empty()) std::filesystem::create_directories(p);
}

inline void write_train_log(const std::vector<TrainLogEntry>& log, const std::string& path) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto& e : log) arr.push_back({{"iteration", e.iteration}, {"loss", e.loss}});
  std::ofstream out(path);
  if (!out) throw IoError("cannot write training log: " + path);
  out << arr.dump(2) << "\n";
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Stage runners shared by the CLI subcommands and the pipeline command.
// All stages communicate through files, so chaining them in-process is
// identical to invoking the subcommands in sequence.
// ---------------------------------------------------------------------------

inline std::string run_train_generator(const std::string& manifest_path, const HyperParams& hp,
                                       uint64_t seed, SamplingMode mode,
                                       const std::string& out_ckpt) {
  Manifest manifest = read_manifest(manifest_path);
  GeneratorTrainResult res = train_generator(manifest, hp, seed, mode);
  detail::ensure_parent_dir(out_ckpt);
  save_generator_checkpoint(res.params, hp, seed, hp.gen_iters, mode, out_ckpt);
  detail::write_train_log(res.log, out_ckpt + ".log.json");
  return out_ckpt;
}

inline std::string run_generate_pseudo_labels(const std::string& manifest_path,
                                              const std::string& gen_ckpt, const HyperParams& hp,
                                              const std::string& out_dir) {
  Manifest manifest = read_manifest(manifest_path);
  GeneratorCheckpoint ck = load_generator_checkpoint(gen_ckpt);
  PseudoLabelRun run = generate_pseudo_labels(
      ck.params, manifest, hp, std::filesystem::path(gen_ckpt).filename().string(), out_dir);
  if (!run.degenerate_videos.empty()) {
    std::fprintf(stderr, "warning: %zu video(s) produced degenerate pseudo labels\n",
                 run.degenerate_videos.size());
  }
  return out_dir;
}

inline std::string run_finetune(const std::string& manifest_path, const std::string& labels_dir,
                                const HyperParams& hp, uint64_t seed, const EncoderConfig& config,
                                const std::string& out_ckpt) {
  Manifest manifest = read_manifest(manifest_path);
  EncoderTrainResult res = finetune(manifest, labels_dir, hp, seed, config);
  detail::ensure_parent_dir(out_ckpt);
  save_encoder_checkpoint(res.params, hp, seed, hp.ft_epochs, out_ckpt);
  detail::write_train_log(res.log, out_ckpt + ".log.json");
  return out_ckpt;
}

// Scores every video of `split` with either checkpoint kind (detected
// from the sidecar) and writes one MISTSCOR file per video.
inline std::string run_score(const std::string& manifest_path, const std::string& ckpt_path,
                             Split split, const std::string& out_dir,
                             const std::string& attention_dir = "") {
  Manifest manifest = read_manifest(manifest_path);
  std::filesystem::create_directories(out_dir);

  std::ifstream side_in(ckpt_path + ".json");
  if (!side_in) throw IoError("cannot open checkpoint sidecar: " + ckpt_path + ".json");
  nlohmann::json side;
  try {
    side_in >> side;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint sidecar " + ckpt_path + ".json: " + e.what());
  }
  const std::string kind = side.value("kind", "");

  if (kind == "generator") {
    if (!attention_dir.empty())
      throw ValidationError("attention export requires an encoder checkpoint");
    GeneratorCheckpoint ck = load_generator_checkpoint(ckpt_path);
    for (const auto& v : manifest.videos) {
      if (v.split != split) continue;
      FeatureSequence seq = read_feature_file(v.feature_path, v.video_id);
      if (seq.num_clips() != v.num_clips)
        throw ValidationError("video '" + v.video_id + "': feature file clip count mismatch");
      ScoreSeries s = score_video(ck.params, seq);
      write_score_file(s, (std::filesystem::path(out_dir) / (v.video_id + ".score")).string());
    }
  } else if (kind == "encoder") {
    EncoderCheckpoint ck = load_encoder_checkpoint(ckpt_path);
    if (!attention_dir.empty()) std::filesystem::create_directories(attention_dir);
    for (const auto& v : manifest.videos) {
      if (v.split != split) continue;
      if (v.clip_path.empty())
        throw ValidationError("video '" + v.video_id + "' has no clip_path for encoder scoring");
      ClipVolume clips = read_clip_file(v.clip_path, v.video_id);
      std::vector<Tensor> attn;
      ScoreSeries s = encoder_score_video(ck.params, clips,
                                          attention_dir.empty() ? nullptr : &attn);
      write_score_file(s, (std::filesystem::path(out_dir) / (v.video_id + ".score")).string());
      if (!attention_dir.empty())
        write_attention_maps(attn, v.video_id,
                             (std::filesystem::path(attention_dir) / (v.video_id + ".attn")).string());
    }
  } else {
    throw ValidationError("checkpoint " + ckpt_path + " has unknown kind '" + kind + "'");
  }
  return out_dir;
}

inline std::map<std::string, ScoreSeries> load_score_dir(const Manifest& manifest, Split split,
                                                         const std::string& scores_dir) {
  std::map<std::string, ScoreSeries> scores;
  for (const auto& v : manifest.videos) {
    if (v.split != split) continue;
    const auto path = std::filesystem::path(scores_dir) / (v.video_id + ".score");
    if (!std::filesystem::exists(path))
      throw IoError("missing score file for video '" + v.video_id + "': " + path.string());
    scores.emplace(v.video_id, read_score_file(path.string(), v.video_id));
  }
  return scores;
}

inline EvalReport run_eval(const std::string& manifest_path, const std::string& scores_dir,
                           const std::string& gt_path, double far_threshold, FarSubset far_subset,
                           const std::string& out_report) {
  Manifest manifest = read_manifest(manifest_path);
  GroundTruthMap gt = read_ground_truth(gt_path);
  auto scores = load_score_dir(manifest, Split::test, scores_dir);
  EvalReport rep = evaluate_scores(manifest, gt, scores, far_threshold, far_subset);
  if (!out_report.empty()) {
    detail::ensure_parent_dir(out_report);
    write_eval_report(rep, out_report);
  }
  return rep;
}

inline std::string run_plot(const std::string& manifest_path, const std::string& scores_dir,
                            const std::string& gt_path, double threshold,
                            const std::string& out_dir) {
  Manifest manifest = read_manifest(manifest_path);
  GroundTruthMap gt = read_ground_truth(gt_path);
  std::filesystem::create_directories(out_dir);
  for (const auto& v : manifest.videos) {
    if (v.split != Split::test) continue;
    const auto spath = std::filesystem::path(scores_dir) / (v.video_id + ".score");
    if (!std::filesystem::exists(spath))
      throw IoError("missing score file for video '" + v.video_id + "': " + spath.string());
    ScoreSeries s = read_score_file(spath.string(), v.video_id);
    auto git = gt.find(v.video_id);
    if (git == gt.end())
      throw ValidationError("no ground truth for video '" + v.video_id + "'");
    auto frames = expand_to_frames(s, v.frames_per_clip, git->second.total_frames);
    render_score_plot(frames, git->second, threshold,
                      (std::filesystem::path(out_dir) / (v.video_id + ".png")).string());
  }
  return out_dir;
}

// ---------------------------------------------------------------------------
// Full two-stage pipeline.
// ---------------------------------------------------------------------------

struct PipelineOptions {
  std::string manifest_path;
  std::string ground_truth_path;
  std::string out_dir;
  HyperParams hp;
  uint64_t seed = 0;
  SamplingMode sampling = SamplingMode::sparse_continuous;
  EncoderConfig encoder;
  bool render_plots = false;
  FarSubset far_subset = FarSubset::all;
};

struct PipelineRunRecord {
  std::string run_id;
  uint64_t seed = 0;
  std::vector<std::pair<std::string, double>> stage_seconds;
  std::map<std::string, std::string> artifacts;
  EvalReport report;
};

inline PipelineRunRecord run_pipeline(const PipelineOptions& opt) {
  namespace fs = std::filesystem;
  fs::create_directories(opt.out_dir);
  PipelineRunRecord rec;
  rec.seed = opt.seed;
  rec.run_id = "run-seed" + std::to_string(opt.seed);

  auto timed = [&](const std::string& name, auto&& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    const auto t1 = std::chrono::steady_clock::now();
    rec.stage_seconds.emplace_back(name, std::chrono::duration<double>(t1 - t0).count());
  };

  const std::string gen_ckpt = (fs::path(opt.out_dir) / "generator.ckpt").string();
  const std::string labels_dir = (fs::path(opt.out_dir) / "pseudo_labels").string();
  const std::string enc_ckpt = (fs::path(opt.out_dir) / "encoder.ckpt").string();
  const std::string scores_dir = (fs::path(opt.out_dir) / "scores").string();
  const std::string report_path = (fs::path(opt.out_dir) / "report.json").string();

  timed("train_generator", [&] {
    run_train_generator(opt.manifest_path, opt.hp, opt.seed, opt.sampling, gen_ckpt);
  });
  rec.artifacts["generator_checkpoint"] = gen_ckpt;

  timed("generate_pseudo_labels", [&] {
    run_generate_pseudo_labels(opt.manifest_path, gen_ckpt, opt.hp, labels_dir);
  });
  rec.artifacts["pseudo_label_dir"] = labels_dir;

  timed("finetune", [&] {
    run_finetune(opt.manifest_path, labels_dir, opt.hp, opt.seed, opt.encoder, enc_ckpt);
  });
  rec.artifacts["encoder_checkpoint"] = enc_ckpt;

  timed("score", [&] { run_score(opt.manifest_path, enc_ckpt, Split::test, scores_dir); });
  rec.artifacts["scores_dir"] = scores_dir;

  timed("eval", [&] {
    rec.report = run_eval(opt.manifest_path, scores_dir, opt.ground_truth_path,
                          opt.hp.far_threshold, opt.far_subset, report_path);
  });
  rec.artifacts["report"] = report_path;

  if (opt.render_plots) {
    const std::string plots_dir = (fs::path(opt.out_dir) / "plots").string();
    timed("plot", [&] {
      run_plot(opt.manifest_path, scores_dir, opt.ground_truth_path, opt.hp.far_threshold,
               plots_dir);
    });
    rec.artifacts["plots_dir"] = plots_dir;
  }

  nlohmann::ordered_json j;
  j["run_id"] = rec.run_id;
  j["seed"] = rec.seed;
  j["config"] = config_to_json(opt.hp);
  j["sampling"] = to_string(opt.sampling);
  j["disable_sga"] = opt.encoder.disable_sga;
  j["disable_hg"] = opt.encoder.disable_hg;
  nlohmann::ordered_json stages = nlohmann::ordered_json::array();
  for (const auto& [name, sec] : rec.stage_seconds)
    stages.push_back({{"stage", name}, {"seconds", sec}});
  j["stages"] = std::move(stages);
  nlohmann::ordered_json arts = nlohmann::ordered_json::object();
  for (const auto& [k, v] : rec.artifacts) arts[k] = v;
  j["artifacts"] = std::move(arts);
  const std::string rec_path = (fs::path(opt.out_dir) / "run_record.json").string();
  std::ofstream out(rec_path);
  if (!out) throw IoError("cannot write run record: " + rec_path);
  out << j.dump(2) << "\n";
  rec.artifacts["run_record"] = rec_path;
  return rec;
}

}  // namespace mist
