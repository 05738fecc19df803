// mist: two-stage weakly supervised video anomaly detection pipeline.
//
// Stage I trains a multiple-instance pseudo-label generator on bag-level
// labels; Stage II fine-tunes a self-guided-attention encoder on the
// resulting clip-level soft labels. Subcommands cover each stage plus
// synthetic data generation, scoring, evaluation and plotting.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mist/mist.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 2;
constexpr int kExitIo = 3;
constexpr int kExitMetric = 4;
constexpr int kExitInternal = 5;

struct CommonOpts {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<int64_t> seed_flag;

  mist::HyperParams resolve_config() const {
    mist::HyperParams hp;
    if (!config_path.empty()) hp = mist::load_config(config_path);
    for (const auto& kv : overrides) mist::apply_override(hp, kv);
    return hp;
  }

  uint64_t resolve_seed(const mist::HyperParams& hp) const {
    if (seed_flag) return static_cast<uint64_t>(*seed_flag);
    if (const char* env = std::getenv("MIST_SEED")) {
      try {
        size_t used = 0;
        long long v = std::stoll(env, &used);
        if (used != std::string(env).size()) throw std::invalid_argument(env);
        return static_cast<uint64_t>(v);
      } catch (const std::exception&) {
        throw mist::ValidationError(std::string("MIST_SEED is not an integer: ") + env);
      }
    }
    return static_cast<uint64_t>(hp.seed);
  }
};

void add_common(CLI::App* cmd, CommonOpts& c) {
  cmd->add_option("--config", c.config_path, "JSON config file (defaults used when omitted)");
  cmd->add_option("--set", c.overrides, "Config override, e.g. --set gen_iters=50")
      ->type_name("KEY=VALUE");
  cmd->add_option("--seed", c.seed_flag, "RNG seed (falls back to MIST_SEED, then config)");
}

mist::EncoderConfig encoder_config_from(const std::string& channels_csv, const mist::HyperParams& hp,
                                        bool disable_sga, bool disable_hg) {
  mist::EncoderConfig cfg;
  cfg.K = hp.K;
  cfg.disable_sga = disable_sga;
  cfg.disable_hg = disable_hg;
  if (!channels_csv.empty()) {
    std::vector<int64_t> widths;
    size_t pos = 0;
    while (pos <= channels_csv.size()) {
      size_t comma = channels_csv.find(',', pos);
      if (comma == std::string::npos) comma = channels_csv.size();
      try {
        widths.push_back(std::stoll(channels_csv.substr(pos, comma - pos)));
      } catch (const std::exception&) {
        throw mist::ValidationError("--channels must be five comma-separated integers");
      }
      pos = comma + 1;
    }
    if (widths.size() != 5 ||
        !std::all_of(widths.begin(), widths.end(), [](int64_t w) { return w >= 1; }))
      throw mist::ValidationError("--channels must be five comma-separated integers >= 1");
    std::copy(widths.begin(), widths.end(), cfg.block_channels.begin());
  }
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MIST two-stage self-training pipeline for video anomaly detection"};
  app.require_subcommand(1);

  // -- synth ----------------------------------------------------------------
  auto* synth = app.add_subcommand("synth", "Generate a synthetic desk-scale dataset");
  mist::SynthSpec spec;
  std::string synth_out;
  CommonOpts synth_common;
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--num-normal", spec.num_normal, "Normal videos per split");
  synth->add_option("--num-abnormal", spec.num_abnormal, "Abnormal videos per split");
  synth->add_option("--clips-min", spec.clips_min, "Minimum clips per video");
  synth->add_option("--clips-max", spec.clips_max, "Maximum clips per video");
  synth->add_option("--feature-dim", spec.feature_dim, "Feature dimension D");
  synth->add_option("--anomaly-shift", spec.anomaly_shift, "Planted mean shift");
  synth->add_option("--anomaly-min-len", spec.anomaly_min_len, "Minimum span length (clips)");
  synth->add_option("--anomaly-max-len", spec.anomaly_max_len, "Maximum span length (clips)");
  synth->add_option("--frames-per-clip", spec.frames_per_clip, "Frames per clip");
  synth->add_option("--clip-height", spec.clip_height, "Raw clip height");
  synth->add_option("--clip-width", spec.clip_width, "Raw clip width");
  synth->add_flag("--no-clips", [&spec](int64_t) { spec.emit_clips = false; },
                  "Skip raw pixel clips (features only)");
  add_common(synth, synth_common);

  // -- train-gen ------------------------------------------------------------
  auto* train_gen = app.add_subcommand("train-gen", "Stage I: train the pseudo-label generator");
  std::string tg_manifest, tg_out, tg_sampling = "sparse-continuous";
  CommonOpts tg_common;
  train_gen->add_option("--manifest", tg_manifest, "Dataset manifest")->required();
  train_gen->add_option("--out", tg_out, "Output checkpoint path")->required();
  train_gen->add_option("--sampling", tg_sampling, "sparse-continuous | uniform");
  add_common(train_gen, tg_common);

  // -- pseudo ---------------------------------------------------------------
  auto* pseudo = app.add_subcommand("pseudo", "Generate clip-level pseudo labels");
  std::string ps_manifest, ps_ckpt, ps_out;
  CommonOpts ps_common;
  pseudo->add_option("--manifest", ps_manifest, "Dataset manifest")->required();
  pseudo->add_option("--generator", ps_ckpt, "Generator checkpoint")->required();
  pseudo->add_option("--out", ps_out, "Output label directory")->required();
  add_common(pseudo, ps_common);

  // -- finetune ---------------------------------------------------------------
  auto* finetune = app.add_subcommand("finetune", "Stage II: fine-tune the SGA encoder");
  std::string ft_manifest, ft_labels, ft_out, ft_channels;
  bool ft_no_sga = false, ft_no_hg = false;
  CommonOpts ft_common;
  finetune->add_option("--manifest", ft_manifest, "Dataset manifest")->required();
  finetune->add_option("--labels", ft_labels, "Pseudo-label directory")->required();
  finetune->add_option("--out", ft_out, "Output checkpoint path")->required();
  finetune->add_option("--channels", ft_channels, "Backbone widths, e.g. 8,16,32,32,64");
  finetune->add_flag("--disable-sga", ft_no_sga, "Ablation: no self-guided attention");
  finetune->add_flag("--disable-hg", ft_no_hg, "Ablation: no guided classification head");
  add_common(finetune, ft_common);

  // -- score ------------------------------------------------------------------
  auto* score = app.add_subcommand("score", "Score videos with a trained checkpoint");
  std::string sc_manifest, sc_ckpt, sc_out, sc_split = "test", sc_attention;
  CommonOpts sc_common;
  score->add_option("--manifest", sc_manifest, "Dataset manifest")->required();
  score->add_option("--checkpoint", sc_ckpt, "Generator or encoder checkpoint")->required();
  score->add_option("--out", sc_out, "Output score directory")->required();
  score->add_option("--split", sc_split, "train | test");
  score->add_option("--attention-out", sc_attention, "Also export attention maps here");
  add_common(score, sc_common);

  // -- eval -------------------------------------------------------------------
  auto* eval = app.add_subcommand("eval", "Compute frame-level AUC, FAR and score gap");
  std::string ev_manifest, ev_scores, ev_gt, ev_out, ev_far_videos = "all";
  CommonOpts ev_common;
  eval->add_option("--manifest", ev_manifest, "Dataset manifest")->required();
  eval->add_option("--scores", ev_scores, "Score directory")->required();
  eval->add_option("--gt", ev_gt, "Frame-level ground truth JSON")->required();
  eval->add_option("--out", ev_out, "Report path (stdout summary always printed)")->required();
  eval->add_option("--far-videos", ev_far_videos, "FAR over all | normal | abnormal videos");
  add_common(eval, ev_common);

  // -- plot -------------------------------------------------------------------
  auto* plot = app.add_subcommand("plot", "Render per-video score curves with GT shading");
  std::string pl_manifest, pl_scores, pl_gt, pl_out;
  CommonOpts pl_common;
  plot->add_option("--manifest", pl_manifest, "Dataset manifest")->required();
  plot->add_option("--scores", pl_scores, "Score directory")->required();
  plot->add_option("--gt", pl_gt, "Frame-level ground truth JSON")->required();
  plot->add_option("--out", pl_out, "Output image directory")->required();
  add_common(plot, pl_common);

  // -- pipeline -----------------------------------------------------------------
  auto* pipeline = app.add_subcommand("pipeline", "Run Stage I + Stage II + evaluation");
  std::string pp_manifest, pp_gt, pp_out, pp_sampling = "sparse-continuous", pp_channels;
  std::string pp_far_videos = "all";
  bool pp_no_sga = false, pp_no_hg = false, pp_plots = false;
  CommonOpts pp_common;
  pipeline->add_option("--manifest", pp_manifest, "Dataset manifest")->required();
  pipeline->add_option("--gt", pp_gt, "Frame-level ground truth JSON")->required();
  pipeline->add_option("--out", pp_out, "Run output directory")->required();
  pipeline->add_option("--sampling", pp_sampling, "sparse-continuous | uniform");
  pipeline->add_option("--channels", pp_channels, "Backbone widths, e.g. 8,16,32,32,64");
  pipeline->add_option("--far-videos", pp_far_videos, "FAR over all | normal | abnormal videos");
  pipeline->add_flag("--disable-sga", pp_no_sga, "Ablation: no self-guided attention");
  pipeline->add_flag("--disable-hg", pp_no_hg, "Ablation: no guided classification head");
  pipeline->add_flag("--plots", pp_plots, "Render per-video plots");
  add_common(pipeline, pp_common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitValidation;
  }

  try {
    if (*synth) {
      mist::HyperParams hp = synth_common.resolve_config();
      const uint64_t seed = synth_common.resolve_seed(hp);
      auto res = mist::synth_dataset(spec, seed, synth_out);
      std::cout << "wrote " << res.manifest.videos.size() << " videos to " << synth_out << "\n"
                << "manifest: " << res.manifest_path << "\n"
                << "ground truth: " << res.ground_truth_path << "\n";
    } else if (*train_gen) {
      mist::HyperParams hp = tg_common.resolve_config();
      const uint64_t seed = tg_common.resolve_seed(hp);
      const auto mode = mist::sampling_mode_from_string(tg_sampling);
      mist::run_train_generator(tg_manifest, hp, seed, mode, tg_out);
      std::cout << "generator checkpoint: " << tg_out << "\n";
    } else if (*pseudo) {
      mist::HyperParams hp = ps_common.resolve_config();
      mist::run_generate_pseudo_labels(ps_manifest, ps_ckpt, hp, ps_out);
      std::cout << "pseudo labels: " << ps_out << "\n";
    } else if (*finetune) {
      mist::HyperParams hp = ft_common.resolve_config();
      const uint64_t seed = ft_common.resolve_seed(hp);
      const auto cfg = encoder_config_from(ft_channels, hp, ft_no_sga, ft_no_hg);
      mist::run_finetune(ft_manifest, ft_labels, hp, seed, cfg, ft_out);
      std::cout << "encoder checkpoint: " << ft_out << "\n";
    } else if (*score) {
      mist::run_score(sc_manifest, sc_ckpt, mist::split_from_string(sc_split), sc_out,
                      sc_attention);
      std::cout << "scores: " << sc_out << "\n";
    } else if (*eval) {
      mist::HyperParams hp = ev_common.resolve_config();
      auto rep = mist::run_eval(ev_manifest, ev_scores, ev_gt, hp.far_threshold,
                                mist::far_subset_from_string(ev_far_videos), ev_out);
      std::cout << "frame_auc=" << rep.frame_auc << " far=" << rep.far
                << " score_gap=" << rep.score_gap << "\n"
                << "report: " << ev_out << "\n";
    } else if (*plot) {
      mist::HyperParams hp = pl_common.resolve_config();
      mist::run_plot(pl_manifest, pl_scores, pl_gt, hp.far_threshold, pl_out);
      std::cout << "plots: " << pl_out << "\n";
    } else if (*pipeline) {
      mist::PipelineOptions opt;
      opt.manifest_path = pp_manifest;
      opt.ground_truth_path = pp_gt;
      opt.out_dir = pp_out;
      opt.hp = pp_common.resolve_config();
      opt.seed = pp_common.resolve_seed(opt.hp);
      opt.sampling = mist::sampling_mode_from_string(pp_sampling);
      opt.encoder = encoder_config_from(pp_channels, opt.hp, pp_no_sga, pp_no_hg);
      opt.render_plots = pp_plots;
      opt.far_subset = mist::far_subset_from_string(pp_far_videos);
      auto rec = mist::run_pipeline(opt);
      std::cout << "run " << rec.run_id << " complete\n"
                << "frame_auc=" << rec.report.frame_auc << " far=" << rec.report.far
                << " score_gap=" << rec.report.score_gap << "\n"
                << "report: " << rec.artifacts.at("report") << "\n";
    }
  } catch (const mist::ValidationError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const mist::MetricError& e) {
    std::cerr << "undefined metric: " << e.what() << "\n";
    return kExitMetric;
  } catch (const mist::IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kExitInternal;
  }
  return kExitOk;
}
