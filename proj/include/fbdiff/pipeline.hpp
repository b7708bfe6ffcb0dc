#pragma once

#include <filesystem>
#include <fstream>

#include "fbdiff/config.hpp"
#include "fbdiff/metrics.hpp"

namespace fbdiff {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Checkpoint config blocks
// ---------------------------------------------------------------------------

inline nlohmann::json ae_config_to_json(const AutoencoderConfig& c) {
  return nlohmann::json{{"channels", c.channels},
                        {"downsample", c.downsample},
                        {"temporal_kernel", c.temporal_kernel},
                        {"groups", c.groups},
                        {"n_fb_ratio", c.n_fb_ratio},
                        {"kl_weight", c.kl_weight},
                        {"variational", c.variational},
                        {"use_theta", c.use_theta},
                        {"theta_channels", c.theta_channels},
                        {"n_max", c.n_max},
                        {"mask_channel", c.mask_channel},
                        {"gn_eps", c.gn_eps}};
}

inline AutoencoderConfig ae_config_from_json(const nlohmann::json& j) {
  AutoencoderConfig c;
  c.channels = j.at("channels").get<std::vector<int>>();
  c.downsample = j.at("downsample").get<int>();
  c.temporal_kernel = j.at("temporal_kernel").get<int>();
  c.groups = j.at("groups").get<int>();
  c.n_fb_ratio = j.at("n_fb_ratio").get<double>();
  c.kl_weight = j.at("kl_weight").get<double>();
  c.variational = j.at("variational").get<bool>();
  c.use_theta = j.at("use_theta").get<bool>();
  c.theta_channels = j.at("theta_channels").get<int>();
  c.n_max = j.at("n_max").get<int>();
  c.mask_channel = j.at("mask_channel").get<bool>();
  c.gn_eps = j.at("gn_eps").get<double>();
  return c;
}

inline nlohmann::json denoiser_config_to_json(const DenoiserConfig& c) {
  return nlohmann::json{{"base_channels", c.base_channels}, {"mid_channels", c.mid_channels},
                        {"cond_channels", c.cond_channels}, {"time_dim", c.time_dim},
                        {"groups", c.groups},               {"temporal_kernel", c.temporal_kernel}};
}

inline DenoiserConfig denoiser_config_from_json(const nlohmann::json& j) {
  DenoiserConfig c;
  c.base_channels = j.at("base_channels").get<int>();
  c.mid_channels = j.at("mid_channels").get<int>();
  c.cond_channels = j.at("cond_channels").get<int>();
  c.time_dim = j.at("time_dim").get<int>();
  c.groups = j.at("groups").get<int>();
  c.temporal_kernel = j.at("temporal_kernel").get<int>();
  return c;
}

// ---------------------------------------------------------------------------
// Dataset on disk
// ---------------------------------------------------------------------------

inline void echo_config(const RunConfig& cfg, const std::string& out_dir) {
  fs::create_directories(out_dir);
  std::ofstream out(fs::path(out_dir) / "config.json", std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoFailure, "cannot write config echo in " + out_dir);
  out << config_to_json(cfg).dump(2) << "\n";
}

/// Generates the phantom corpus and writes FBSQ files plus the manifest.
inline std::string run_gen_data(const RunConfig& cfg, const std::string& out_dir) {
  echo_config(cfg, out_dir);
  fs::create_directories(fs::path(out_dir) / "cases");
  auto cases = make_dataset(cfg.seed, cfg.data);
  std::vector<ManifestEntry> entries;
  for (const auto& c : cases) {
    const std::string rel = "cases/" + c.seq.case_id + ".fbsq";
    write_fbsq((fs::path(out_dir) / rel).string(), c.seq.frames);
    entries.push_back({c.seq.case_id, rel, c.split});
  }
  const std::string manifest = (fs::path(out_dir) / "manifest.json").string();
  write_manifest(manifest, entries);
  return manifest;
}

struct LoadedDataset {
  std::vector<Sequence> sequences;
  std::vector<std::string> splits;

  std::vector<const Sequence*> split(const std::string& name) const {
    std::vector<const Sequence*> out;
    for (size_t i = 0; i < sequences.size(); ++i)
      if (splits[i] == name) out.push_back(&sequences[i]);
    return out;
  }
};

inline LoadedDataset load_dataset(const std::string& manifest_path) {
  LoadedDataset ds;
  for (const auto& e : read_manifest(manifest_path)) {
    Sequence s;
    s.frames = read_fbsq(resolve_manifest_path(manifest_path, e.path));
    s.case_id = e.case_id;
    ds.sequences.push_back(std::move(s));
    ds.splits.push_back(e.split);
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Training stages
// ---------------------------------------------------------------------------

inline void save_vae_checkpoint(const std::string& path, VaeModel<float>& model,
                                const char* kind, uint64_t seed, const StageMetrics& metrics) {
  nlohmann::json cfg{{"kind", kind},
                     {"vae", ae_config_to_json(model.cfg)},
                     {"seed", seed},
                     {"metrics",
                      {{"first_epoch_loss", metrics.first_epoch_loss},
                       {"final_epoch_loss", metrics.final_epoch_loss}}}};
  ParamList<float> params = model.params();
  write_checkpoint(path, cfg, params);
}

inline VaeModel<float> load_vae_checkpoint(const Checkpoint& ck) {
  require(ck.config.contains("vae"), ErrorCode::BadCheckpoint,
          "checkpoint carries no autoencoder config");
  VaeModel<float> model;
  model.cfg = ae_config_from_json(ck.config.at("vae"));
  model.init(0);
  ParamList<float> params = model.params();
  load_params(ck, params);
  return model;
}

/// Stage 1: reconstruction pretraining of the autoencoder plus motion priors.
inline StageMetrics run_train_vae(const RunConfig& cfg, const std::string& manifest_path,
                                  const std::string& out_ckpt) {
  auto ds = load_dataset(manifest_path);
  auto train = ds.split("train");
  VaeModel<float> model;
  model.cfg = cfg.vae;
  model.cfg.mask_channel = false;
  model.init(cfg.seed);
  auto metrics = train_autoencoder(model, train, cfg.train_vae, cfg.seed, /*masked_input=*/false);
  save_vae_checkpoint(out_ckpt, model, "vae_stage1", cfg.seed, metrics);
  return metrics;
}

/// Stage 2: inpainting finetune from the stage-1 weights.
inline StageMetrics run_finetune_inpaint(const RunConfig& cfg, const std::string& manifest_path,
                                         const std::string& stage1_ckpt,
                                         const std::string& out_ckpt) {
  auto ds = load_dataset(manifest_path);
  auto train = ds.split("train");
  const Checkpoint ck1 = read_checkpoint(stage1_ckpt);
  require(ck1.config.value("kind", "") == "vae_stage1", ErrorCode::BadCheckpoint,
          "expected a vae_stage1 checkpoint: " + stage1_ckpt);
  VaeModel<float> model;
  model.cfg = ae_config_from_json(ck1.config.at("vae"));
  model.cfg.mask_channel = true;
  model.init(cfg.seed ^ 0x2ULL);
  init_stage2_from_stage1(model, ck1);
  auto metrics =
      train_autoencoder(model, train, cfg.train_inpaint, cfg.seed ^ 0x2ULL, /*masked_input=*/true);
  save_vae_checkpoint(out_ckpt, model, "vae_stage2", cfg.seed, metrics);
  return metrics;
}

/// Stage 3: basis-conditioned latent diffusion (joint by default).
inline DiffusionTrainResult run_train_diff(const RunConfig& cfg, const std::string& manifest_path,
                                           const std::string& stage2_ckpt,
                                           const std::string& out_ckpt) {
  auto ds = load_dataset(manifest_path);
  auto train = ds.split("train");
  const Checkpoint ck2 = read_checkpoint(stage2_ckpt);
  require(ck2.config.value("kind", "") == "vae_stage2", ErrorCode::BadCheckpoint,
          "expected a vae_stage2 checkpoint: " + stage2_ckpt);
  VaeModel<float> stage2 = load_vae_checkpoint(ck2);

  DenoiserModel<float> denoiser;
  denoiser.cfg = cfg.denoiser;
  denoiser.init(cfg.seed ^ 0x3ULL, stage2.cfg.latent_channels(), stage2.cfg.downsample);

  const NoiseSchedule schedule = cfg.schedule();
  auto result =
      train_diffusion(denoiser, stage2, train, schedule, cfg.train_diff, cfg.seed ^ 0x3ULL);

  ParamList<float> params;
  ParamList<float> dn = denoiser.params();
  ParamList<float> vp = stage2.params();
  params.add_all(dn, "denoiser.");
  params.add_all(vp, "vae.");
  nlohmann::json ck_cfg{
      {"kind", "diffusion"},
      {"vae", ae_config_to_json(stage2.cfg)},
      {"denoiser", denoiser_config_to_json(denoiser.cfg)},
      {"schedule", {{"T", cfg.diffusion_T}, {"beta_min", cfg.beta_min}, {"beta_max", cfg.beta_max}}},
      {"latent_shift", result.latent_stats.shift},
      {"latent_scale", result.latent_stats.scale},
      {"flags",
       {{"use_bases", cfg.train_diff.flags.use_bases},
        {"use_coarse", cfg.train_diff.flags.use_coarse},
        {"basis_parts", cfg.train_diff.flags.basis_parts}}},
      {"seed", cfg.seed},
      {"metrics",
       {{"first_100_loss", result.first_100_loss}, {"last_100_loss", result.last_100_loss}}}};
  write_checkpoint(out_ckpt, ck_cfg, params);
  return result;
}

/// Everything needed to sample from a diffusion checkpoint.
struct DiffusionBundle {
  VaeModel<float> stage2;
  DenoiserModel<float> denoiser;
  NoiseSchedule schedule;
  LatentStats latent_stats;
  ConditionFlags flags;
};

inline DiffusionBundle load_diffusion_checkpoint(const std::string& path) {
  const Checkpoint ck = read_checkpoint(path);
  require(ck.config.value("kind", "") == "diffusion", ErrorCode::BadCheckpoint,
          "expected a diffusion checkpoint: " + path);
  DiffusionBundle b;
  b.stage2.cfg = ae_config_from_json(ck.config.at("vae"));
  b.stage2.init(0);
  b.denoiser.cfg = denoiser_config_from_json(ck.config.at("denoiser"));
  b.denoiser.init(0, b.stage2.cfg.latent_channels(), b.stage2.cfg.downsample);
  ParamList<float> params;
  ParamList<float> dn = b.denoiser.params();
  ParamList<float> vp = b.stage2.params();
  params.add_all(dn, "denoiser.");
  params.add_all(vp, "vae.");
  load_params(ck, params);
  const auto& s = ck.config.at("schedule");
  b.schedule = build_schedule(s.at("T").get<int64_t>(), s.at("beta_min").get<double>(),
                              s.at("beta_max").get<double>());
  b.latent_stats.shift = ck.config.at("latent_shift").get<double>();
  b.latent_stats.scale = ck.config.at("latent_scale").get<double>();
  const auto& f = ck.config.at("flags");
  b.flags.use_bases = f.at("use_bases").get<bool>();
  b.flags.use_coarse = f.at("use_coarse").get<bool>();
  b.flags.basis_parts = f.at("basis_parts").get<std::string>();
  return b;
}

// ---------------------------------------------------------------------------
// Inference commands
// ---------------------------------------------------------------------------

/// Interpolates a case from its endpoints; writes pred.fbsq.
inline std::string run_interpolate(const RunConfig& cfg, const std::string& diff_ckpt,
                                   const std::string& case_path, const std::string& out_dir) {
  echo_config(cfg, out_dir);
  DiffusionBundle bundle = load_diffusion_checkpoint(diff_ckpt);
  Tensor<float> truth = read_fbsq(case_path);
  const int64_t N = truth.dim(0);
  auto first = detail::frame_at(truth, 0);
  auto last = detail::frame_at(truth, N - 1);
  auto masked = masked_from_endpoints(first, last, N);
  auto cond = make_condition(bundle.stage2, masked, bundle.flags);
  auto pred = sample_ddpm(cond, bundle.denoiser, bundle.stage2, bundle.schedule,
                          bundle.latent_stats, cfg.seed, cfg.sample_steps);
  const std::string out_path = (fs::path(out_dir) / "pred.fbsq").string();
  write_fbsq(out_path, pred.frames);
  return out_path;
}

/// Benchmark over the named split; returns rows and writes benchmark.csv.
inline std::vector<MetricRow> run_eval(const RunConfig& cfg, const std::string& manifest_path,
                                       const std::string& stage1_ckpt,
                                       const std::string& stage2_ckpt,
                                       const std::string& diff_ckpt, const std::string& out_dir,
                                       const std::string& split_name = "test") {
  // all referenced checkpoints must exist before any sampling starts
  for (const std::string& p : {stage1_ckpt, stage2_ckpt, diff_ckpt})
    if (!p.empty() && !fs::exists(p))
      throw Error(ErrorCode::IoFailure, "checkpoint does not exist: " + p);

  echo_config(cfg, out_dir);
  auto ds = load_dataset(manifest_path);
  auto cases = ds.split(split_name);

  std::vector<std::unique_ptr<Interpolator>> owned;
  VaeModel<float> stage1, stage2;
  DiffusionBundle bundle;
  owned.push_back(std::make_unique<CrossfadeModel>());
  if (!stage1_ckpt.empty()) {
    stage1 = load_vae_checkpoint(read_checkpoint(stage1_ckpt));
    owned.push_back(std::make_unique<LatentLerpModel>(&stage1));
  }
  if (!stage2_ckpt.empty()) {
    stage2 = load_vae_checkpoint(read_checkpoint(stage2_ckpt));
    owned.push_back(std::make_unique<InpaintModel>(&stage2));
  }
  if (!diff_ckpt.empty()) {
    bundle = load_diffusion_checkpoint(diff_ckpt);
    owned.push_back(std::make_unique<FbDiffModel>(&bundle.stage2, &bundle.denoiser,
                                                  &bundle.schedule, bundle.latent_stats,
                                                  cfg.sample_steps, bundle.flags));
  }
  std::vector<const Interpolator*> models;
  for (const auto& m : owned) models.push_back(m.get());

  auto rows = run_benchmark(cases, models, cfg.seed, split_name);
  std::ofstream out(fs::path(out_dir) / "benchmark.csv", std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoFailure, "cannot write benchmark.csv in " + out_dir);
  out << benchmark_csv(rows);
  return rows;
}

/// Writes the per-bin magnitude maps of the adapted bases as PGM images,
/// plus the two endpoint frames.
inline int64_t run_export_bases(const RunConfig& cfg, const std::string& stage2_ckpt,
                                const std::string& case_path, const std::string& out_dir) {
  echo_config(cfg, out_dir);
  const Checkpoint ck = read_checkpoint(stage2_ckpt);
  require(ck.config.value("kind", "") == "vae_stage2", ErrorCode::BadCheckpoint,
          "expected a vae_stage2 checkpoint: " + stage2_ckpt);
  VaeModel<float> stage2 = load_vae_checkpoint(ck);
  Tensor<float> truth = read_fbsq(case_path);
  Sequence seq{truth, "export"};
  auto masked = mask_sequence(seq);
  auto inp = inpaint_infer(stage2, masked);

  const int64_t K = inp.bases.frequency_count();
  const int64_t C = inp.bases.re.dim(1), h = inp.bases.re.dim(2), w = inp.bases.re.dim(3);
  for (int64_t k = 0; k < K; ++k) {
    // channel-averaged modulus, then min-max normalized
    std::vector<float> map(h * w, 0.0f);
    for (int64_t c = 0; c < C; ++c)
      for (int64_t i = 0; i < h * w; ++i) {
        const float re = inp.bases.re.vals()[(k * C + c) * h * w + i];
        const float im = inp.bases.im.vals()[(k * C + c) * h * w + i];
        map[i] += std::sqrt(re * re + im * im);
      }
    float lo = map[0], hi = map[0];
    for (float v : map) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    const float range = hi - lo > 0 ? hi - lo : 1.0f;
    for (float& v : map) v = (v - lo) / range;
    write_pgm((fs::path(out_dir) / ("f" + std::to_string(k) + ".pgm")).string(), map, h, w);
  }

  const int64_t N = truth.dim(0), H = truth.dim(2), W = truth.dim(3);
  const int64_t fsz = truth.numel() / N;
  std::vector<float> ep(truth.ptr(), truth.ptr() + fsz);
  write_pgm((fs::path(out_dir) / "frame_first.pgm").string(), ep, H, W);
  ep.assign(truth.ptr() + (N - 1) * fsz, truth.ptr() + N * fsz);
  write_pgm((fs::path(out_dir) / "frame_last.pgm").string(), ep, H, W);
  return K;
}

}  // namespace fbdiff
