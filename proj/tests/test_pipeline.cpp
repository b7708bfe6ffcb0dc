#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "fbdiff/pipeline.hpp"

namespace fs = std::filesystem;
using fbdiff::RunConfig;

namespace {

RunConfig mini_config() {
  RunConfig cfg;
  cfg.seed = 7;
  cfg.threads = 1;
  cfg.data.cases_train = 6;
  cfg.data.cases_val = 2;
  cfg.data.cases_test = 2;
  cfg.data.height = 16;
  cfg.data.width = 16;
  cfg.data.frames_min = 6;
  cfg.data.frames_max = 8;
  cfg.data.phantom.base_radius = 4.0;
  cfg.data.phantom.amplitude = 2.0;
  cfg.data.phantom.center_jitter = 1.0;
  cfg.vae.channels = {4, 8};
  cfg.vae.downsample = 2;
  cfg.vae.theta_channels = 4;
  cfg.train_vae.epochs = 2;
  cfg.train_inpaint.epochs = 2;
  cfg.diffusion_T = 20;
  cfg.denoiser.base_channels = 8;
  cfg.denoiser.mid_channels = 12;
  cfg.denoiser.cond_channels = 4;
  cfg.denoiser.time_dim = 16;
  cfg.train_diff.steps = 30;
  cfg.sample_steps = 10;
  return cfg;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

bool dirs_identical(const fs::path& a, const fs::path& b) {
  std::vector<std::string> rel;
  for (const auto& e : fs::recursive_directory_iterator(a))
    if (e.is_regular_file()) rel.push_back(fs::relative(e.path(), a).string());
  std::sort(rel.begin(), rel.end());
  for (const auto& r : rel)
    if (read_bytes(a / r) != read_bytes(b / r)) return false;
  return true;
}

}  // namespace

TEST(Pipeline, GenDataIsByteDeterministic) {
  fbdiff::set_num_threads(1);
  const auto root = fs::temp_directory_path() / "fbdiff_pipe_gen";
  fs::remove_all(root);
  RunConfig cfg = mini_config();
  fbdiff::run_gen_data(cfg, (root / "a").string());
  fbdiff::run_gen_data(cfg, (root / "b").string());
  EXPECT_TRUE(dirs_identical(root / "a", root / "b"));
}

TEST(Pipeline, EndToEndMiniRun) {
  fbdiff::set_num_threads(1);
  const auto root = fs::temp_directory_path() / "fbdiff_pipe_e2e";
  fs::remove_all(root);
  RunConfig cfg = mini_config();

  const std::string manifest = fbdiff::run_gen_data(cfg, (root / "data").string());
  ASSERT_TRUE(fs::exists(manifest));
  auto ds = fbdiff::load_dataset(manifest);
  EXPECT_EQ(ds.sequences.size(), 10u);
  EXPECT_EQ(ds.split("train").size(), 6u);
  EXPECT_EQ(ds.split("test").size(), 2u);

  const std::string s1 = (root / "s1.fbck").string();
  auto m1 = fbdiff::run_train_vae(cfg, manifest, s1);
  EXPECT_TRUE(std::isfinite(m1.final_epoch_loss));

  const std::string s2 = (root / "s2.fbck").string();
  auto m2 = fbdiff::run_finetune_inpaint(cfg, manifest, s1, s2);
  EXPECT_TRUE(std::isfinite(m2.final_epoch_loss));

  const std::string dck = (root / "diff.fbck").string();
  auto dres = fbdiff::run_train_diff(cfg, manifest, s2, dck);
  EXPECT_GT(dres.latent_stats.scale, 0.0);

  // wrong checkpoint kinds are rejected by name
  EXPECT_THROW(fbdiff::run_finetune_inpaint(cfg, manifest, s2, (root / "x.fbck").string()),
               fbdiff::Error);
  EXPECT_THROW(fbdiff::run_train_diff(cfg, manifest, s1, (root / "y.fbck").string()),
               fbdiff::Error);

  // interpolate one test case
  auto entries = fbdiff::read_manifest(manifest);
  std::string test_case;
  for (const auto& e : entries)
    if (e.split == "test") test_case = fbdiff::resolve_manifest_path(manifest, e.path);
  ASSERT_FALSE(test_case.empty());
  const std::string pred = fbdiff::run_interpolate(cfg, dck, test_case, (root / "interp").string());
  auto pred_frames = fbdiff::read_fbsq(pred);
  auto truth_frames = fbdiff::read_fbsq(test_case);
  EXPECT_EQ(pred_frames.shape(), truth_frames.shape());

  // evaluation produces one row per model and a CSV with the pinned header
  auto rows = fbdiff::run_eval(cfg, manifest, s1, s2, dck, (root / "eval").string());
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0].model, "crossfade");
  EXPECT_EQ(rows[1].model, "latent_lerp");
  EXPECT_EQ(rows[2].model, "inpaint_vae");
  EXPECT_EQ(rows[3].model, "fb_diff");
  const std::string csv = read_bytes(root / "eval" / "benchmark.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')),
            "model,split,psnr_mean,psnr_std,tconsist_mean,midmost_psnr_mean,midmost_psnr_std");

  // missing checkpoint fails before evaluation starts, naming the path
  try {
    fbdiff::run_eval(cfg, manifest, s1, s2, (root / "nope.fbck").string(),
                     (root / "eval2").string());
    FAIL();
  } catch (const fbdiff::Error& e) {
    EXPECT_NE(std::string(e.what()).find("nope.fbck"), std::string::npos);
  }

  // basis export: one PGM per retained frequency bin, plus the endpoints
  const int64_t k = fbdiff::run_export_bases(cfg, s2, test_case, (root / "bases").string());
  const int64_t n_frames = truth_frames.dim(0);
  EXPECT_EQ(k, fbdiff::AutoencoderConfig{cfg.vae}.n_fb_for(n_frames));
  for (int64_t i = 0; i < k; ++i)
    EXPECT_TRUE(fs::exists(root / "bases" / ("f" + std::to_string(i) + ".pgm")));
  EXPECT_FALSE(fs::exists(root / "bases" / ("f" + std::to_string(k) + ".pgm")));
  EXPECT_TRUE(fs::exists(root / "bases" / "frame_first.pgm"));
  EXPECT_TRUE(fs::exists(root / "bases" / "frame_last.pgm"));

  // every stage echoed its effective config
  for (const char* sub : {"data", "interp", "eval", "bases"})
    EXPECT_TRUE(fs::exists(root / sub / "config.json")) << sub;
}

TEST(Pipeline, DiffusionCheckpointRoundTrip) {
  fbdiff::set_num_threads(1);
  const auto root = fs::temp_directory_path() / "fbdiff_pipe_ck";
  fs::remove_all(root);
  RunConfig cfg = mini_config();
  cfg.train_diff.steps = 5;
  const std::string manifest = fbdiff::run_gen_data(cfg, (root / "data").string());
  const std::string s1 = (root / "s1.fbck").string();
  fbdiff::run_train_vae(cfg, manifest, s1);
  const std::string s2 = (root / "s2.fbck").string();
  fbdiff::run_finetune_inpaint(cfg, manifest, s1, s2);
  const std::string dck = (root / "diff.fbck").string();
  fbdiff::run_train_diff(cfg, manifest, s2, dck);

  auto bundle = fbdiff::load_diffusion_checkpoint(dck);
  EXPECT_EQ(bundle.schedule.T, cfg.diffusion_T);
  EXPECT_GT(bundle.latent_stats.scale, 0.0);
  EXPECT_TRUE(bundle.flags.use_bases);
  EXPECT_EQ(bundle.stage2.cfg.mask_channel, true);
}
