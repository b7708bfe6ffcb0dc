// Command-line driver for the phantom-interpolation pipeline:
// data generation, the three training stages, sampling, evaluation, and
// basis-map export.
#include <cstdlib>
#include <iostream>

#include <CLI11.hpp>

#include "fbdiff/pipeline.hpp"
#include "fbdiff/threading.hpp"

namespace {

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir;
  uint64_t seed = 0;
  bool seed_set = false;
  int threads = 1;
  bool threads_set = false;
};

void add_common(CLI::App* cmd, CommonArgs& a) {
  cmd->add_option("--config", a.config_path, "JSON config file");
  cmd->add_option("--set", a.overrides, "config override key=value (repeatable)");
  cmd->add_option("--out", a.out_dir, "output directory (falls back to $FBDIFF_OUT)");
  cmd->add_option("--seed", a.seed, "master seed")->each([&](const std::string&) {
    a.seed_set = true;
  });
  cmd->add_option("--threads", a.threads, "worker threads")->each([&](const std::string&) {
    a.threads_set = true;
  });
}

fbdiff::RunConfig resolve_config(CommonArgs& a) {
  fbdiff::RunConfig cfg = fbdiff::load_config(a.config_path, a.overrides);
  if (a.seed_set) cfg.seed = a.seed;
  if (a.threads_set) cfg.threads = a.threads;
  fbdiff::set_num_threads(cfg.threads);
  return cfg;
}

std::string resolve_out(const CommonArgs& a, const char* subdir) {
  if (!a.out_dir.empty()) return a.out_dir;
  if (const char* env = std::getenv("FBDIFF_OUT"))
    return (std::filesystem::path(env) / subdir).string();
  throw fbdiff::Error(fbdiff::ErrorCode::InvalidArgument,
                      "no output directory: pass --out or set FBDIFF_OUT");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fourier-basis-guided diffusion for phantom sequence interpolation"};
  app.require_subcommand(1);

  CommonArgs gen, tv, fi, td, ip, ev, eb;
  std::string data_manifest, stage1_ckpt, stage2_ckpt, diff_ckpt, in_case, split = "test";

  CLI::App* c_gen = app.add_subcommand("gen-data", "generate the phantom dataset");
  add_common(c_gen, gen);

  CLI::App* c_tv = app.add_subcommand("train-vae", "stage 1: reconstruction pretraining");
  add_common(c_tv, tv);
  c_tv->add_option("--data", data_manifest, "dataset manifest")->required();

  CLI::App* c_fi = app.add_subcommand("finetune-inpaint", "stage 2: inpainting finetune");
  add_common(c_fi, fi);
  c_fi->add_option("--data", data_manifest, "dataset manifest")->required();
  c_fi->add_option("--stage1", stage1_ckpt, "stage-1 checkpoint")->required();

  CLI::App* c_td = app.add_subcommand("train-diff", "stage 3: conditional diffusion");
  add_common(c_td, td);
  c_td->add_option("--data", data_manifest, "dataset manifest")->required();
  c_td->add_option("--stage2", stage2_ckpt, "stage-2 checkpoint")->required();

  CLI::App* c_ip = app.add_subcommand("interpolate", "sample intermediate frames for one case");
  add_common(c_ip, ip);
  c_ip->add_option("--diff", diff_ckpt, "diffusion checkpoint")->required();
  c_ip->add_option("--in", in_case, "input FBSQ case")->required();

  CLI::App* c_ev = app.add_subcommand("eval", "benchmark models on a split");
  add_common(c_ev, ev);
  c_ev->add_option("--data", data_manifest, "dataset manifest")->required();
  c_ev->add_option("--stage1", stage1_ckpt, "stage-1 checkpoint (adds latent_lerp)");
  c_ev->add_option("--stage2", stage2_ckpt, "stage-2 checkpoint (adds inpaint_vae)");
  c_ev->add_option("--diff", diff_ckpt, "diffusion checkpoint (adds fb_diff)");
  c_ev->add_option("--split", split, "dataset split to evaluate")->capture_default_str();

  CLI::App* c_eb = app.add_subcommand("export-bases", "write basis magnitude maps as PGM");
  add_common(c_eb, eb);
  c_eb->add_option("--stage2", stage2_ckpt, "stage-2 checkpoint")->required();
  c_eb->add_option("--in", in_case, "input FBSQ case")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (c_gen->parsed()) {
      auto cfg = resolve_config(gen);
      const std::string out = resolve_out(gen, "data");
      const std::string manifest = fbdiff::run_gen_data(cfg, out);
      std::cout << "wrote " << manifest << "\n";
    } else if (c_tv->parsed()) {
      auto cfg = resolve_config(tv);
      const std::string out = resolve_out(tv, "stage1");
      fbdiff::echo_config(cfg, out);
      const std::string ckpt = (std::filesystem::path(out) / "vae_stage1.fbck").string();
      auto metrics = fbdiff::run_train_vae(cfg, data_manifest, ckpt);
      std::cout << "wrote " << ckpt << " (final epoch loss " << metrics.final_epoch_loss
                << ")\n";
    } else if (c_fi->parsed()) {
      auto cfg = resolve_config(fi);
      const std::string out = resolve_out(fi, "stage2");
      fbdiff::echo_config(cfg, out);
      const std::string ckpt = (std::filesystem::path(out) / "vae_stage2.fbck").string();
      auto metrics = fbdiff::run_finetune_inpaint(cfg, data_manifest, stage1_ckpt, ckpt);
      std::cout << "wrote " << ckpt << " (final epoch loss " << metrics.final_epoch_loss
                << ")\n";
    } else if (c_td->parsed()) {
      auto cfg = resolve_config(td);
      const std::string out = resolve_out(td, "diffusion");
      fbdiff::echo_config(cfg, out);
      const std::string ckpt = (std::filesystem::path(out) / "diffusion.fbck").string();
      auto result = fbdiff::run_train_diff(cfg, data_manifest, stage2_ckpt, ckpt);
      std::cout << "wrote " << ckpt << " (loss " << result.first_100_loss << " -> "
                << result.last_100_loss << ")\n";
    } else if (c_ip->parsed()) {
      auto cfg = resolve_config(ip);
      const std::string out = resolve_out(ip, "interpolate");
      const std::string pred = fbdiff::run_interpolate(cfg, diff_ckpt, in_case, out);
      std::cout << "wrote " << pred << "\n";
    } else if (c_ev->parsed()) {
      auto cfg = resolve_config(ev);
      const std::string out = resolve_out(ev, "eval");
      auto rows = fbdiff::run_eval(cfg, data_manifest, stage1_ckpt, stage2_ckpt, diff_ckpt, out,
                                   split);
      std::cout << fbdiff::benchmark_csv(rows);
      std::cout << "wrote " << (std::filesystem::path(out) / "benchmark.csv").string() << "\n";
    } else if (c_eb->parsed()) {
      auto cfg = resolve_config(eb);
      const std::string out = resolve_out(eb, "bases");
      const int64_t k = fbdiff::run_export_bases(cfg, stage2_ckpt, in_case, out);
      std::cout << "wrote " << k << " basis maps to " << out << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
