#pragma once

#include <fstream>
#include <string>

#include <json.hpp>

#include "fbdiff/diffusion.hpp"
#include "fbdiff/phantom.hpp"
#include "fbdiff/vae.hpp"

namespace fbdiff {

/// Whole-pipeline configuration. Every field has a default; files and
/// command-line overrides layer on top (defaults <- file <- overrides).
struct RunConfig {
  uint64_t seed = 7;
  int threads = 1;

  DatasetSpec data;

  AutoencoderConfig vae;
  TrainConfig train_vae{.epochs = 60, .batch = 2, .lr = 3e-4, .weight_decay = 1e-5,
                        .warmup_frac = 0.05, .freeze_theta = false};
  TrainConfig train_inpaint{.epochs = 40, .batch = 2, .lr = 3e-4, .weight_decay = 1e-5,
                            .warmup_frac = 0.05, .freeze_theta = false};

  int64_t diffusion_T = 1000;
  double beta_min = 1e-4;
  double beta_max = 0.02;
  DenoiserConfig denoiser;
  DiffusionTrainConfig train_diff;
  int64_t sample_steps = 200;

  NoiseSchedule schedule() const { return build_schedule(diffusion_T, beta_min, beta_max); }
};

inline nlohmann::json config_to_json(const RunConfig& c) {
  return nlohmann::json{
      {"seed", c.seed},
      {"threads", c.threads},
      {"data",
       {{"cases_train", c.data.cases_train},
        {"cases_val", c.data.cases_val},
        {"cases_test", c.data.cases_test},
        {"height", c.data.height},
        {"width", c.data.width},
        {"frames_min", c.data.frames_min},
        {"frames_max", c.data.frames_max},
        {"base_radius", c.data.phantom.base_radius},
        {"amplitude", c.data.phantom.amplitude},
        {"nonlinearity", c.data.phantom.nonlinearity},
        {"period_fraction", c.data.phantom.period_fraction},
        {"center_jitter", c.data.phantom.center_jitter},
        {"noise_sigma", c.data.phantom.noise_sigma}}},
      {"vae",
       {{"channels", c.vae.channels},
        {"downsample", c.vae.downsample},
        {"temporal_kernel", c.vae.temporal_kernel},
        {"groups", c.vae.groups},
        {"n_fb_ratio", c.vae.n_fb_ratio},
        {"kl_weight", c.vae.kl_weight},
        {"variational", c.vae.variational},
        {"use_theta", c.vae.use_theta},
        {"theta_channels", c.vae.theta_channels},
        {"n_max", c.vae.n_max},
        {"gn_eps", c.vae.gn_eps}}},
      {"train_vae",
       {{"epochs", c.train_vae.epochs},
        {"batch", c.train_vae.batch},
        {"lr", c.train_vae.lr},
        {"weight_decay", c.train_vae.weight_decay},
        {"warmup_frac", c.train_vae.warmup_frac}}},
      {"train_inpaint",
       {{"epochs", c.train_inpaint.epochs},
        {"batch", c.train_inpaint.batch},
        {"lr", c.train_inpaint.lr},
        {"weight_decay", c.train_inpaint.weight_decay},
        {"warmup_frac", c.train_inpaint.warmup_frac},
        {"freeze_theta", c.train_inpaint.freeze_theta}}},
      {"diffusion",
       {{"T", c.diffusion_T},
        {"beta_min", c.beta_min},
        {"beta_max", c.beta_max},
        {"base_channels", c.denoiser.base_channels},
        {"mid_channels", c.denoiser.mid_channels},
        {"cond_channels", c.denoiser.cond_channels},
        {"time_dim", c.denoiser.time_dim},
        {"groups", c.denoiser.groups},
        {"temporal_kernel", c.denoiser.temporal_kernel}}},
      {"train_diff",
       {{"steps", c.train_diff.steps},
        {"batch", c.train_diff.batch},
        {"lr", c.train_diff.lr},
        {"weight_decay", c.train_diff.weight_decay},
        {"warmup_frac", c.train_diff.warmup_frac},
        {"freeze_stage2", c.train_diff.freeze_stage2},
        {"use_bases", c.train_diff.flags.use_bases},
        {"use_coarse", c.train_diff.flags.use_coarse},
        {"basis_parts", c.train_diff.flags.basis_parts}}},
      {"sample", {{"steps", c.sample_steps}}}};
}

inline RunConfig config_from_json(const nlohmann::json& j) {
  RunConfig c;
  c.seed = j.at("seed").get<uint64_t>();
  c.threads = j.at("threads").get<int>();
  const auto& d = j.at("data");
  c.data.cases_train = d.at("cases_train").get<int>();
  c.data.cases_val = d.at("cases_val").get<int>();
  c.data.cases_test = d.at("cases_test").get<int>();
  c.data.height = d.at("height").get<int64_t>();
  c.data.width = d.at("width").get<int64_t>();
  c.data.frames_min = d.at("frames_min").get<int>();
  c.data.frames_max = d.at("frames_max").get<int>();
  c.data.phantom.base_radius = d.at("base_radius").get<double>();
  c.data.phantom.amplitude = d.at("amplitude").get<double>();
  c.data.phantom.nonlinearity = d.at("nonlinearity").get<double>();
  c.data.phantom.period_fraction = d.at("period_fraction").get<double>();
  c.data.phantom.center_jitter = d.at("center_jitter").get<double>();
  c.data.phantom.noise_sigma = d.at("noise_sigma").get<double>();
  const auto& v = j.at("vae");
  c.vae.channels = v.at("channels").get<std::vector<int>>();
  c.vae.downsample = v.at("downsample").get<int>();
  c.vae.temporal_kernel = v.at("temporal_kernel").get<int>();
  c.vae.groups = v.at("groups").get<int>();
  c.vae.n_fb_ratio = v.at("n_fb_ratio").get<double>();
  c.vae.kl_weight = v.at("kl_weight").get<double>();
  c.vae.variational = v.at("variational").get<bool>();
  c.vae.use_theta = v.at("use_theta").get<bool>();
  c.vae.theta_channels = v.at("theta_channels").get<int>();
  c.vae.n_max = v.at("n_max").get<int>();
  c.vae.gn_eps = v.at("gn_eps").get<double>();
  const auto& tv = j.at("train_vae");
  c.train_vae.epochs = tv.at("epochs").get<int>();
  c.train_vae.batch = tv.at("batch").get<int>();
  c.train_vae.lr = tv.at("lr").get<double>();
  c.train_vae.weight_decay = tv.at("weight_decay").get<double>();
  c.train_vae.warmup_frac = tv.at("warmup_frac").get<double>();
  const auto& ti = j.at("train_inpaint");
  c.train_inpaint.epochs = ti.at("epochs").get<int>();
  c.train_inpaint.batch = ti.at("batch").get<int>();
  c.train_inpaint.lr = ti.at("lr").get<double>();
  c.train_inpaint.weight_decay = ti.at("weight_decay").get<double>();
  c.train_inpaint.warmup_frac = ti.at("warmup_frac").get<double>();
  c.train_inpaint.freeze_theta = ti.at("freeze_theta").get<bool>();
  const auto& df = j.at("diffusion");
  c.diffusion_T = df.at("T").get<int64_t>();
  c.beta_min = df.at("beta_min").get<double>();
  c.beta_max = df.at("beta_max").get<double>();
  c.denoiser.base_channels = df.at("base_channels").get<int>();
  c.denoiser.mid_channels = df.at("mid_channels").get<int>();
  c.denoiser.cond_channels = df.at("cond_channels").get<int>();
  c.denoiser.time_dim = df.at("time_dim").get<int>();
  c.denoiser.groups = df.at("groups").get<int>();
  c.denoiser.temporal_kernel = df.at("temporal_kernel").get<int>();
  const auto& td = j.at("train_diff");
  c.train_diff.steps = td.at("steps").get<int>();
  c.train_diff.batch = td.at("batch").get<int>();
  c.train_diff.lr = td.at("lr").get<double>();
  c.train_diff.weight_decay = td.at("weight_decay").get<double>();
  c.train_diff.warmup_frac = td.at("warmup_frac").get<double>();
  c.train_diff.freeze_stage2 = td.at("freeze_stage2").get<bool>();
  c.train_diff.flags.use_bases = td.at("use_bases").get<bool>();
  c.train_diff.flags.use_coarse = td.at("use_coarse").get<bool>();
  c.train_diff.flags.basis_parts = td.at("basis_parts").get<std::string>();
  c.sample_steps = j.at("sample").at("steps").get<int64_t>();
  return c;
}

namespace detail {

inline bool json_types_compatible(const nlohmann::json& base, const nlohmann::json& value) {
  if (base.is_number() && value.is_number()) return true;
  if (base.is_boolean()) return value.is_boolean();
  if (base.is_string()) return value.is_string();
  if (base.is_array()) return value.is_array();
  return false;
}

inline void merge_config(nlohmann::json& base, const nlohmann::json& patch,
                         const std::string& prefix) {
  require(patch.is_object(), ErrorCode::BadConfig,
          "config: expected an object at \"" + (prefix.empty() ? "<root>" : prefix) + "\"");
  for (const auto& [key, value] : patch.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    require(base.contains(key), ErrorCode::BadConfig, "config: unknown key \"" + path + "\"");
    nlohmann::json& slot = base[key];
    if (slot.is_object()) {
      merge_config(slot, value, path);
    } else {
      require(json_types_compatible(slot, value), ErrorCode::BadConfig,
              "config: type mismatch for key \"" + path + "\"");
      slot = value;
    }
  }
}

inline void line_col_at(const std::string& text, size_t byte, int& line, int& col) {
  line = 1;
  col = 1;
  for (size_t i = 0; i < byte && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
}

}  // namespace detail

/// Applies one `key=value` override. Dotted keys address nested fields;
/// values parse as JSON literals, falling back to strings.
inline void apply_override(nlohmann::json& base, const std::string& assignment) {
  const size_t eq = assignment.find('=');
  require(eq != std::string::npos && eq > 0, ErrorCode::BadConfig,
          "override must look like key=value, got \"" + assignment + "\"");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;

  nlohmann::json* slot = &base;
  size_t start = 0;
  std::string walked;
  while (true) {
    const size_t dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? dot : dot - start);
    walked = walked.empty() ? part : walked + "." + part;
    require(slot->contains(part), ErrorCode::BadConfig,
            "config: unknown key \"" + walked + "\"");
    slot = &(*slot)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
    require(slot->is_object(), ErrorCode::BadConfig,
            "config: \"" + walked + "\" is not a section");
  }
  require(!slot->is_object(), ErrorCode::BadConfig,
          "config: \"" + key + "\" is a section, not a value");
  require(detail::json_types_compatible(*slot, value), ErrorCode::BadConfig,
          "config: type mismatch for key \"" + key + "\"");
  *slot = value;
}

/// defaults <- file (optional) <- overrides, in that precedence.
inline RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  nlohmann::json base = config_to_json(RunConfig{});
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::IoFailure, "cannot open config: " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (text.find_first_not_of(" \t\r\n") != std::string::npos) {
      nlohmann::json file;
      try {
        file = nlohmann::json::parse(text);
      } catch (const nlohmann::json::parse_error& e) {
        int line, col;
        detail::line_col_at(text, e.byte > 0 ? e.byte - 1 : 0, line, col);
        throw Error(ErrorCode::BadConfig, "config parse error at line " + std::to_string(line) +
                                              ", column " + std::to_string(col) + ": " +
                                              e.what());
      }
      detail::merge_config(base, file, "");
    }
  }
  for (const auto& o : overrides) apply_override(base, o);
  return config_from_json(base);
}

}  // namespace fbdiff
