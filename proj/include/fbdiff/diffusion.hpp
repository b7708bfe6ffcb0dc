#pragma once

#include <cmath>

#include "fbdiff/vae.hpp"

namespace fbdiff {

// ---------------------------------------------------------------------------
// Noise schedule
// ---------------------------------------------------------------------------

/// beta_t and the cumulative products alpha_bar_t = prod_{i<=t} (1 - beta_i),
/// 1-indexed by timestep t in [1, T].
struct NoiseSchedule {
  int64_t T = 0;
  std::vector<double> beta;       // beta[t-1]
  std::vector<double> alpha_bar;  // alpha_bar[t-1]

  double beta_at(int64_t t) const { return beta.at(t - 1); }
  double alpha_bar_at(int64_t t) const { return t == 0 ? 1.0 : alpha_bar.at(t - 1); }
};

/// Linear beta ramp from beta_min to beta_max over T steps.
inline NoiseSchedule build_schedule(int64_t T, double beta_min, double beta_max) {
  require(T >= 1, ErrorCode::InvalidArgument, "build_schedule: T must be >= 1");
  require(beta_min > 0 && beta_min <= beta_max && beta_max < 1, ErrorCode::InvalidArgument,
          "build_schedule: need 0 < beta_min <= beta_max < 1");
  NoiseSchedule s;
  s.T = T;
  s.beta.resize(T);
  s.alpha_bar.resize(T);
  double running = 1.0;
  for (int64_t t = 0; t < T; ++t) {
    s.beta[t] = T == 1 ? beta_min
                       : beta_min + (beta_max - beta_min) * double(t) / double(T - 1);
    running *= 1.0 - s.beta[t];
    s.alpha_bar[t] = running;
  }
  return s;
}

/// Forward perturbation z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.
template <typename T>
Tensor<T> forward_diffuse(const Tensor<T>& z0, int64_t t, const Tensor<T>& eps,
                          const NoiseSchedule& schedule) {
  require(t >= 1 && t <= schedule.T, ErrorCode::InvalidArgument,
          "forward_diffuse: t=" + std::to_string(t) + " outside [1," +
              std::to_string(schedule.T) + "]");
  require(z0.shape() == eps.shape(), ErrorCode::ShapeMismatch,
          "forward_diffuse: noise shape differs from z0");
  const double ab = schedule.alpha_bar_at(t);
  return add(mul_scalar(z0, static_cast<T>(std::sqrt(ab))),
             mul_scalar(eps, static_cast<T>(std::sqrt(1.0 - ab))));
}

// ---------------------------------------------------------------------------
// Denoiser
// ---------------------------------------------------------------------------

struct DenoiserConfig {
  int base_channels = 24;  // width of the outer blocks
  int mid_channels = 40;   // width of the mid block where the bases interact
  int cond_channels = 12;  // first level of the coarse-video feature encoder
  int time_dim = 64;
  int groups = 4;
  int temporal_kernel = 3;

  void validate() const {
    require(base_channels % groups == 0 && mid_channels % groups == 0 &&
                cond_channels % groups == 0,
            ErrorCode::BadConfig, "denoiser: channel widths must be divisible by groups");
    require(time_dim >= 2 && time_dim % 2 == 0, ErrorCode::BadConfig,
            "denoiser: time_dim must be even");
  }
};

/// Residual factorized block with a timestep modulation head.
template <typename T>
struct DenoiserBlock {
  FactorizedBlock<T> conv;
  Tensor<T> film_w, film_b;  // time_dim -> 2C scale/shift
};

/// Small U-shaped denoiser over latent sequences. The spatial resolution
/// stays at the bottleneck grid; down/up refers to channel widening with
/// skip connections, which keeps the basis interaction at one resolution.
template <typename T>
struct DenoiserModel {
  DenoiserConfig cfg;
  int latent_channels = 0;
  int downsample = 4;  // image->latent ratio of the paired autoencoder

  Tensor<T> in_w, in_b;        // concat(z_t, masked latent) -> C1
  DenoiserBlock<T> down1;      // C1
  Tensor<T> proj_down_w, proj_down_b;  // C1 -> C2
  DenoiserBlock<T> down2;      // C2
  Tensor<T> bio_map_w, bio_map_b;  // pointwise Cz -> C2 motion-intensity map
  Tensor<T> bio_inj_w, bio_inj_b;  // pointwise C2 -> C2, zero-initialized gate
  DenoiserBlock<T> mid;        // C2
  Tensor<T> proj_mid_w, proj_mid_b;  // 2*C2 -> C2 (skip from down2)
  DenoiserBlock<T> up1;        // C2
  Tensor<T> proj_up_w, proj_up_b;    // C2 -> C1
  Tensor<T> merge_w, merge_b;        // 2*C1 -> C1 (skip from down1)
  DenoiserBlock<T> up2;        // C1
  Tensor<T> out_w, out_b;      // C1 -> Cz
  Tensor<T> t1_w, t1_b, t2_w, t2_b;  // timestep MLP
  std::vector<FactorizedBlock<T>> cond_enc;  // coarse-video features, one block per 2x

  static DenoiserBlock<T> block_init(Rng& rng, int c, int kt, int time_dim) {
    DenoiserBlock<T> b;
    b.conv = VaeModel<T>::block_init(rng, c, c, kt);
    b.film_w = VaeModel<T>::conv_init(rng, {2 * c, time_dim}, time_dim);
    b.film_b = Tensor<T>({2 * c});
    return b;
  }

  void init(uint64_t seed, int latent_ch, int image_downsample) {
    cfg.validate();
    latent_channels = latent_ch;
    downsample = image_downsample;
    require((downsample & (downsample - 1)) == 0 && downsample >= 2, ErrorCode::BadConfig,
            "denoiser: downsample must be a power of two");
    Rng rng(seed);
    const int C1 = cfg.base_channels, C2 = cfg.mid_channels, kt = cfg.temporal_kernel;
    const int Cz = latent_channels;
    in_w = VaeModel<T>::conv_init(rng, {C1, 2 * Cz, 3, 3}, int64_t(2 * Cz) * 9);
    in_b = VaeModel<T>::conv_init(rng, {C1}, int64_t(2 * Cz) * 9);
    down1 = block_init(rng, C1, kt, cfg.time_dim);
    proj_down_w = VaeModel<T>::conv_init(rng, {C2, C1, 3, 3}, int64_t(C1) * 9);
    proj_down_b = VaeModel<T>::conv_init(rng, {C2}, int64_t(C1) * 9);
    down2 = block_init(rng, C2, kt, cfg.time_dim);
    bio_map_w = VaeModel<T>::conv_init(rng, {C2, Cz, 1, 1}, Cz);
    bio_map_b = VaeModel<T>::conv_init(rng, {C2}, Cz);
    bio_inj_w = Tensor<T>({C2, C2, 1, 1});  // zero: identity injection at start
    bio_inj_b = Tensor<T>({C2});
    mid = block_init(rng, C2, kt, cfg.time_dim);
    proj_mid_w = VaeModel<T>::conv_init(rng, {C2, 2 * C2, 3, 3}, int64_t(2 * C2) * 9);
    proj_mid_b = VaeModel<T>::conv_init(rng, {C2}, int64_t(2 * C2) * 9);
    up1 = block_init(rng, C2, kt, cfg.time_dim);
    proj_up_w = VaeModel<T>::conv_init(rng, {C1, C2, 3, 3}, int64_t(C2) * 9);
    proj_up_b = VaeModel<T>::conv_init(rng, {C1}, int64_t(C2) * 9);
    merge_w = VaeModel<T>::conv_init(rng, {C1, 2 * C1, 3, 3}, int64_t(2 * C1) * 9);
    merge_b = VaeModel<T>::conv_init(rng, {C1}, int64_t(2 * C1) * 9);
    up2 = block_init(rng, C1, kt, cfg.time_dim);
    out_w = VaeModel<T>::conv_init(rng, {Cz, C1, 3, 3}, int64_t(C1) * 9);
    out_b = VaeModel<T>::conv_init(rng, {Cz}, int64_t(C1) * 9);
    t1_w = VaeModel<T>::conv_init(rng, {cfg.time_dim, cfg.time_dim}, cfg.time_dim);
    t1_b = Tensor<T>({cfg.time_dim});
    t2_w = VaeModel<T>::conv_init(rng, {cfg.time_dim, cfg.time_dim}, cfg.time_dim);
    t2_b = Tensor<T>({cfg.time_dim});

    cond_enc.clear();
    int levels = 0;
    for (int d = downsample; d > 1; d /= 2) ++levels;
    int cin = 1;
    for (int i = 0; i < levels; ++i) {
      const int cout = (i + 1 == levels) ? C2 : cfg.cond_channels << i;
      cond_enc.push_back(VaeModel<T>::block_init(rng, cin, cout, kt));
      cin = cout;
    }
  }

  ParamList<T> params() {
    ParamList<T> p;
    auto add_block = [&](const char* name, DenoiserBlock<T>& b) {
      const std::string pre = std::string(name) + ".";
      p.add(pre + "sconv.w", &b.conv.sw);
      p.add(pre + "sconv.b", &b.conv.sb);
      p.add(pre + "gn.g", &b.conv.gng);
      p.add(pre + "gn.b", &b.conv.gnb);
      p.add(pre + "tconv.w", &b.conv.tw);
      p.add(pre + "tconv.b", &b.conv.tb);
      p.add(pre + "film.w", &b.film_w);
      p.add(pre + "film.b", &b.film_b);
    };
    p.add("in.w", &in_w);
    p.add("in.b", &in_b);
    add_block("down1", down1);
    p.add("proj_down.w", &proj_down_w);
    p.add("proj_down.b", &proj_down_b);
    add_block("down2", down2);
    p.add("bio.map.w", &bio_map_w);
    p.add("bio.map.b", &bio_map_b);
    p.add("bio.inj.w", &bio_inj_w);
    p.add("bio.inj.b", &bio_inj_b);
    add_block("mid", mid);
    p.add("proj_mid.w", &proj_mid_w);
    p.add("proj_mid.b", &proj_mid_b);
    add_block("up1", up1);
    p.add("proj_up.w", &proj_up_w);
    p.add("proj_up.b", &proj_up_b);
    p.add("merge.w", &merge_w);
    p.add("merge.b", &merge_b);
    add_block("up2", up2);
    p.add("out.w", &out_w);
    p.add("out.b", &out_b);
    p.add("time.l1.w", &t1_w);
    p.add("time.l1.b", &t1_b);
    p.add("time.l2.w", &t2_w);
    p.add("time.l2.b", &t2_b);
    for (size_t i = 0; i < cond_enc.size(); ++i) {
      const std::string pre = "cond" + std::to_string(i) + ".";
      p.add(pre + "sconv.w", &cond_enc[i].sw);
      p.add(pre + "sconv.b", &cond_enc[i].sb);
      p.add(pre + "gn.g", &cond_enc[i].gng);
      p.add(pre + "gn.b", &cond_enc[i].gnb);
      p.add(pre + "tconv.w", &cond_enc[i].tw);
      p.add(pre + "tconv.b", &cond_enc[i].tb);
    }
    return p;
  }
};

// ---------------------------------------------------------------------------
// Forward pieces
// ---------------------------------------------------------------------------

namespace detail {

/// 64-dim sinusoidal embedding of an integer timestep, as a constant input.
template <typename T>
Tensor<T> sinusoidal_embedding(int64_t t, int dim) {
  Tensor<T> e({1, dim});
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * double(i) / double(half));
    e.vals()[i] = static_cast<T>(std::sin(double(t) * freq));
    e.vals()[half + i] = static_cast<T>(std::cos(double(t) * freq));
  }
  return e;
}

template <typename T>
Tensor<T> run_denoiser_block(const DenoiserBlock<T>& b, const Tensor<T>& x,
                             const Tensor<T>& temb, int groups) {
  auto sv = linear(temb, b.film_w, b.film_b);
  auto y = conv_spatial(x, b.conv.sw, b.conv.sb, 1, 1);
  y = film(y, sv);
  y = gelu(y);
  y = group_norm(y, groups, b.conv.gng, b.conv.gnb);
  y = conv_temporal(y, b.conv.tw, b.conv.tb);
  return add(x, y);
}

}  // namespace detail

/// Gated additive conditioning: Fourier bases measure per-region motion
/// intensity, gate the coarse-video features, and inject them into the
/// denoiser features u. With the injection conv at zero this is the identity.
template <typename T>
Tensor<T> basis_interaction(const DenoiserModel<T>& m, const Tensor<T>& vhat_features,
                            const ComplexSpectrum<T>& bases, const Tensor<T>& u) {
  require(vhat_features.shape() == u.shape(), ErrorCode::ShapeMismatch,
          "basis_interaction: feature resolution mismatch " + shape_str(vhat_features.shape()) +
              " vs " + shape_str(u.shape()));
  auto padded = zero_pad_back(bases);
  auto motion = idft_real(padded.re, padded.im, bases.n_full);
  require(motion.dim(0) == u.dim(0) && motion.dim(2) == u.dim(2) && motion.dim(3) == u.dim(3),
          ErrorCode::ShapeMismatch, "basis_interaction: basis grid mismatch");
  auto intensity = sigmoid(conv_spatial(motion, m.bio_map_w, m.bio_map_b, 1, 0));
  auto enhanced = mul(vhat_features, intensity);
  return add(u, conv_spatial(enhanced, m.bio_inj_w, m.bio_inj_b, 1, 0));
}

/// Coarse-video frames [N,1,H,W] -> mid-width features at the latent grid.
template <typename T>
Tensor<T> cond_features(const DenoiserModel<T>& m, const Tensor<T>& vhat_frames) {
  Tensor<T> x = vhat_frames;
  for (const auto& b : m.cond_enc) x = detail::run_block(b, x, 2, m.cfg.groups, T(1e-5));
  return x;
}

/// Noise regression eps_d(z_t, t; bases, masked latent, coarse video).
template <typename T>
Tensor<T> denoise_forward(const DenoiserModel<T>& m, const Tensor<T>& z_t, int64_t t,
                          int64_t t_max, const Tensor<T>& masked_latent,
                          const ComplexSpectrum<T>& bases, const Tensor<T>& vhat_frames) {
  require(t >= 1 && t <= t_max, ErrorCode::InvalidArgument,
          "denoise: t=" + std::to_string(t) + " outside [1," + std::to_string(t_max) + "]");
  require(z_t.shape() == masked_latent.shape(), ErrorCode::ShapeMismatch,
          "denoise: masked latent shape " + shape_str(masked_latent.shape()) +
              " differs from z_t " + shape_str(z_t.shape()));
  auto temb = detail::sinusoidal_embedding<T>(t, m.cfg.time_dim);
  temb = linear(temb, m.t1_w, m.t1_b);
  temb = gelu(temb);
  temb = linear(temb, m.t2_w, m.t2_b);

  auto x = conv_spatial(concat_channels(z_t, masked_latent), m.in_w, m.in_b, 1, 1);
  auto h1 = detail::run_denoiser_block(m.down1, x, temb, m.cfg.groups);
  auto h2 = detail::run_denoiser_block(
      m.down2, conv_spatial(h1, m.proj_down_w, m.proj_down_b, 1, 1), temb, m.cfg.groups);

  auto vfeat = cond_features(m, vhat_frames);
  auto hm = basis_interaction(m, vfeat, bases, h2);
  hm = detail::run_denoiser_block(m.mid, hm, temb, m.cfg.groups);

  auto u1 = detail::run_denoiser_block(
      m.up1, conv_spatial(concat_channels(hm, h2), m.proj_mid_w, m.proj_mid_b, 1, 1), temb,
      m.cfg.groups);
  auto u1p = conv_spatial(u1, m.proj_up_w, m.proj_up_b, 1, 1);
  auto u2 = detail::run_denoiser_block(
      m.up2, conv_spatial(concat_channels(u1p, h1), m.merge_w, m.merge_b, 1, 1), temb,
      m.cfg.groups);
  return conv_spatial(u2, m.out_w, m.out_b, 1, 1);
}

// ---------------------------------------------------------------------------
// Conditioning bundle and losses
// ---------------------------------------------------------------------------

/// All conditioning inputs for one case, produced by the same inpainting
/// checkpoint. Carries the masked frames too, so the sampler can restore the
/// known endpoints bit-exactly.
struct ConditionBundle {
  ComplexSpectrum<float> bases;
  Tensor<float> masked_latent;
  Sequence v_hat;
  std::vector<float> known_mask;
  Tensor<float> masked_frames;
};

/// Per-step loss decomposition; total is the plain sum of the two parts.
struct LossReport {
  double l_eps = 0.0;
  double l_r = 0.0;
  double total = 0.0;
};

/// Which conditions the denoiser sees (the component-ablation switches).
struct ConditionFlags {
  bool use_bases = true;
  bool use_coarse = true;
  // both | real_only | imag_only: drop one part of the complex bases
  std::string basis_parts = "both";
};

namespace detail {

template <typename T>
ComplexSpectrum<T> apply_basis_flags(const ComplexSpectrum<T>& bases,
                                     const ConditionFlags& flags) {
  if (!flags.use_bases)
    return ComplexSpectrum<T>{Tensor<T>(bases.re.shape()), Tensor<T>(bases.im.shape()),
                              bases.n_full};
  if (flags.basis_parts == "real_only")
    return ComplexSpectrum<T>{bases.re, Tensor<T>(bases.im.shape()), bases.n_full};
  if (flags.basis_parts == "imag_only")
    return ComplexSpectrum<T>{Tensor<T>(bases.re.shape()), bases.im, bases.n_full};
  require(flags.basis_parts == "both", ErrorCode::BadConfig,
          "basis_parts must be both|real_only|imag_only");
  return bases;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct DiffusionTrainConfig {
  int steps = 3000;
  int batch = 2;
  double lr = 1e-4;
  double weight_decay = 1e-5;
  double warmup_frac = 0.05;
  bool freeze_stage2 = false;
  ConditionFlags flags;
};

/// Affine latent standardization, z' = (z - shift) / scale, so the diffusion
/// operates on roughly unit-normal data.
struct LatentStats {
  double shift = 0.0;
  double scale = 1.0;
};

struct DiffusionTrainResult {
  LatentStats latent_stats;
  double first_100_loss = 0.0;
  double last_100_loss = 0.0;
  std::vector<LossReport> reports;  // one per step
};

/// Mean and standard deviation of the stage-2 latents over a sample of
/// cases.
inline LatentStats estimate_latent_stats(const VaeModel<float>& stage2,
                                         const std::vector<const Sequence*>& cases) {
  double sum = 0.0, sum2 = 0.0;
  int64_t count = 0;
  const size_t probe = std::min<size_t>(cases.size(), 16);
  std::vector<float> ones;
  for (size_t i = 0; i < probe; ++i) {
    const Sequence& seq = *cases[i];
    ones.assign(seq.frame_count(), 1.0f);
    auto lat = encode_latent(stage2, seq.frames, &ones);
    for (float v : lat.z.vals()) {
      sum += v;
      sum2 += double(v) * v;
      ++count;
    }
  }
  const double mean = sum / double(count);
  const double var = sum2 / double(count) - mean * mean;
  return LatentStats{mean, std::max(1e-3, std::sqrt(std::max(0.0, var)))};
}

namespace detail {

template <typename T>
Tensor<T> standardize(const Tensor<T>& z, const LatentStats& stats) {
  return mul_scalar(add_scalar(z, static_cast<T>(-stats.shift)),
                    static_cast<T>(1.0 / stats.scale));
}

template <typename T>
Tensor<T> unstandardize(const Tensor<T>& z, const LatentStats& stats) {
  return add_scalar(mul_scalar(z, static_cast<T>(stats.scale)), static_cast<T>(stats.shift));
}

}  // namespace detail

/// Joint diffusion training: minimizes ||eps - eps_d||^2 + MSE(v_hat, V).
/// Stage-2 weights receive gradients through both terms unless frozen.
inline DiffusionTrainResult train_diffusion(DenoiserModel<float>& denoiser,
                                            VaeModel<float>& stage2,
                                            const std::vector<const Sequence*>& train_cases,
                                            const NoiseSchedule& schedule,
                                            const DiffusionTrainConfig& tc, uint64_t seed) {
  require(!train_cases.empty(), ErrorCode::InvalidArgument, "training manifest is empty");
  DiffusionTrainResult result;
  result.latent_stats = estimate_latent_stats(stage2, train_cases);

  ParamList<float> trainable = denoiser.params();
  ParamList<float> vae_params = stage2.params();
  if (!tc.freeze_stage2) trainable.add_all(vae_params, "vae.");

  AdamW<float> opt(trainable.size(), 0.9, 0.999, 1e-8, tc.weight_decay);
  Rng rng(seed ^ 0x11u);
  const int64_t total_steps = tc.steps;
  const int64_t warmup =
      std::min<int64_t>(total_steps - 1,
                        std::max<int64_t>(total_steps > 1 ? 1 : 0,
                                          llround(tc.warmup_frac * double(total_steps))));

  std::vector<int> order;
  size_t cursor = 0;
  std::vector<float> ones_mask;
  double first_acc = 0.0, last_acc = 0.0;
  int first_n = 0, last_n = 0;
  for (int64_t step = 0; step < total_steps; ++step) {
    Tape<float> tape;
    detail::reset_and_watch(tape, trainable);
    Tensor<float> l_eps_sum, l_r_sum;
    for (int b = 0; b < tc.batch; ++b) {
      if (cursor >= order.size()) {
        order = detail::shuffled_indices(train_cases.size(), rng);
        cursor = 0;
      }
      const Sequence& seq = *train_cases[order[cursor++]];
      const int64_t N = seq.frame_count();

      MaskedSequence msk = mask_sequence(seq);
      auto lat_m = encode_latent(stage2, msk.frames, &msk.known_mask);
      auto v_hat = decode(stage2, lat_m.z);
      auto l_r_case = mse(v_hat, seq.frames);

      ones_mask.assign(N, 1.0f);
      auto z0 = detail::standardize(encode_latent(stage2, seq.frames, &ones_mask).z,
                                    result.latent_stats);
      const int64_t t = 1 + static_cast<int64_t>(rng.next_below(schedule.T));
      Tensor<float> eps(z0.shape());
      eps.fill_gaussian(rng);
      auto z_t = forward_diffuse(z0, t, eps, schedule);

      auto bases = detail::apply_basis_flags(lat_m.fmo.bases, tc.flags);
      auto vhat_in = tc.flags.use_coarse ? v_hat : Tensor<float>(v_hat.shape());
      auto ml = detail::standardize(lat_m.z, result.latent_stats);
      auto eps_d = denoise_forward(denoiser, z_t, t, schedule.T, ml, bases, vhat_in);
      auto l_eps_case = mse(eps_d, eps);

      l_eps_sum = l_eps_sum.defined() ? add(l_eps_sum, l_eps_case) : l_eps_case;
      l_r_sum = l_r_sum.defined() ? add(l_r_sum, l_r_case) : l_r_case;
    }
    auto l_eps = mul_scalar(l_eps_sum, 1.0f / float(tc.batch));
    auto l_r = mul_scalar(l_r_sum, 1.0f / float(tc.batch));
    auto loss = add(l_eps, l_r);

    LossReport report{l_eps.item(), l_r.item(), 0.0};
    report.total = report.l_eps + report.l_r;
    require(report.total == report.l_eps + report.l_r, ErrorCode::Diverged,
            "loss report does not decompose");
    require(std::abs(double(loss.item()) - report.total) <=
                1e-5 * std::max(1.0, std::abs(report.total)),
            ErrorCode::Diverged, "graph loss diverged from its parts");
    if (!std::isfinite(report.total))
      throw Error(ErrorCode::Diverged,
                  "diffusion training diverged at step " + std::to_string(step));
    result.reports.push_back(report);
    if (step < 100) {
      first_acc += report.total;
      ++first_n;
    }
    if (step >= total_steps - 100) {
      last_acc += report.total;
      ++last_n;
    }

    tape.backward(loss);
    std::vector<std::vector<float>> grads;
    grads.reserve(trainable.size());
    for (Tensor<float>* t2 : trainable.tensors) grads.push_back(tape.grad_or_zero(*t2));
    opt.step(trainable, grads, lr_at(step, total_steps, warmup, tc.lr));
  }
  result.first_100_loss = first_acc / std::max(1, first_n);
  result.last_100_loss = last_acc / std::max(1, last_n);
  detail::detach_params(trainable);
  return result;
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

/// Builds the conditioning bundle for a case from its masked endpoints.
inline ConditionBundle make_condition(const VaeModel<float>& stage2, const MaskedSequence& masked,
                                      const ConditionFlags& flags) {
  auto inp = inpaint_infer(stage2, masked);
  ConditionBundle cond;
  cond.bases = detail::apply_basis_flags(inp.bases, flags);
  cond.masked_latent = inp.masked_latent;
  cond.v_hat = flags.use_coarse
                   ? inp.v_hat
                   : Sequence{Tensor<float>(inp.v_hat.frames.shape()), inp.v_hat.case_id};
  cond.known_mask = masked.known_mask;
  cond.masked_frames = masked.frames;
  return cond;
}

/// Ancestral DDPM sampling with optional even striding of the schedule.
/// After decoding, the endpoint frames are overwritten with the conditioning
/// endpoints, which are known at inference.
inline Sequence sample_ddpm(const ConditionBundle& cond, const DenoiserModel<float>& denoiser,
                            const VaeModel<float>& stage2, const NoiseSchedule& schedule,
                            const LatentStats& latent_stats, uint64_t seed, int64_t steps) {
  require(steps >= 1 && steps <= schedule.T, ErrorCode::InvalidArgument,
          "sample_ddpm: steps must lie in [1, T]");
  require(schedule.T % steps == 0, ErrorCode::InvalidArgument,
          "sample_ddpm: steps must divide T evenly");
  const int64_t stride = schedule.T / steps;

  Rng rng(seed);
  Tensor<float> z(cond.masked_latent.shape());
  z.fill_gaussian(rng);
  auto ml = detail::standardize(cond.masked_latent, latent_stats);

  for (int64_t j = steps; j >= 1; --j) {
    const int64_t t = j * stride;
    const int64_t t_prev = (j - 1) * stride;
    const double ab_t = schedule.alpha_bar_at(t);
    const double ab_prev = schedule.alpha_bar_at(t_prev);
    const double beta_eff = 1.0 - ab_t / ab_prev;

    auto eps_d = denoise_forward(denoiser, z, t, schedule.T, ml, cond.bases, cond.v_hat.frames);
    const double coef = beta_eff / std::sqrt(1.0 - ab_t);
    auto mean = mul_scalar(sub(z, mul_scalar(eps_d, static_cast<float>(coef))),
                           static_cast<float>(1.0 / std::sqrt(1.0 - beta_eff)));
    if (j > 1) {
      const double var = beta_eff * (1.0 - ab_prev) / (1.0 - ab_t);
      Tensor<float> xi(z.shape());
      xi.fill_gaussian(rng);
      z = add(mean, mul_scalar(xi, static_cast<float>(std::sqrt(var))));
    } else {
      z = mean;
    }
  }

  auto frames = decode(stage2, detail::unstandardize(z, latent_stats));
  // the endpoints are conditioning inputs, not generated content
  const int64_t N = frames.dim(0);
  const int64_t fsz = frames.numel() / N;
  std::memcpy(frames.ptr(), cond.masked_frames.ptr(), sizeof(float) * fsz);
  std::memcpy(frames.ptr() + (N - 1) * fsz, cond.masked_frames.ptr() + (N - 1) * fsz,
              sizeof(float) * fsz);
  return Sequence{frames, "sampled"};
}

}  // namespace fbdiff
