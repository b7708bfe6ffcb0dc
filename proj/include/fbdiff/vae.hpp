#pragma once

#include <cmath>
#include <string>

#include "fbdiff/checkpoint.hpp"
#include "fbdiff/ops.hpp"
#include "fbdiff/optim.hpp"
#include "fbdiff/phantom.hpp"
#include "fbdiff/spectral.hpp"

namespace fbdiff {

/// Factorized spatial-temporal autoencoder settings. Channel widths list one
/// entry per level; every level past the first downsamples spatially by 2,
/// so downsample must equal 2^(levels-1).
struct AutoencoderConfig {
  std::vector<int> channels = {8, 16, 32};
  int downsample = 4;
  int temporal_kernel = 3;
  int groups = 4;
  double n_fb_ratio = 1.0;  // frequency count N_Fb = clamp(round(ratio * N), 1, N)
  double kl_weight = 0.0;
  bool variational = false;
  bool use_theta = true;
  int theta_channels = 8;
  int n_max = 16;
  bool mask_channel = false;  // inpainting stage feeds the known-frame mask as a channel
  double gn_eps = 1e-5;

  int levels() const { return static_cast<int>(channels.size()); }
  int latent_channels() const { return channels.back(); }
  int input_channels() const { return 1 + (mask_channel ? 1 : 0); }

  void validate() const {
    require(!channels.empty(), ErrorCode::BadConfig, "autoencoder: channels must be non-empty");
    require(downsample == (1 << (levels() - 1)), ErrorCode::BadConfig,
            "autoencoder: downsample must be 2^(levels-1)");
    require(temporal_kernel % 2 == 1, ErrorCode::BadConfig,
            "autoencoder: temporal kernel must be odd");
    for (int c : channels)
      require(c % groups == 0, ErrorCode::BadConfig,
              "autoencoder: every channel width must be divisible by groups");
    require(n_fb_ratio > 0.0 && n_fb_ratio <= 1.0, ErrorCode::BadConfig,
            "autoencoder: n_fb_ratio out of (0, 1]");
    require(theta_channels >= 1 && n_max >= 1, ErrorCode::BadConfig,
            "autoencoder: bad motion-prior dims");
  }

  int64_t n_fb_for(int64_t n_frames) const {
    const int64_t k = static_cast<int64_t>(std::llround(n_fb_ratio * double(n_frames)));
    return std::max<int64_t>(1, std::min<int64_t>(n_frames, k));
  }
};

/// One spatial conv + group norm + temporal conv block.
template <typename T>
struct FactorizedBlock {
  Tensor<T> sw, sb;    // spatial conv
  Tensor<T> gng, gnb;  // group norm affine
  Tensor<T> tw, tb;    // temporal conv
};

/// The autoencoder with learnable physiology motion priors theta. theta rows
/// are indexed by frequency bin; the channel transform tau turns them into
/// per-bin phases for the Fourier bases.
template <typename T>
struct VaeModel {
  AutoencoderConfig cfg;
  std::vector<FactorizedBlock<T>> enc;
  std::vector<FactorizedBlock<T>> dec;
  Tensor<T> head_w, head_b;
  Tensor<T> fmo_m_w, fmo_m_b;  // pointwise magnitude map
  Tensor<T> tau_w, tau_b;      // channel transform C_theta -> C_latent
  Tensor<T> theta;             // [n_max, C_theta]
  Tensor<T> mu_w, mu_b, lv_w, lv_b;  // diagonal-gaussian head (when variational)

  static Tensor<T> conv_init(Rng& rng, Shape shape, int64_t fan_in) {
    Tensor<T> t(std::move(shape));
    const T bound = static_cast<T>(std::sqrt(1.0 / static_cast<double>(fan_in)));
    t.fill_uniform(rng, -bound, bound);
    return t;
  }

  static FactorizedBlock<T> block_init(Rng& rng, int cin, int cout, int kt) {
    FactorizedBlock<T> b;
    b.sw = conv_init(rng, {cout, cin, 3, 3}, int64_t(cin) * 9);
    b.sb = conv_init(rng, {cout}, int64_t(cin) * 9);
    b.gng = Tensor<T>::full({cout}, T(1));
    b.gnb = Tensor<T>({cout});
    b.tw = conv_init(rng, {cout, cout, kt}, int64_t(cout) * kt);
    b.tb = conv_init(rng, {cout}, int64_t(cout) * kt);
    return b;
  }

  void init(uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    const int L = cfg.levels();
    const int kt = cfg.temporal_kernel;
    enc.clear();
    dec.clear();
    int cin = cfg.input_channels();
    for (int i = 0; i < L; ++i) {
      enc.push_back(block_init(rng, cin, cfg.channels[i], kt));
      cin = cfg.channels[i];
    }
    for (int j = 0; j + 1 < L; ++j)
      dec.push_back(block_init(rng, cfg.channels[L - 1 - j], cfg.channels[L - 2 - j], kt));
    head_w = conv_init(rng, {1, cfg.channels[0], 3, 3}, int64_t(cfg.channels[0]) * 9);
    head_b = conv_init(rng, {1}, int64_t(cfg.channels[0]) * 9);
    const int C = cfg.latent_channels();
    fmo_m_w = conv_init(rng, {C, C, 1, 1}, C);
    fmo_m_b = conv_init(rng, {C}, C);
    tau_w = conv_init(rng, {C, cfg.theta_channels}, cfg.theta_channels);
    tau_b = Tensor<T>({C});
    theta = Tensor<T>({cfg.n_max, cfg.theta_channels});
    theta.fill_gaussian(rng, T(0), T(0.1));
    if (cfg.variational) {
      mu_w = conv_init(rng, {C, C, 1, 1}, C);
      mu_b = conv_init(rng, {C}, C);
      lv_w = conv_init(rng, {C, C, 1, 1}, C);
      lv_b = Tensor<T>({C});
    }
  }

  ParamList<T> params() {
    ParamList<T> p;
    for (size_t i = 0; i < enc.size(); ++i) {
      const std::string pre = "enc" + std::to_string(i) + ".";
      p.add(pre + "sconv.w", &enc[i].sw);
      p.add(pre + "sconv.b", &enc[i].sb);
      p.add(pre + "gn.g", &enc[i].gng);
      p.add(pre + "gn.b", &enc[i].gnb);
      p.add(pre + "tconv.w", &enc[i].tw);
      p.add(pre + "tconv.b", &enc[i].tb);
    }
    p.add("fmo.m.w", &fmo_m_w);
    p.add("fmo.m.b", &fmo_m_b);
    p.add("fmo.tau.w", &tau_w);
    p.add("fmo.tau.b", &tau_b);
    p.add("theta", &theta);
    for (size_t j = 0; j < dec.size(); ++j) {
      const std::string pre = "dec" + std::to_string(j) + ".";
      p.add(pre + "sconv.w", &dec[j].sw);
      p.add(pre + "sconv.b", &dec[j].sb);
      p.add(pre + "gn.g", &dec[j].gng);
      p.add(pre + "gn.b", &dec[j].gnb);
      p.add(pre + "tconv.w", &dec[j].tw);
      p.add(pre + "tconv.b", &dec[j].tb);
    }
    p.add("dec.head.w", &head_w);
    p.add("dec.head.b", &head_b);
    if (cfg.variational) {
      p.add("var.mu.w", &mu_w);
      p.add("var.mu.b", &mu_b);
      p.add("var.lv.w", &lv_w);
      p.add("var.lv.b", &lv_b);
    }
    return p;
  }
};

// ---------------------------------------------------------------------------
// Forward pieces. Outputs are tape-tracked iff the parameters are watched.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
Tensor<T> run_block(const FactorizedBlock<T>& b, const Tensor<T>& x, int stride, int groups,
                    T eps) {
  auto y = conv_spatial(x, b.sw, b.sb, stride, 1);
  y = gelu(y);
  y = group_norm(y, groups, b.gng, b.gnb, eps);
  return conv_temporal(y, b.tw, b.tb);
}

/// Frames plus, for inpainting models, the broadcast known-frame mask channel.
template <typename T>
Tensor<T> assemble_input(const VaeModel<T>& m, const Tensor<T>& frames,
                         const std::vector<float>* mask) {
  if (!m.cfg.mask_channel) return frames;
  const int64_t N = frames.dim(0), H = frames.dim(2), W = frames.dim(3);
  Tensor<T> ch({N, 1, H, W});
  for (int64_t n = 0; n < N; ++n) {
    const T v = mask ? static_cast<T>((*mask)[n]) : T(1);
    T* p = ch.ptr() + n * H * W;
    for (int64_t i = 0; i < H * W; ++i) p[i] = v;
  }
  return concat_channels(frames, ch);
}

}  // namespace detail

/// Encoder conv stack only: frames [N,1,H,W] -> bottleneck features
/// [N, C_latent, H/ds, W/ds]. The Fourier motion operator runs separately.
template <typename T>
Tensor<T> encode_features(const VaeModel<T>& m, const Tensor<T>& frames,
                          const std::vector<float>* mask = nullptr) {
  require(frames.ndim() == 4, ErrorCode::ShapeMismatch, "encode: frames must be [N,C,H,W]");
  require(frames.dim(2) % m.cfg.downsample == 0 && frames.dim(3) % m.cfg.downsample == 0,
          ErrorCode::ShapeMismatch,
          "encode: H and W must be divisible by the downsample factor " +
              std::to_string(m.cfg.downsample));
  Tensor<T> x = detail::assemble_input(m, frames, mask);
  const T eps = static_cast<T>(m.cfg.gn_eps);
  for (size_t i = 0; i < m.enc.size(); ++i)
    x = detail::run_block(m.enc[i], x, i == 0 ? 1 : 2, m.cfg.groups, eps);
  return x;
}

/// Fourier motion operator results.
template <typename T>
struct FmoOutput {
  ComplexSpectrum<T> bases;  // truncated to n_fb bins
  Tensor<T> magnitude;       // case-specific part M(|spectrum|), all N bins
  Tensor<T> enhanced;        // feature map boosted by the inverted bases
};

/// Combines the case-specific spectral magnitude of F with phases derived
/// from the motion priors:
///   B = M(|dft(F)|) * exp(i * U(tau(theta))),
///   F_hat = F + sigmoid(Re(idft(zero-padded B))).
/// With use_theta off the phase path is dropped (phase = 0), leaving the
/// magnitude tensor untouched.
template <typename T>
FmoOutput<T> fourier_motion_operator(const VaeModel<T>& m, const Tensor<T>& features,
                                     int64_t n_fb) {
  const int64_t N = features.dim(0), h = features.dim(2), w = features.dim(3);
  require(N <= m.cfg.n_max, ErrorCode::InvalidArgument,
          "fourier_motion_operator: " + std::to_string(N) + " frames exceed n_max " +
              std::to_string(m.cfg.n_max));
  require(n_fb >= 1 && n_fb <= N, ErrorCode::InvalidArgument,
          "fourier_motion_operator: n_fb out of range");
  auto spec = dft_time(features);
  auto modulus = complex_modulus(spec.re, spec.im);
  auto magnitude = softplus(conv_spatial(modulus, m.fmo_m_w, m.fmo_m_b, 1, 0));

  ComplexSpectrum<T> bases;
  if (m.cfg.use_theta) {
    auto theta_n = slice_rows(m.theta, 0, N);
    auto phase_nc = linear(theta_n, m.tau_w, m.tau_b);  // [N bins, C]
    auto phase = broadcast_spatial(phase_nc, h, w);
    bases = ComplexSpectrum<T>{mul(magnitude, cos_op(phase)), mul(magnitude, sin_op(phase)), N};
  } else {
    bases = ComplexSpectrum<T>{magnitude, Tensor<T>(magnitude.shape()), N};
  }
  auto truncated = truncate_bases(bases, n_fb);
  auto padded = zero_pad_back(truncated);
  auto enhanced = add(features, sigmoid(idft_real(padded.re, padded.im, N)));
  return FmoOutput<T>{truncated, magnitude, enhanced};
}

/// Full encoder path (conv stack + FMO + optional variational head).
template <typename T>
struct LatentOutput {
  Tensor<T> z;
  FmoOutput<T> fmo;
  Tensor<T> kl;  // scalar, defined only when variational
};

template <typename T>
LatentOutput<T> encode_latent(const VaeModel<T>& m, const Tensor<T>& frames,
                              const std::vector<float>* mask = nullptr, Rng* noise_rng = nullptr) {
  auto features = encode_features(m, frames, mask);
  auto fmo = fourier_motion_operator(m, features, m.cfg.n_fb_for(features.dim(0)));
  LatentOutput<T> out;
  out.fmo = fmo;
  if (!m.cfg.variational) {
    out.z = fmo.enhanced;
    return out;
  }
  auto mu = conv_spatial(fmo.enhanced, m.mu_w, m.mu_b, 1, 0);
  auto logvar = conv_spatial(fmo.enhanced, m.lv_w, m.lv_b, 1, 0);
  if (noise_rng) {
    Tensor<T> noise(mu.shape());
    noise.fill_gaussian(*noise_rng);
    out.z = add(mu, mul(exp_op(mul_scalar(logvar, T(0.5))), noise));
  } else {
    out.z = mu;
  }
  auto inner = sub(add_scalar(logvar, T(1)), add(mul(mu, mu), exp_op(logvar)));
  out.kl = mul_scalar(mean(inner), T(-0.5));
  return out;
}

/// Decoder: bottleneck-shaped latent back to frames in (0,1).
template <typename T>
Tensor<T> decode(const VaeModel<T>& m, const Tensor<T>& z) {
  require(z.ndim() == 4 && z.dim(1) == m.cfg.latent_channels(), ErrorCode::ShapeMismatch,
          "decode: latent must be [N," + std::to_string(m.cfg.latent_channels()) + ",h,w], got " +
              shape_str(z.shape()));
  const T eps = static_cast<T>(m.cfg.gn_eps);
  Tensor<T> x = z;
  for (size_t j = 0; j < m.dec.size(); ++j)
    x = detail::run_block(m.dec[j], upsample_nearest2(x), 1, m.cfg.groups, eps);
  return sigmoid(conv_spatial(x, m.head_w, m.head_b, 1, 1));
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainConfig {
  int epochs = 40;
  int batch = 2;
  double lr = 3e-4;
  double weight_decay = 1e-5;
  double warmup_frac = 0.05;
  bool freeze_theta = false;
};

struct StageMetrics {
  double first_epoch_loss = 0.0;
  double final_epoch_loss = 0.0;
};

namespace detail {

inline void detach_params(ParamList<float>& params) {
  for (Tensor<float>* t : params.tensors) *t = t->detached();
}

inline void reset_and_watch(Tape<float>& tape, ParamList<float>& params) {
  for (Tensor<float>* t : params.tensors) {
    *t = t->detached();
    tape.watch(*t);
  }
}

inline std::vector<int> shuffled_indices(size_t n, Rng& rng) {
  std::vector<int> idx(n);
  for (size_t i = 0; i < n; ++i) idx[i] = static_cast<int>(i);
  for (size_t i = n; i > 1; --i) {
    const size_t j = rng.next_below(i);
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

}  // namespace detail

/// Shared reconstruction-training loop for both autoencoder stages.
/// `masked_input` switches the stage-2 behavior: feed zero-masked frames plus
/// the known mask, regress the full sequence.
inline StageMetrics train_autoencoder(VaeModel<float>& model,
                                      const std::vector<const Sequence*>& train_cases,
                                      const TrainConfig& tc, uint64_t seed, bool masked_input) {
  require(!train_cases.empty(), ErrorCode::InvalidArgument, "training manifest is empty");
  ParamList<float> all = model.params();
  ParamList<float> trainable;
  for (size_t i = 0; i < all.size(); ++i)
    if (!(tc.freeze_theta && all.names[i] == "theta")) trainable.add(all.names[i], all.tensors[i]);

  AdamW<float> opt(trainable.size(), 0.9, 0.999, 1e-8, tc.weight_decay);
  Rng order_rng(seed ^ 0x5u);
  const int steps_per_epoch =
      static_cast<int>((train_cases.size() + tc.batch - 1) / tc.batch);
  const int64_t total_steps = int64_t(tc.epochs) * steps_per_epoch;
  const int64_t warmup =
      std::min<int64_t>(total_steps - 1,
                        std::max<int64_t>(total_steps > 1 ? 1 : 0,
                                          llround(tc.warmup_frac * double(total_steps))));

  StageMetrics metrics;
  int64_t step = 0;
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    auto order = detail::shuffled_indices(train_cases.size(), order_rng);
    double epoch_loss = 0.0;
    int epoch_count = 0;
    for (size_t pos = 0; pos < order.size(); pos += tc.batch) {
      Tape<float> tape;
      detail::reset_and_watch(tape, trainable);
      Tensor<float> loss;
      int in_batch = 0;
      for (size_t b = pos; b < std::min(order.size(), pos + tc.batch); ++b) {
        const Sequence& seq = *train_cases[order[b]];
        Tensor<float> target = seq.frames;
        LatentOutput<float> lat;
        if (masked_input) {
          MaskedSequence msk = mask_sequence(seq);
          lat = encode_latent(model, msk.frames, &msk.known_mask);
        } else {
          lat = encode_latent(model, target);
        }
        auto recon = decode(model, lat.z);
        auto case_loss = mse(recon, target);
        if (model.cfg.variational && lat.kl.defined() && model.cfg.kl_weight > 0)
          case_loss = add(case_loss, mul_scalar(lat.kl, float(model.cfg.kl_weight)));
        loss = loss.defined() ? add(loss, case_loss) : case_loss;
        ++in_batch;
      }
      loss = mul_scalar(loss, 1.0f / float(in_batch));
      const double loss_val = loss.item();
      if (!std::isfinite(loss_val))
        throw Error(ErrorCode::Diverged, "autoencoder training diverged at step " +
                                             std::to_string(step) + " (epoch " +
                                             std::to_string(epoch) + ")");
      epoch_loss += loss_val;
      ++epoch_count;
      tape.backward(loss);
      std::vector<std::vector<float>> grads;
      grads.reserve(trainable.size());
      for (Tensor<float>* t : trainable.tensors) grads.push_back(tape.grad_or_zero(*t));
      opt.step(trainable, grads, lr_at(step, total_steps, warmup, tc.lr));
      ++step;
    }
    epoch_loss /= std::max(1, epoch_count);
    if (epoch == 0) metrics.first_epoch_loss = epoch_loss;
    metrics.final_epoch_loss = epoch_loss;
  }
  // leave the model free of links into the (destroyed) step tapes
  detail::detach_params(all);
  return metrics;
}

/// Copies stage-1 weights into a stage-2 (mask-channel) model. The first
/// spatial kernel gains an input slice for the mask channel, which starts at
/// zero so the fresh channel is initially ignored.
inline void init_stage2_from_stage1(VaeModel<float>& stage2, const Checkpoint& ck_stage1) {
  ParamList<float> params = stage2.params();
  for (size_t i = 0; i < params.size(); ++i) {
    const std::string& name = params.names[i];
    const Tensor<float>* src = ck_stage1.find(name);
    require(src != nullptr, ErrorCode::BadCheckpoint,
            "stage-1 checkpoint is missing tensor \"" + name + "\"");
    Tensor<float>& dst = *params.tensors[i];
    if (name == "enc0.sconv.w" && src->shape() != dst.shape()) {
      // [C0, 1, 3, 3] -> [C0, 2, 3, 3]: copy the frame slice, zero the mask slice
      require(src->dim(0) == dst.dim(0) && src->dim(1) + 1 == dst.dim(1) &&
                  src->dim(2) == dst.dim(2) && src->dim(3) == dst.dim(3),
              ErrorCode::BadCheckpoint,
              "checkpoint tensor \"enc0.sconv.w\" has shape " + shape_str(src->shape()) +
                  ", cannot widen to " + shape_str(dst.shape()));
      std::fill(dst.vals().begin(), dst.vals().end(), 0.0f);
      const int64_t k = src->dim(2) * src->dim(3);
      for (int64_t co = 0; co < src->dim(0); ++co)
        std::memcpy(dst.ptr() + co * dst.dim(1) * k, src->ptr() + co * src->dim(1) * k,
                    sizeof(float) * src->dim(1) * k);
      continue;
    }
    require(src->shape() == dst.shape(), ErrorCode::BadCheckpoint,
            "checkpoint tensor \"" + name + "\" has shape " + shape_str(src->shape()) +
                ", model expects " + shape_str(dst.shape()));
    dst.vals() = src->vals();
  }
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

/// Inpainting output: coarse video, adapted bases, and the masked-input
/// latent used as diffusion conditioning.
struct InpaintOutput {
  Sequence v_hat;
  ComplexSpectrum<float> bases;   // truncated to the configured N_Fb
  Tensor<float> masked_latent;    // encoder output for the masked input
};

inline InpaintOutput inpaint_infer(const VaeModel<float>& stage2, const MaskedSequence& masked) {
  require(stage2.cfg.mask_channel, ErrorCode::InvalidArgument,
          "inpaint_infer: model was not trained for masked inputs");
  auto lat = encode_latent(stage2, masked.frames, &masked.known_mask);
  auto frames = decode(stage2, lat.z);
  InpaintOutput out;
  out.v_hat = Sequence{frames, "inpaint"};
  out.bases = ComplexSpectrum<float>{lat.fmo.bases.re.detached(), lat.fmo.bases.im.detached(),
                                     lat.fmo.bases.n_full};
  out.masked_latent = lat.z.detached();
  return out;
}

}  // namespace fbdiff
