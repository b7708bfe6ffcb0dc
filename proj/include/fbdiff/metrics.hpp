#pragma once

#include <cmath>
#include <cstdio>
#include <set>
#include <string>

#include "fbdiff/diffusion.hpp"
#include "fbdiff/phantom.hpp"

namespace fbdiff {

/// Peak signal-to-noise ratio in dB, capped at 99 (identical inputs hit the
/// cap exactly).
inline double psnr(const Tensor<float>& a, const Tensor<float>& b, double peak = 1.0) {
  require(a.shape() == b.shape(), ErrorCode::ShapeMismatch,
          "psnr: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  require(peak > 0, ErrorCode::InvalidArgument, "psnr: peak must be positive");
  double mse_acc = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    const double d = double(a.vals()[i]) - double(b.vals()[i]);
    mse_acc += d * d;
  }
  mse_acc /= double(a.numel());
  if (mse_acc == 0.0) return 99.0;
  return std::min(99.0, 10.0 * std::log10(peak * peak / mse_acc));
}

/// Mean second temporal difference magnitude, ||(V_{n+1}-V_n)-(V_n-V_{n-1})||_1
/// averaged over pixels and interior frames. Zero for anything linear in time;
/// lower is smoother.
inline double temporal_consistency(const Tensor<float>& frames) {
  require(frames.ndim() == 4, ErrorCode::ShapeMismatch, "temporal_consistency: need [N,C,H,W]");
  const int64_t N = frames.dim(0);
  require(N >= 3, ErrorCode::InvalidArgument,
          "temporal_consistency: need at least 3 frames, got " + std::to_string(N));
  const int64_t fsz = frames.numel() / N;
  const int64_t hw = frames.dim(2) * frames.dim(3);
  const float* p = frames.ptr();
  double acc = 0.0;
  for (int64_t n = 1; n + 1 < N; ++n) {
    double l1 = 0.0;
    for (int64_t i = 0; i < fsz; ++i) {
      const double second = (double(p[(n + 1) * fsz + i]) - p[n * fsz + i]) -
                            (double(p[n * fsz + i]) - p[(n - 1) * fsz + i]);
      l1 += std::abs(second);
    }
    acc += l1 / double(hw);
  }
  return acc / double(N - 2);
}

/// Centered intermediate frames, the hardest interpolation targets: three
/// indices for odd N, the centered pair for even N. Never contains an
/// endpoint.
inline std::set<int64_t> midmost_indices(int64_t n) {
  require(n >= 4, ErrorCode::InvalidArgument,
          "midmost_indices: need N >= 4, got " + std::to_string(n));
  if (n % 2 == 1) return {(n - 3) / 2, (n - 1) / 2, (n + 1) / 2};
  return {n / 2 - 1, n / 2};
}

// ---------------------------------------------------------------------------
// Baselines and the model interface
// ---------------------------------------------------------------------------

/// Endpoint-only interpolation interface. The benchmark hands models nothing
/// but the two endpoint frames, so ground-truth intermediates cannot leak.
class Interpolator {
 public:
  virtual ~Interpolator() = default;
  virtual std::string name() const = 0;
  virtual Sequence predict(const Tensor<float>& first, const Tensor<float>& last,
                           int64_t n_frames, uint64_t case_seed) const = 0;
};

/// Pixel-space linear blend between the endpoints.
inline Sequence crossfade_baseline(const Tensor<float>& first, const Tensor<float>& last,
                                   int64_t n_frames) {
  require(n_frames >= 2, ErrorCode::InvalidArgument, "crossfade: need at least 2 frames");
  require(first.shape() == last.shape() && first.dim(0) == 1, ErrorCode::ShapeMismatch,
          "crossfade: endpoints must be single frames of equal shape");
  Tensor<float> frames({n_frames, first.dim(1), first.dim(2), first.dim(3)});
  const int64_t fsz = first.numel();
  for (int64_t n = 0; n < n_frames; ++n) {
    const float w = float(n) / float(n_frames - 1);
    float* dst = frames.ptr() + n * fsz;
    for (int64_t i = 0; i < fsz; ++i)
      dst[i] = (1.0f - w) * first.vals()[i] + w * last.vals()[i];
  }
  return Sequence{frames, "crossfade"};
}

class CrossfadeModel : public Interpolator {
 public:
  std::string name() const override { return "crossfade"; }
  Sequence predict(const Tensor<float>& first, const Tensor<float>& last, int64_t n_frames,
                   uint64_t) const override {
    return crossfade_baseline(first, last, n_frames);
  }
};

/// Linear motion in the stage-1 latent space: encode the endpoints as
/// single-frame latents, interpolate per index, decode each frame.
inline Sequence latent_lerp_baseline(const VaeModel<float>& stage1, const Tensor<float>& first,
                                     const Tensor<float>& last, int64_t n_frames) {
  require(n_frames >= 2, ErrorCode::InvalidArgument, "latent_lerp: need at least 2 frames");
  auto z0 = encode_latent(stage1, first).z;
  auto z1 = encode_latent(stage1, last).z;
  Tensor<float> frames({n_frames, first.dim(1), first.dim(2), first.dim(3)});
  const int64_t fsz = first.numel();
  for (int64_t n = 0; n < n_frames; ++n) {
    const float w = float(n) / float(n_frames - 1);
    Tensor<float> zn(z0.shape());
    for (int64_t i = 0; i < zn.numel(); ++i)
      zn.vals()[i] = (1.0f - w) * z0.vals()[i] + w * z1.vals()[i];
    auto frame = decode(stage1, zn);
    std::memcpy(frames.ptr() + n * fsz, frame.ptr(), sizeof(float) * fsz);
  }
  return Sequence{frames, "latent_lerp"};
}

class LatentLerpModel : public Interpolator {
 public:
  explicit LatentLerpModel(const VaeModel<float>* stage1) : stage1_(stage1) {}
  std::string name() const override { return "latent_lerp"; }
  Sequence predict(const Tensor<float>& first, const Tensor<float>& last, int64_t n_frames,
                   uint64_t) const override {
    return latent_lerp_baseline(*stage1_, first, last, n_frames);
  }

 private:
  const VaeModel<float>* stage1_;
};

/// The coarse inpainting network alone (stage-2 output, no diffusion).
class InpaintModel : public Interpolator {
 public:
  explicit InpaintModel(const VaeModel<float>* stage2) : stage2_(stage2) {}
  std::string name() const override { return "inpaint_vae"; }
  Sequence predict(const Tensor<float>& first, const Tensor<float>& last, int64_t n_frames,
                   uint64_t) const override {
    auto masked = masked_from_endpoints(first, last, n_frames);
    return inpaint_infer(*stage2_, masked).v_hat;
  }

 private:
  const VaeModel<float>* stage2_;
};

/// Full pipeline: inpainting conditioning plus DDPM sampling.
class FbDiffModel : public Interpolator {
 public:
  FbDiffModel(const VaeModel<float>* stage2, const DenoiserModel<float>* denoiser,
              const NoiseSchedule* schedule, const LatentStats& latent_stats,
              int64_t sample_steps,
              ConditionFlags flags = {})
      : stage2_(stage2),
        denoiser_(denoiser),
        schedule_(schedule),
        latent_stats_(latent_stats),
        sample_steps_(sample_steps),
        flags_(flags) {}

  std::string name() const override { return "fb_diff"; }
  Sequence predict(const Tensor<float>& first, const Tensor<float>& last, int64_t n_frames,
                   uint64_t case_seed) const override {
    auto masked = masked_from_endpoints(first, last, n_frames);
    auto cond = make_condition(*stage2_, masked, flags_);
    return sample_ddpm(cond, *denoiser_, *stage2_, *schedule_, latent_stats_, case_seed,
                       sample_steps_);
  }

 private:
  const VaeModel<float>* stage2_;
  const DenoiserModel<float>* denoiser_;
  const NoiseSchedule* schedule_;
  LatentStats latent_stats_;
  int64_t sample_steps_;
  ConditionFlags flags_;
};

// ---------------------------------------------------------------------------
// Benchmark driver
// ---------------------------------------------------------------------------

struct MetricRow {
  std::string model;
  std::string split;
  double psnr_mean = 0.0;
  double psnr_std = 0.0;
  double tconsist_mean = 0.0;
  double midmost_psnr_mean = 0.0;
  double midmost_psnr_std = 0.0;
};

namespace detail {

inline Tensor<float> frame_at(const Tensor<float>& frames, int64_t n) {
  const int64_t fsz = frames.numel() / frames.dim(0);
  Tensor<float> out({1, frames.dim(1), frames.dim(2), frames.dim(3)});
  std::memcpy(out.ptr(), frames.ptr() + n * fsz, sizeof(float) * fsz);
  return out;
}

inline Tensor<float> gather_frames(const Tensor<float>& frames, const std::vector<int64_t>& idx) {
  const int64_t fsz = frames.numel() / frames.dim(0);
  Tensor<float> out({int64_t(idx.size()), frames.dim(1), frames.dim(2), frames.dim(3)});
  for (size_t i = 0; i < idx.size(); ++i)
    std::memcpy(out.ptr() + i * fsz, frames.ptr() + idx[i] * fsz, sizeof(float) * fsz);
  return out;
}

inline void mean_std(const std::vector<double>& xs, double& mean, double& stddev) {
  mean = 0.0;
  for (double x : xs) mean += x;
  mean /= double(xs.size());
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  stddev = std::sqrt(var / double(xs.size()));
}

}  // namespace detail

/// Evaluates every model on every case's intermediate frames. Each model
/// receives only the endpoints; metrics are computed afterwards against the
/// held ground truth. The temporal-consistency column scores the residual
/// (prediction minus truth): smooth errors indicate consistent motion.
inline std::vector<MetricRow> run_benchmark(const std::vector<const Sequence*>& cases,
                                            const std::vector<const Interpolator*>& models,
                                            uint64_t seed, const std::string& split_name) {
  require(!cases.empty(), ErrorCode::InvalidArgument, "benchmark: no cases");
  std::vector<MetricRow> rows;
  for (const Interpolator* model : models) {
    std::vector<double> psnrs, midmosts, tconsists;
    for (size_t ci = 0; ci < cases.size(); ++ci) {
      const Sequence& truth = *cases[ci];
      const int64_t N = truth.frame_count();
      const uint64_t case_seed = Rng::for_case(seed, ci).next_u64();
      auto first = detail::frame_at(truth.frames, 0);
      auto last = detail::frame_at(truth.frames, N - 1);
      Sequence pred = model->predict(first, last, N, case_seed);
      require(pred.frames.shape() == truth.frames.shape(), ErrorCode::ShapeMismatch,
              "benchmark: model " + model->name() + " returned the wrong shape");

      std::vector<int64_t> inter;
      for (int64_t n = 1; n + 1 < N; ++n) inter.push_back(n);
      psnrs.push_back(psnr(detail::gather_frames(pred.frames, inter),
                           detail::gather_frames(truth.frames, inter)));
      const std::set<int64_t> mid_set = midmost_indices(N);
      const std::vector<int64_t> mid(mid_set.begin(), mid_set.end());
      midmosts.push_back(psnr(detail::gather_frames(pred.frames, mid),
                              detail::gather_frames(truth.frames, mid)));
      Tensor<float> residual(pred.frames.shape());
      for (int64_t i = 0; i < residual.numel(); ++i)
        residual.vals()[i] = pred.frames.vals()[i] - truth.frames.vals()[i];
      tconsists.push_back(temporal_consistency(residual));
    }
    MetricRow row;
    row.model = model->name();
    row.split = split_name;
    detail::mean_std(psnrs, row.psnr_mean, row.psnr_std);
    detail::mean_std(midmosts, row.midmost_psnr_mean, row.midmost_psnr_std);
    double tstd;
    detail::mean_std(tconsists, row.tconsist_mean, tstd);
    rows.push_back(row);
  }
  return rows;
}

inline std::string benchmark_csv(const std::vector<MetricRow>& rows) {
  std::string out = "model,split,psnr_mean,psnr_std,tconsist_mean,midmost_psnr_mean,midmost_psnr_std\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%s,%s,%.6f,%.6f,%.6f,%.6f,%.6f\n", r.model.c_str(),
                  r.split.c_str(), r.psnr_mean, r.psnr_std, r.tconsist_mean, r.midmost_psnr_mean,
                  r.midmost_psnr_std);
    out += buf;
  }
  return out;
}

}  // namespace fbdiff
