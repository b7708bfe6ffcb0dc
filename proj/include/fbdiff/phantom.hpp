#pragma once

#include <cmath>
#include <string>

#include "fbdiff/rng.hpp"
#include "fbdiff/tensor.hpp"

namespace fbdiff {

/// A temporal image sequence, frames [N,1,H,W] with intensities in [0,1].
struct Sequence {
  Tensor<float> frames;
  std::string case_id;

  int64_t frame_count() const { return frames.defined() ? frames.dim(0) : 0; }
  int64_t height() const { return frames.dim(2); }
  int64_t width() const { return frames.dim(3); }
};

/// Sequence with all interior frames zeroed; known_mask[n] is 1 for the two
/// conditioning endpoints and 0 elsewhere.
struct MaskedSequence {
  Tensor<float> frames;
  std::vector<float> known_mask;
};

/// Generator settings for the breathing phantom. Radii are in pixels of the
/// target resolution.
struct PhantomParams {
  double base_radius = 8.0;      // r0
  double amplitude = 4.5;        // a, radial breathing amplitude
  double nonlinearity = 0.15;    // b, phase wobble strength
  double period_fraction = 0.25; // portion of a full cycle covered by the sequence
  double center_jitter = 2.0;    // per-case center offset bound
  double noise_sigma = 0.01;     // additive gaussian noise, clipped to [0,1]

  void validate(int64_t H, int64_t W) const {
    require(base_radius > 0 && amplitude >= 0, ErrorCode::InvalidArgument,
            "phantom: radius and amplitude must be nonnegative");
    require(amplitude < base_radius, ErrorCode::InvalidArgument,
            "phantom: amplitude must be smaller than the base radius");
    require(base_radius + amplitude < std::min(H, W) / 2.0, ErrorCode::InvalidArgument,
            "phantom: breathing ellipse would not fit the frame");
    require(noise_sigma >= 0 && noise_sigma <= 0.05, ErrorCode::InvalidArgument,
            "phantom: noise_sigma out of [0, 0.05]");
    require(period_fraction > 0 && period_fraction <= 1.0, ErrorCode::InvalidArgument,
            "phantom: period_fraction out of (0, 1]");
  }
};

namespace detail {

inline double smoothstep01(double u) {
  u = std::min(1.0, std::max(0.0, u));
  return u * u * (3.0 - 2.0 * u);
}

}  // namespace detail

/// Renders a quasi-periodic breathing phantom.
///
/// Frame n draws a soft-edged ellipse with radius
///   r(n) = r0 + a * sin(2*pi*phi(n)),
///   phi(n) = (n/(N-1)) * period_fraction + b * sin(2*pi*n/(N-1)),
/// over a fixed sinusoidal background texture. Pixel intensity blends
/// foreground and background with a smoothstep over the signed distance to
/// the ellipse boundary (edge half-width 1 px), then adds clipped gaussian
/// noise. All randomness comes from `seed`, so output is reproducible.
inline Sequence generate_phantom(uint64_t seed, const PhantomParams& params, int64_t N, int64_t H,
                                 int64_t W, const std::string& case_id = "case") {
  require(N >= 2, ErrorCode::InvalidArgument, "generate_phantom: need at least two frames");
  params.validate(H, W);
  Rng rng(seed);

  // per-case variation around the configured values; the radius cap keeps
  // the foreground under 60% of the frame even at full inhale
  const double r_cap =
      std::min(std::min(H, W) / 2.0 - 1.0, std::sqrt(0.58 * double(H) * double(W) / M_PI));
  const double r0 = std::min(params.base_radius * rng.next_uniform(0.9, 1.1), r_cap - 0.5);
  double amp = params.amplitude * rng.next_uniform(0.7, 1.3);
  const double b = params.nonlinearity * rng.next_uniform(0.5, 1.5);
  amp = std::min(amp, std::max(0.0, r_cap - r0));
  if (params.amplitude > 0 && amp >= r0) amp = 0.95 * r0;
  const double cx = W / 2.0 + rng.next_uniform(-params.center_jitter, params.center_jitter);
  const double cy = H / 2.0 + rng.next_uniform(-params.center_jitter, params.center_jitter);
  const double aspect = rng.next_uniform(0.75, 1.0);  // ry / rx

  // background texture: product of two low-frequency sinusoids
  const double fx = 1.0 + std::floor(rng.next_uniform(0.0, 3.0));
  const double fy = 1.0 + std::floor(rng.next_uniform(0.0, 3.0));
  const double px = rng.next_uniform(0.0, 1.0);
  const double py = rng.next_uniform(0.0, 1.0);
  const double bg_base = 0.15, bg_amp = 0.08, fg = 0.85;

  Tensor<float> frames({N, 1, H, W});
  float* out = frames.ptr();
  const double edge = 1.0;  // smoothstep half-width in pixels
  for (int64_t n = 0; n < N; ++n) {
    const double tpos = static_cast<double>(n) / static_cast<double>(N - 1);
    const double phase = tpos * params.period_fraction + b * std::sin(2.0 * M_PI * tpos);
    const double rx = r0 + amp * std::sin(2.0 * M_PI * phase);
    const double ry = rx * aspect;
    float* fp = out + n * H * W;
    for (int64_t y = 0; y < H; ++y) {
      for (int64_t x = 0; x < W; ++x) {
        const double bg =
            bg_base + bg_amp * std::sin(2.0 * M_PI * (fx * (x + 0.5) / W + px)) *
                          std::sin(2.0 * M_PI * (fy * (y + 0.5) / H + py));
        const double dx = (x + 0.5 - cx) / rx;
        const double dy = (y + 0.5 - cy) / ry;
        const double dpx = (std::sqrt(dx * dx + dy * dy) - 1.0) * std::min(rx, ry);
        const double s = detail::smoothstep01((edge - dpx) / (2.0 * edge));
        fp[y * W + x] = static_cast<float>(bg * (1.0 - s) + fg * s);
      }
    }
    if (params.noise_sigma > 0) {
      for (int64_t i = 0; i < H * W; ++i) {
        const double v = fp[i] + params.noise_sigma * rng.next_gaussian();
        fp[i] = static_cast<float>(std::min(1.0, std::max(0.0, v)));
      }
    }
  }
  return Sequence{frames, case_id};
}

/// Zeroes all interior frames, keeping the endpoints as conditioning input.
inline MaskedSequence mask_sequence(const Sequence& v) {
  const int64_t N = v.frame_count();
  require(N >= 3, ErrorCode::InvalidArgument,
          "mask_sequence: need at least 3 frames, nothing to interpolate in " +
              std::to_string(N));
  Tensor<float> masked(v.frames.shape());
  const int64_t fsz = v.frames.numel() / N;
  std::memcpy(masked.ptr(), v.frames.ptr(), sizeof(float) * fsz);
  std::memcpy(masked.ptr() + (N - 1) * fsz, v.frames.ptr() + (N - 1) * fsz, sizeof(float) * fsz);
  std::vector<float> mask(N, 0.0f);
  mask.front() = 1.0f;
  mask.back() = 1.0f;
  return MaskedSequence{masked, mask};
}

/// Builds a masked sequence directly from two endpoint frames [1,1,H,W].
inline MaskedSequence masked_from_endpoints(const Tensor<float>& first,
                                            const Tensor<float>& last, int64_t N) {
  require(first.shape() == last.shape() && first.ndim() == 4 && first.dim(0) == 1,
          ErrorCode::ShapeMismatch, "masked_from_endpoints: endpoints must be [1,1,H,W]");
  require(N >= 3, ErrorCode::InvalidArgument, "masked_from_endpoints: need N >= 3");
  Tensor<float> frames({N, first.dim(1), first.dim(2), first.dim(3)});
  const int64_t fsz = first.numel();
  std::memcpy(frames.ptr(), first.ptr(), sizeof(float) * fsz);
  std::memcpy(frames.ptr() + (N - 1) * fsz, last.ptr(), sizeof(float) * fsz);
  std::vector<float> mask(N, 0.0f);
  mask.front() = 1.0f;
  mask.back() = 1.0f;
  return MaskedSequence{frames, mask};
}

/// One dataset case plus its split assignment.
struct DatasetCase {
  Sequence seq;
  std::string split;
};

struct DatasetSpec {
  int cases_train = 100;
  int cases_val = 20;
  int cases_test = 30;
  int64_t height = 32;
  int64_t width = 32;
  int frames_min = 6;
  int frames_max = 16;
  PhantomParams phantom;
};

/// Generates the full train/val/test corpus. Case `i` draws from the stream
/// Rng::for_case(master_seed, i), so any subset can be regenerated
/// independently and parallel generation agrees with serial bitwise.
inline std::vector<DatasetCase> make_dataset(uint64_t master_seed, const DatasetSpec& spec) {
  require(spec.frames_min >= 3 && spec.frames_max >= spec.frames_min, ErrorCode::InvalidArgument,
          "dataset: bad frame range");
  const int total = spec.cases_train + spec.cases_val + spec.cases_test;
  std::vector<DatasetCase> cases(total);
  for (int i = 0; i < total; ++i) {
    Rng case_rng = Rng::for_case(master_seed, static_cast<uint64_t>(i));
    const uint64_t case_seed = case_rng.next_u64();
    const int n_frames =
        spec.frames_min + static_cast<int>(case_rng.next_below(
                              static_cast<uint64_t>(spec.frames_max - spec.frames_min + 1)));
    char id[32];
    std::snprintf(id, sizeof(id), "case_%04d", i);
    const char* split = i < spec.cases_train                  ? "train"
                        : i < spec.cases_train + spec.cases_val ? "val"
                                                                : "test";
    cases[i].seq =
        generate_phantom(case_seed, spec.phantom, n_frames, spec.height, spec.width, id);
    cases[i].split = split;
  }
  return cases;
}

}  // namespace fbdiff
