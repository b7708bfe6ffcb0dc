#include <gtest/gtest.h>

#include "fbdiff/metrics.hpp"
#include "oracles.hpp"

using fbdiff::Rng;
using fbdiff::Sequence;
using fbdiff::Tensor;

TEST(Psnr, CapAndKnownValue) {
  Rng rng(1);
  Tensor<float> a({2, 1, 4, 4});
  a.fill_uniform(rng, 0.0f, 1.0f);
  EXPECT_DOUBLE_EQ(fbdiff::psnr(a, a), 99.0);

  // uniform squared error of 0.01 -> 20 dB at peak 1
  Tensor<float> b = a.clone();
  for (auto& v : b.vals()) v += 0.1f;
  EXPECT_NEAR(fbdiff::psnr(a, b), 20.0, 1e-4);

  Tensor<float> c({2, 1, 4, 5});
  EXPECT_THROW(fbdiff::psnr(a, c), fbdiff::Error);
}

TEST(Psnr, MatchesTwoPassOracleAndSymmetry) {
  Rng rng(2);
  Tensor<float> a({3, 1, 8, 8}), b({3, 1, 8, 8});
  a.fill_uniform(rng, 0.0f, 1.0f);
  b.fill_uniform(rng, 0.0f, 1.0f);
  // independent two-pass mse
  double acc = 0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    const double d = double(a.vals()[i]) - double(b.vals()[i]);
    acc += d * d;
  }
  const double expected = 10.0 * std::log10(1.0 / (acc / a.numel()));
  EXPECT_NEAR(fbdiff::psnr(a, b), expected, 1e-6);
  EXPECT_DOUBLE_EQ(fbdiff::psnr(a, b), fbdiff::psnr(b, a));
}

TEST(TemporalConsistency, LinearMotionsScoreZero) {
  Tensor<float> constant = Tensor<float>::full({5, 1, 3, 3}, 0.4f);
  EXPECT_DOUBLE_EQ(fbdiff::temporal_consistency(constant), 0.0);

  Tensor<float> ramp({6, 1, 2, 2});
  for (int64_t n = 0; n < 6; ++n)
    for (int64_t i = 0; i < 4; ++i) ramp.vals()[n * 4 + i] = 0.1f * n + 0.05f * i;
  EXPECT_NEAR(fbdiff::temporal_consistency(ramp), 0.0, 1e-7);

  Tensor<float> two({2, 1, 2, 2});
  EXPECT_THROW(fbdiff::temporal_consistency(two), fbdiff::Error);
}

TEST(TemporalConsistency, SineMatchesClosedForm) {
  const int64_t N = 12;
  Tensor<float> frames({N, 1, 5, 5});
  for (int64_t n = 0; n < N; ++n) {
    const float v = static_cast<float>(std::sin(2.0 * M_PI * n / N));
    for (int64_t i = 0; i < 25; ++i) frames.vals()[n * 25 + i] = v;
  }
  // frames are spatially uniform, so the score is the mean absolute second
  // difference of the scalar sine sequence
  double expected = 0;
  for (int64_t n = 1; n + 1 < N; ++n) {
    const double s = std::sin(2.0 * M_PI * (n + 1) / N) - 2.0 * std::sin(2.0 * M_PI * n / N) +
                     std::sin(2.0 * M_PI * (n - 1) / N);
    expected += std::abs(s);
  }
  expected /= double(N - 2);
  EXPECT_NEAR(fbdiff::temporal_consistency(frames), expected, 1e-5);
}

TEST(Midmost, TableRule) {
  EXPECT_EQ(fbdiff::midmost_indices(7), (std::set<int64_t>{2, 3, 4}));
  EXPECT_EQ(fbdiff::midmost_indices(6), (std::set<int64_t>{2, 3}));
  EXPECT_EQ(fbdiff::midmost_indices(16), (std::set<int64_t>{7, 8}));
  EXPECT_THROW(fbdiff::midmost_indices(3), fbdiff::Error);
  for (int64_t n = 4; n <= 16; ++n) {
    auto ids = fbdiff::midmost_indices(n);
    EXPECT_EQ(ids.size(), n % 2 ? 3u : 2u);
    EXPECT_EQ(ids.count(0), 0u);
    EXPECT_EQ(ids.count(n - 1), 0u);
    // symmetric about the sequence center
    for (int64_t i : ids) EXPECT_EQ(ids.count(n - 1 - i), 1u) << "n=" << n;
  }
}

TEST(Crossfade, EndpointsMidpointSmoothness) {
  Rng rng(3);
  Tensor<float> first({1, 1, 4, 4}), last({1, 1, 4, 4});
  first.fill_uniform(rng, 0.0f, 1.0f);
  last.fill_uniform(rng, 0.0f, 1.0f);

  auto seq = fbdiff::crossfade_baseline(first, last, 3);
  for (int64_t i = 0; i < 16; ++i) {
    EXPECT_EQ(seq.frames.vals()[i], first.vals()[i]);
    EXPECT_EQ(seq.frames.vals()[32 + i], last.vals()[i]);
    EXPECT_NEAR(seq.frames.vals()[16 + i], 0.5f * (first.vals()[i] + last.vals()[i]), 1e-7);
  }
  auto seq2 = fbdiff::crossfade_baseline(first, last, 9);
  EXPECT_NEAR(fbdiff::temporal_consistency(seq2.frames), 0.0, 1e-6);
}

TEST(LatentLerp, EndpointsAreDecoded) {
  fbdiff::VaeModel<float> stage1;
  stage1.cfg.channels = {4, 8};
  stage1.cfg.downsample = 2;
  stage1.cfg.theta_channels = 4;
  stage1.init(5);
  Rng rng(4);
  Tensor<float> first({1, 1, 16, 16}), last({1, 1, 16, 16});
  first.fill_uniform(rng, 0.0f, 1.0f);
  last.fill_uniform(rng, 0.0f, 1.0f);

  auto two = fbdiff::latent_lerp_baseline(stage1, first, last, 2);
  auto dec_first = fbdiff::decode(stage1, fbdiff::encode_latent(stage1, first).z);
  for (int64_t i = 0; i < 256; ++i)
    EXPECT_EQ(two.frames.vals()[i], dec_first.vals()[i]);

  auto a = fbdiff::latent_lerp_baseline(stage1, first, last, 5);
  auto b = fbdiff::latent_lerp_baseline(stage1, first, last, 5);
  for (int64_t i = 0; i < a.frames.numel(); ++i)
    EXPECT_EQ(a.frames.vals()[i], b.frames.vals()[i]);
}

namespace {

/// Test-only oracle: "predicts" by returning the captured ground truth.
class OracleModel : public fbdiff::Interpolator {
 public:
  explicit OracleModel(const std::vector<const Sequence*>& cases) : cases_(cases) {}
  std::string name() const override { return "oracle"; }
  Sequence predict(const Tensor<float>&, const Tensor<float>&, int64_t n_frames,
                   uint64_t) const override {
    for (const Sequence* s : cases_)
      if (s->frame_count() == n_frames && !used_.count(s)) {
        used_.insert(s);
        return *s;
      }
    for (const Sequence* s : cases_)
      if (s->frame_count() == n_frames) return *s;
    throw fbdiff::Error(fbdiff::ErrorCode::InvalidArgument, "no matching case");
  }

 private:
  std::vector<const Sequence*> cases_;
  mutable std::set<const Sequence*> used_;
};

}  // namespace

TEST(Benchmark, OracleHitsCapAndCsvDeterministic) {
  fbdiff::PhantomParams p;
  p.base_radius = 4.0;
  p.amplitude = 2.0;
  p.center_jitter = 1.0;
  std::vector<Sequence> cases;
  for (int i = 0; i < 3; ++i)
    cases.push_back(fbdiff::generate_phantom(400 + i, p, 6 + i, 16, 16, "c" + std::to_string(i)));
  std::vector<const Sequence*> ptrs;
  for (auto& c : cases) ptrs.push_back(&c);

  OracleModel oracle(ptrs);
  fbdiff::CrossfadeModel crossfade;
  std::vector<const fbdiff::Interpolator*> models{&oracle, &crossfade};

  auto rows = fbdiff::run_benchmark(ptrs, models, 7, "test");
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_DOUBLE_EQ(rows[0].psnr_mean, 99.0);
  EXPECT_DOUBLE_EQ(rows[0].psnr_std, 0.0);
  EXPECT_DOUBLE_EQ(rows[0].midmost_psnr_mean, 99.0);
  EXPECT_LT(rows[1].psnr_mean, 99.0);

  const std::string csv1 = fbdiff::benchmark_csv(rows);
  const std::string csv2 = fbdiff::benchmark_csv(fbdiff::run_benchmark(ptrs, models, 7, "test"));
  EXPECT_EQ(csv1, csv2);
  EXPECT_EQ(csv1.substr(0, csv1.find('\n')),
            "model,split,psnr_mean,psnr_std,tconsist_mean,midmost_psnr_mean,midmost_psnr_std");
  // LF endings only
  EXPECT_EQ(csv1.find('\r'), std::string::npos);
}
