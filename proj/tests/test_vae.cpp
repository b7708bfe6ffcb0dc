#include <gtest/gtest.h>

#include <filesystem>

#include "fbdiff/pipeline.hpp"
#include "fbdiff/vae.hpp"
#include "oracles.hpp"

using fbdiff::AutoencoderConfig;
using fbdiff::Rng;
using fbdiff::Sequence;
using fbdiff::Shape;
using fbdiff::Tensor;
using fbdiff::VaeModel;

namespace {

AutoencoderConfig tiny_cfg() {
  AutoencoderConfig cfg;
  cfg.channels = {4, 8};
  cfg.downsample = 2;
  cfg.groups = 4;
  cfg.theta_channels = 4;
  return cfg;
}

std::vector<Sequence> tiny_cases(int n, int frames, uint64_t seed) {
  fbdiff::PhantomParams p;
  p.base_radius = 4.0;
  p.amplitude = 2.0;
  p.center_jitter = 1.0;
  std::vector<Sequence> out;
  for (int i = 0; i < n; ++i)
    out.push_back(fbdiff::generate_phantom(seed + i, p, frames, 16, 16,
                                           "tiny_" + std::to_string(i)));
  return out;
}

}  // namespace

TEST(Encode, DefaultShapes) {
  VaeModel<float> m;
  m.cfg = AutoencoderConfig{};  // 1 -> 8 -> 16 -> 32, downsample 4
  m.init(7);
  Rng rng(1);
  Tensor<float> v({12, 1, 32, 32});
  v.fill_uniform(rng, 0.0f, 1.0f);
  auto f = fbdiff::encode_features(m, v);
  EXPECT_EQ(f.shape(), (Shape{12, 32, 8, 8}));

  Tensor<float> bad({12, 1, 30, 30});
  EXPECT_THROW(fbdiff::encode_features(m, bad), fbdiff::Error);
}

TEST(Encode, Deterministic) {
  VaeModel<float> m;
  m.cfg = tiny_cfg();
  m.init(9);
  Rng rng(2);
  Tensor<float> v({6, 1, 16, 16});
  v.fill_uniform(rng, 0.0f, 1.0f);
  auto a = fbdiff::encode_features(m, v);
  auto b = fbdiff::encode_features(m, v);
  for (int64_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a.vals()[i], b.vals()[i]);
}

TEST(Encode, ZeroInputZeroBiasGivesZeroLatent) {
  VaeModel<float> m;
  m.cfg = tiny_cfg();
  m.init(5);
  // blocks are homogeneous once biases and norm offsets vanish
  for (auto& blk : m.enc) {
    std::fill(blk.sb.vals().begin(), blk.sb.vals().end(), 0.0f);
    std::fill(blk.tb.vals().begin(), blk.tb.vals().end(), 0.0f);
    std::fill(blk.gnb.vals().begin(), blk.gnb.vals().end(), 0.0f);
  }
  Tensor<float> zero({5, 1, 16, 16});
  auto f = fbdiff::encode_features(m, zero);
  for (float v : f.vals()) EXPECT_EQ(v, 0.0f);
}

TEST(Fmo, ZeroTauGivesRealNonnegativeBases) {
  VaeModel<float> m;
  m.cfg = tiny_cfg();
  m.init(11);
  std::fill(m.tau_w.vals().begin(), m.tau_w.vals().end(), 0.0f);
  std::fill(m.tau_b.vals().begin(), m.tau_b.vals().end(), 0.0f);
  Rng rng(4);
  Tensor<float> f({6, 8, 8, 8});
  f.fill_gaussian(rng);
  auto out = fbdiff::fourier_motion_operator(m, f, 6);
  for (int64_t i = 0; i < out.bases.re.numel(); ++i) {
    EXPECT_GE(out.bases.re.vals()[i], 0.0f);       // softplus magnitude, cos(0)=1
    EXPECT_EQ(out.bases.im.vals()[i], 0.0f);       // sin(0)=0
  }
}

TEST(Fmo, ZeroFeaturesStayFinite) {
  VaeModel<float> m;
  m.cfg = tiny_cfg();
  m.init(12);
  std::fill(m.fmo_m_b.vals().begin(), m.fmo_m_b.vals().end(), 0.0f);
  Tensor<float> f({6, 8, 4, 4});
  auto out = fbdiff::fourier_motion_operator(m, f, 6);
  const float sp0 = std::log1p(std::exp(0.0f));  // softplus(0)
  for (float v : out.magnitude.vals()) EXPECT_FLOAT_EQ(v, sp0);
  for (float v : out.enhanced.vals()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Fmo, EnhancementIsSigmoidBounded) {
  VaeModel<float> m;
  m.cfg = tiny_cfg();
  m.init(13);
  Rng rng(6);
  Tensor<float> f({6, 8, 4, 4});
  f.fill_gaussian(rng);
  auto out = fbdiff::fourier_motion_operator(m, f, 4);
  for (int64_t i = 0; i < f.numel(); ++i) {
    const float d = out.enhanced.vals()[i] - f.vals()[i];
    EXPECT_GT(d, 0.0f);
    EXPECT_LT(d, 1.0f);
  }
}

TEST(Fmo, RejectsTooManyFrames) {
  VaeModel<float> m;
  m.cfg = tiny_cfg();
  m.cfg.n_max = 8;
  m.init(14);
  Tensor<float> f({9, 8, 4, 4});
  EXPECT_THROW(fbdiff::fourier_motion_operator(m, f, 9), fbdiff::Error);
}

TEST(Fmo, MagnitudeInvariantToCircularShift) {
  // |B_k| of a circularly shifted sequence equals the original modulus, so
  // the case-specific magnitude path cannot distinguish the two
  VaeModel<float> m;
  m.cfg = tiny_cfg();
  m.init(15);
  Rng rng(7);
  const int64_t N = 6;
  Tensor<float> f({N, 8, 4, 4});
  f.fill_gaussian(rng);
  Tensor<float> shifted(f.shape());
  const int64_t fsz = f.numel() / N;
  for (int64_t n = 0; n < N; ++n)
    std::memcpy(shifted.ptr() + ((n + 2) % N) * fsz, f.ptr() + n * fsz, sizeof(float) * fsz);

  auto a = fbdiff::fourier_motion_operator(m, f, N);
  auto b = fbdiff::fourier_motion_operator(m, shifted, N);
  for (int64_t i = 0; i < a.magnitude.numel(); ++i)
    EXPECT_NEAR(a.magnitude.vals()[i], b.magnitude.vals()[i], 1e-4);
}

TEST(Fmo, DroppingThetaKeepsMagnitudesBitwise) {
  VaeModel<float> with_theta;
  with_theta.cfg = tiny_cfg();
  with_theta.init(16);
  VaeModel<float> without = with_theta;
  without.cfg.use_theta = false;

  Rng rng(8);
  Tensor<float> f({6, 8, 4, 4});
  f.fill_gaussian(rng);
  auto a = fbdiff::fourier_motion_operator(with_theta, f, 6);
  auto b = fbdiff::fourier_motion_operator(without, f, 6);
  for (int64_t i = 0; i < a.magnitude.numel(); ++i)
    EXPECT_EQ(a.magnitude.vals()[i], b.magnitude.vals()[i]);
  // and the phase path did change the complex parts
  double diff = 0;
  for (int64_t i = 0; i < a.bases.im.numel(); ++i)
    diff += std::abs(a.bases.im.vals()[i] - b.bases.im.vals()[i]);
  EXPECT_GT(diff, 0.0);
}

TEST(GradCheck, FmoChainToThetaAndFeatures) {
  // double-precision finite differences through the full operator chain.
  // The theta path is smooth and holds 1e-6 at the 1e-3 step; the feature
  // path composes softplus/trig/sigmoid whose third derivative puts the
  // central-difference truncation floor near 1e-5 at that step.
  using V = std::vector<Tensor<double>>;
  AutoencoderConfig cfg = tiny_cfg();
  for (uint64_t seed = 1; seed <= 3; ++seed) {
    VaeModel<double> m;
    m.cfg = cfg;
    m.init(seed);
    const auto errs = oracles::max_grad_errors<double>(
        {{5, 8, 3, 3}, {cfg.n_max, cfg.theta_channels}},
        [&](const V& xs) {
          VaeModel<double> local = m;
          local.theta = xs[1];
          auto out = fbdiff::fourier_motion_operator(local, xs[0], 3);
          auto a = oracles::weighted_sum(out.enhanced, seed + 11);
          auto b = oracles::weighted_sum(out.bases.re, seed + 12);
          auto c = oracles::weighted_sum(out.bases.im, seed + 13);
          return fbdiff::add(fbdiff::add(a, b), c);
        },
        seed);
    EXPECT_LE(errs[0], 1e-5) << "fmo chain d/dF seed " << seed;
    EXPECT_LE(errs[1], 1e-6) << "fmo chain d/dtheta seed " << seed;
  }
}

TEST(Decode, RangeAndShape) {
  VaeModel<float> m;
  m.cfg = AutoencoderConfig{};
  m.init(17);
  Rng rng(9);
  Tensor<float> z({12, 32, 8, 8});
  z.fill_gaussian(rng, 0.0f, 3.0f);
  auto frames = fbdiff::decode(m, z);
  EXPECT_EQ(frames.shape(), (Shape{12, 1, 32, 32}));
  for (float v : frames.vals()) {
    EXPECT_GT(v, 0.0f);
    EXPECT_LT(v, 1.0f);
  }
  Tensor<float> bad({12, 16, 8, 8});
  EXPECT_THROW(fbdiff::decode(m, bad), fbdiff::Error);
}

TEST(TrainVae, LossDropsAndThetaParticipates) {
  fbdiff::set_num_threads(1);
  auto cases = tiny_cases(6, 6, 100);
  std::vector<const Sequence*> ptrs;
  for (auto& c : cases) ptrs.push_back(&c);

  VaeModel<float> model;
  model.cfg = tiny_cfg();
  model.init(21);

  // theta must receive gradient on the very first step
  {
    VaeModel<float> probe = model;
    fbdiff::Tape<float> tape;
    fbdiff::ParamList<float> params = probe.params();
    fbdiff::detail::reset_and_watch(tape, params);
    auto lat = fbdiff::encode_latent(probe, ptrs[0]->frames);
    auto loss = fbdiff::mse(fbdiff::decode(probe, lat.z), ptrs[0]->frames);
    tape.backward(loss);
    double norm = 0;
    for (float g : tape.grad_or_zero(probe.theta)) norm += double(g) * g;
    EXPECT_GT(std::sqrt(norm), 0.0);
  }

  fbdiff::TrainConfig tc;
  tc.epochs = 3;
  tc.batch = 2;
  tc.lr = 3e-4;
  auto metrics = fbdiff::train_autoencoder(model, ptrs, tc, 5, false);
  EXPECT_LT(metrics.final_epoch_loss, metrics.first_epoch_loss);

  // same seed, same data: identical final loss
  VaeModel<float> model2;
  model2.cfg = tiny_cfg();
  model2.init(21);
  auto metrics2 = fbdiff::train_autoencoder(model2, ptrs, tc, 5, false);
  EXPECT_EQ(metrics.final_epoch_loss, metrics2.final_epoch_loss);
}

TEST(Stage2, InitFromStage1AndAllParamsReachable) {
  fbdiff::set_num_threads(1);
  auto cases = tiny_cases(4, 6, 300);
  std::vector<const Sequence*> ptrs;
  for (auto& c : cases) ptrs.push_back(&c);

  VaeModel<float> stage1;
  stage1.cfg = tiny_cfg();
  stage1.init(31);
  fbdiff::TrainConfig tc;
  tc.epochs = 1;
  auto m1 = fbdiff::train_autoencoder(stage1, ptrs, tc, 6, false);
  (void)m1;
  fbdiff::ParamList<float> p1 = stage1.params();
  fbdiff::write_checkpoint("/tmp/fbdiff_test_s1.fbck",
                           nlohmann::json{{"kind", "vae_stage1"}}, p1);

  VaeModel<float> stage2;
  stage2.cfg = tiny_cfg();
  stage2.cfg.mask_channel = true;
  stage2.init(32);
  auto ck = fbdiff::read_checkpoint("/tmp/fbdiff_test_s1.fbck");
  fbdiff::init_stage2_from_stage1(stage2, ck);

  // frame slice copied, mask slice zeroed
  const auto& src = *ck.find("enc0.sconv.w");
  EXPECT_EQ(stage2.enc[0].sw.dim(1), 2);
  for (int64_t co = 0; co < src.dim(0); ++co)
    for (int64_t i = 0; i < 9; ++i) {
      EXPECT_EQ(stage2.enc[0].sw.vals()[co * 18 + i], src.vals()[co * 9 + i]);
      EXPECT_EQ(stage2.enc[0].sw.vals()[co * 18 + 9 + i], 0.0f);
    }
  // theta reused
  for (int64_t i = 0; i < stage2.theta.numel(); ++i)
    EXPECT_EQ(stage2.theta.vals()[i], stage1.theta.vals()[i]);

  // masked-input loss is finite with stage-1 weights
  auto masked = fbdiff::mask_sequence(*ptrs[0]);
  auto lat = fbdiff::encode_latent(stage2, masked.frames, &masked.known_mask);
  auto loss = fbdiff::mse(fbdiff::decode(stage2, lat.z), ptrs[0]->frames);
  EXPECT_TRUE(std::isfinite(loss.item()));

  // every stage-2 parameter is reachable from the inpainting loss
  fbdiff::Tape<float> tape;
  fbdiff::ParamList<float> params = stage2.params();
  fbdiff::detail::reset_and_watch(tape, params);
  auto lat2 = fbdiff::encode_latent(stage2, masked.frames, &masked.known_mask);
  auto loss2 = fbdiff::mse(fbdiff::decode(stage2, lat2.z), ptrs[0]->frames);
  tape.backward(loss2);
  for (size_t i = 0; i < params.size(); ++i) {
    double norm = 0;
    for (float g : tape.grad_or_zero(*params.tensors[i])) norm += std::abs(double(g));
    EXPECT_GT(norm, 0.0) << "parameter " << params.names[i] << " got no gradient";
  }

  // incompatible checkpoint: a stage-2 model with different widths
  VaeModel<float> wrong;
  wrong.cfg = tiny_cfg();
  wrong.cfg.channels = {8, 16};
  wrong.cfg.mask_channel = true;
  wrong.init(33);
  try {
    fbdiff::init_stage2_from_stage1(wrong, ck);
    FAIL() << "expected named mismatch";
  } catch (const fbdiff::Error& e) {
    EXPECT_NE(std::string(e.what()).find("enc0.sconv"), std::string::npos);
  }
}

TEST(InpaintInfer, ShapesAndDeterminism) {
  VaeModel<float> stage2;
  stage2.cfg = tiny_cfg();
  stage2.cfg.mask_channel = true;
  stage2.cfg.n_fb_ratio = 0.5;
  stage2.init(41);
  auto cases = tiny_cases(1, 8, 500);
  auto masked = fbdiff::mask_sequence(cases[0]);

  auto a = fbdiff::inpaint_infer(stage2, masked);
  auto b = fbdiff::inpaint_infer(stage2, masked);
  EXPECT_EQ(a.v_hat.frames.shape(), cases[0].frames.shape());
  EXPECT_EQ(a.bases.frequency_count(), stage2.cfg.n_fb_for(8));
  EXPECT_EQ(a.bases.frequency_count(), 4);
  for (int64_t i = 0; i < a.v_hat.frames.numel(); ++i)
    EXPECT_EQ(a.v_hat.frames.vals()[i], b.v_hat.frames.vals()[i]);
  for (int64_t i = 0; i < a.masked_latent.numel(); ++i)
    EXPECT_EQ(a.masked_latent.vals()[i], b.masked_latent.vals()[i]);
}

TEST(Variational, HeadTrainsWhenEnabled) {
  fbdiff::set_num_threads(1);
  auto cases = tiny_cases(2, 6, 700);
  std::vector<const Sequence*> ptrs{&cases[0], &cases[1]};
  VaeModel<float> model;
  model.cfg = tiny_cfg();
  model.cfg.variational = true;
  model.cfg.kl_weight = 1e-4;
  model.init(51);
  fbdiff::TrainConfig tc;
  tc.epochs = 1;
  EXPECT_NO_THROW(fbdiff::train_autoencoder(model, ptrs, tc, 9, false));
}

TEST(VaeCheckpoint, SaveLoadRoundTrip) {
  VaeModel<float> model;
  model.cfg = tiny_cfg();
  model.init(61);
  fbdiff::StageMetrics metrics{0.5, 0.1};
  const std::string path = "/tmp/fbdiff_test_vae_rt.fbck";
  fbdiff::save_vae_checkpoint(path, model, "vae_stage1", 7, metrics);
  auto loaded = fbdiff::load_vae_checkpoint(fbdiff::read_checkpoint(path));
  EXPECT_EQ(loaded.cfg.channels, model.cfg.channels);
  fbdiff::ParamList<float> pa = model.params();
  fbdiff::ParamList<float> pb = loaded.params();
  ASSERT_EQ(pa.size(), pb.size());
  for (size_t i = 0; i < pa.size(); ++i)
    for (int64_t j = 0; j < pa.tensors[i]->numel(); ++j)
      EXPECT_EQ(pa.tensors[i]->vals()[j], pb.tensors[i]->vals()[j]);
}
