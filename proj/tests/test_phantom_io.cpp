#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "fbdiff/checkpoint.hpp"
#include "fbdiff/io.hpp"
#include "fbdiff/phantom.hpp"

using fbdiff::PhantomParams;
using fbdiff::Rng;
using fbdiff::Sequence;
using fbdiff::Tensor;
namespace fs = std::filesystem;

namespace {
fs::path tmpdir() {
  auto d = fs::temp_directory_path() / "fbdiff_io_test";
  fs::create_directories(d);
  return d;
}
}  // namespace

TEST(Phantom, StaticWhenAmplitudeZero) {
  PhantomParams p;
  p.amplitude = 0.0;
  p.noise_sigma = 0.0;
  auto seq = fbdiff::generate_phantom(5, p, 8, 32, 32);
  const int64_t fsz = seq.frames.numel() / 8;
  for (int64_t n = 1; n < 8; ++n)
    for (int64_t i = 0; i < fsz; ++i)
      EXPECT_EQ(seq.frames.vals()[n * fsz + i], seq.frames.vals()[i]);
}

TEST(Phantom, QuarterSineMonotoneGrowth) {
  // with no phase wobble and no noise, a quarter-sine covers a strictly
  // growing radius; the rendered area estimate must grow strictly too
  PhantomParams p;
  p.nonlinearity = 0.0;
  p.noise_sigma = 0.0;
  p.period_fraction = 0.25;
  p.amplitude = 5.0;
  for (uint64_t seed : {1ull, 9ull, 77ull}) {
    auto seq = fbdiff::generate_phantom(seed, p, 12, 32, 32);
    const int64_t fsz = seq.frames.numel() / 12;
    double prev_area = -1.0, prev_mass = -1.0;
    for (int64_t n = 0; n < 12; ++n) {
      double mass = 0.0;
      int64_t area = 0;
      for (int64_t i = 0; i < fsz; ++i) {
        const float v = seq.frames.vals()[n * fsz + i];
        mass += v;
        if (v > 0.5f) ++area;
      }
      if (n) {
        EXPECT_GT(mass, prev_mass) << "frame " << n << " seed " << seed;
        EXPECT_GE(area, prev_area) << "frame " << n << " seed " << seed;
      }
      prev_mass = mass;
      prev_area = double(area);
    }
  }
}

TEST(Phantom, DeterministicAcrossRuns) {
  PhantomParams p;
  auto a = fbdiff::generate_phantom(42, p, 12, 32, 32);
  auto b = fbdiff::generate_phantom(42, p, 12, 32, 32);
  for (int64_t i = 0; i < a.frames.numel(); ++i)
    EXPECT_EQ(a.frames.vals()[i], b.frames.vals()[i]);
}

TEST(Phantom, InvalidParamsRejected) {
  PhantomParams p;
  p.amplitude = p.base_radius + 1;
  EXPECT_THROW(fbdiff::generate_phantom(1, p, 8, 32, 32), fbdiff::Error);
  PhantomParams q;
  q.base_radius = 20.0;  // ellipse cannot fit a 32px frame
  EXPECT_THROW(fbdiff::generate_phantom(1, q, 8, 32, 32), fbdiff::Error);
  PhantomParams r;
  r.noise_sigma = 0.5;
  EXPECT_THROW(fbdiff::generate_phantom(1, r, 8, 32, 32), fbdiff::Error);
}

TEST(Dataset, RangeAndForegroundFraction) {
  fbdiff::DatasetSpec spec;
  spec.cases_train = 12;
  spec.cases_val = 3;
  spec.cases_test = 3;
  auto cases = fbdiff::make_dataset(123, spec);
  ASSERT_EQ(cases.size(), 18u);
  for (const auto& c : cases) {
    const int64_t N = c.seq.frame_count();
    EXPECT_GE(N, 6);
    EXPECT_LE(N, 16);
    const int64_t fsz = c.seq.frames.numel() / N;
    for (int64_t n = 0; n < N; ++n) {
      int64_t fg = 0;
      for (int64_t i = 0; i < fsz; ++i) {
        const float v = c.seq.frames.vals()[n * fsz + i];
        EXPECT_GE(v, 0.0f);
        EXPECT_LE(v, 1.0f);
        if (v > 0.5f) ++fg;
      }
      const double frac = double(fg) / double(fsz);
      EXPECT_GE(frac, 0.02) << c.seq.case_id << " frame " << n;
      EXPECT_LE(frac, 0.60) << c.seq.case_id << " frame " << n;
    }
  }
  // split proportions by case index
  EXPECT_EQ(cases[0].split, "train");
  EXPECT_EQ(cases[11].split, "train");
  EXPECT_EQ(cases[12].split, "val");
  EXPECT_EQ(cases[15].split, "test");
}

TEST(MaskSequence, EndpointsKeptInteriorZeroed) {
  Rng rng(3);
  Tensor<float> frames({3, 1, 4, 4});
  frames.fill_uniform(rng, 0.1f, 0.9f);
  Sequence seq{frames, "t"};
  auto masked = fbdiff::mask_sequence(seq);
  // N=3: exactly frame 1 zeroed
  for (int64_t i = 0; i < 16; ++i) {
    EXPECT_EQ(masked.frames.vals()[i], frames.vals()[i]);
    EXPECT_EQ(masked.frames.vals()[16 + i], 0.0f);
    EXPECT_EQ(masked.frames.vals()[32 + i], frames.vals()[32 + i]);
  }
  EXPECT_EQ(masked.known_mask, (std::vector<float>{1, 0, 1}));

  // idempotent
  auto twice = fbdiff::mask_sequence(Sequence{masked.frames, "t"});
  for (int64_t i = 0; i < masked.frames.numel(); ++i)
    EXPECT_EQ(twice.frames.vals()[i], masked.frames.vals()[i]);

  Tensor<float> two({2, 1, 4, 4});
  EXPECT_THROW(fbdiff::mask_sequence(Sequence{two, "x"}), fbdiff::Error);
}

TEST(MaskSequence, UnmaskedFramesBitIdentical) {
  Rng rng(11);
  Tensor<float> frames({12, 1, 8, 8});
  frames.fill_uniform(rng, 0.0f, 1.0f);
  auto masked = fbdiff::mask_sequence(Sequence{frames, "c"});
  const int64_t fsz = 64;
  for (int64_t i = 0; i < fsz; ++i) {
    EXPECT_EQ(masked.frames.vals()[i], frames.vals()[i]);
    EXPECT_EQ(masked.frames.vals()[11 * fsz + i], frames.vals()[11 * fsz + i]);
  }
  double interior = 0;
  for (int64_t n = 1; n < 11; ++n)
    for (int64_t i = 0; i < fsz; ++i) interior += std::abs(masked.frames.vals()[n * fsz + i]);
  EXPECT_EQ(interior, 0.0);
}

TEST(Fbsq, RoundTripBitExact) {
  Rng rng(9);
  Tensor<float> frames({7, 1, 6, 5});
  frames.fill_gaussian(rng);
  const auto path = (tmpdir() / "roundtrip.fbsq").string();
  fbdiff::write_fbsq(path, frames);
  auto back = fbdiff::read_fbsq(path);
  ASSERT_EQ(back.shape(), frames.shape());
  for (int64_t i = 0; i < frames.numel(); ++i)
    EXPECT_EQ(back.vals()[i], frames.vals()[i]);
}

TEST(Fbsq, StructuredErrors) {
  const auto dir = tmpdir();
  {
    std::ofstream f(dir / "badmagic.fbsq", std::ios::binary);
    f << "XXXX";
    std::string rest(28, '\0');
    f.write(rest.data(), rest.size());
  }
  try {
    fbdiff::read_fbsq((dir / "badmagic.fbsq").string());
    FAIL() << "expected BadMagic";
  } catch (const fbdiff::Error& e) {
    EXPECT_EQ(e.code(), fbdiff::ErrorCode::BadMagic);
    EXPECT_EQ(e.offset(), 0);
  }

  {
    // header declares a huge payload; file ends early
    Tensor<float> t({1, 1, 2, 2});
    fbdiff::write_fbsq((dir / "trunc.fbsq").string(), t);
    std::fstream f(dir / "trunc.fbsq", std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(8);
    const uint32_t big = 1000;
    f.write(reinterpret_cast<const char*>(&big), 4);  // N = 1000
    const uint32_t huge = 4096;
    f.seekp(16);
    f.write(reinterpret_cast<const char*>(&huge), 4);  // H = 4096
    f.write(reinterpret_cast<const char*>(&huge), 4);  // W = 4096
  }
  try {
    fbdiff::read_fbsq((dir / "trunc.fbsq").string());
    FAIL() << "expected TruncatedPayload";
  } catch (const fbdiff::Error& e) {
    EXPECT_EQ(e.code(), fbdiff::ErrorCode::TruncatedPayload);
  }

  EXPECT_THROW(fbdiff::read_fbsq((dir / "missing.fbsq").string()), fbdiff::Error);
}

TEST(Pgm, ValidP5Output) {
  std::vector<float> img = {0.0f, 0.5f, 1.0f, 0.25f, 0.75f, 1.5f};
  const auto path = (tmpdir() / "map.pgm").string();
  fbdiff::write_pgm(path, img, 2, 3);
  std::ifstream in(path, std::ios::binary);
  std::string magic, dims;
  std::getline(in, magic);
  EXPECT_EQ(magic, "P5");
  int w, h, maxval;
  in >> w >> h >> maxval;
  EXPECT_EQ(w, 3);
  EXPECT_EQ(h, 2);
  EXPECT_EQ(maxval, 255);
  in.get();  // single whitespace after maxval
  std::string payload(6, '\0');
  in.read(payload.data(), 6);
  EXPECT_TRUE(in.good());
  EXPECT_EQ(static_cast<unsigned char>(payload[0]), 0);
  EXPECT_EQ(static_cast<unsigned char>(payload[2]), 255);
  EXPECT_EQ(static_cast<unsigned char>(payload[5]), 255);  // clamped
}

TEST(Manifest, RoundTrip) {
  const auto path = (tmpdir() / "manifest.json").string();
  std::vector<fbdiff::ManifestEntry> entries = {{"case_0000", "cases/case_0000.fbsq", "train"},
                                                {"case_0001", "cases/case_0001.fbsq", "test"}};
  fbdiff::write_manifest(path, entries);
  auto back = fbdiff::read_manifest(path);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].case_id, "case_0001");
  EXPECT_EQ(back[1].split, "test");
}

TEST(Checkpoint, ByteExactRoundTrip) {
  Rng rng(13);
  Tensor<float> a({3, 4}), b({2, 2, 3, 3});
  a.fill_gaussian(rng);
  b.fill_gaussian(rng);
  fbdiff::ParamList<float> params;
  params.add("layer.w", &a);
  params.add("layer.k", &b);
  nlohmann::json cfg{{"kind", "test"}, {"value", 3}};

  const auto p1 = (tmpdir() / "ck1.fbck").string();
  fbdiff::write_checkpoint(p1, cfg, params);
  auto ck = fbdiff::read_checkpoint(p1);
  EXPECT_EQ(ck.config.at("value").get<int>(), 3);
  ASSERT_EQ(ck.names.size(), 2u);

  // write what was read; the files must match byte for byte
  fbdiff::ParamList<float> params2;
  params2.add(ck.names[0], &ck.tensors[0]);
  params2.add(ck.names[1], &ck.tensors[1]);
  const auto p2 = (tmpdir() / "ck2.fbck").string();
  fbdiff::write_checkpoint(p2, ck.config, params2);
  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  EXPECT_EQ(s1, s2);
}

TEST(Checkpoint, StructuredErrors) {
  const auto dir = tmpdir();
  {
    std::ofstream f(dir / "bad.fbck", std::ios::binary);
    f << "NOPE";
  }
  try {
    fbdiff::read_checkpoint((dir / "bad.fbck").string());
    FAIL();
  } catch (const fbdiff::Error& e) {
    EXPECT_TRUE(e.code() == fbdiff::ErrorCode::BadMagic ||
                e.code() == fbdiff::ErrorCode::TruncatedPayload);
  }

  // valid header, truncated tensor payload
  Tensor<float> t({64});
  fbdiff::ParamList<float> params;
  params.add("t", &t);
  const auto path = (dir / "cut.fbck").string();
  fbdiff::write_checkpoint(path, nlohmann::json::object(), params);
  fs::resize_file(path, fs::file_size(path) - 32);
  try {
    fbdiff::read_checkpoint(path);
    FAIL();
  } catch (const fbdiff::Error& e) {
    EXPECT_EQ(e.code(), fbdiff::ErrorCode::TruncatedPayload);
  }

  // mismatched shape on load
  auto ck = [&] {
    Tensor<float> good({4});
    fbdiff::ParamList<float> p;
    p.add("w", &good);
    const auto path2 = (dir / "shape.fbck").string();
    fbdiff::write_checkpoint(path2, nlohmann::json::object(), p);
    return fbdiff::read_checkpoint(path2);
  }();
  Tensor<float> wrong({5});
  fbdiff::ParamList<float> p2;
  p2.add("w", &wrong);
  try {
    fbdiff::load_params(ck, p2);
    FAIL();
  } catch (const fbdiff::Error& e) {
    EXPECT_NE(std::string(e.what()).find("\"w\""), std::string::npos);
  }
}
