#include <gtest/gtest.h>

#include <filesystem>

#include "maskflow/codec.hpp"
#include "maskflow/gradcheck.hpp"

using namespace maskflow;

namespace {

CodecConfig small_config() {
  CodecConfig c;
  c.width0 = 8;
  c.width1 = 8;
  return c;
}

Tensor random_images(std::int64_t n, std::uint64_t seed) {
  Rng rng(seed, 1);
  return Tensor::uniform({n, 32, 32, 3}, rng, -1.0, 1.0);
}

}  // namespace

TEST(PixelShuffle, DepthToSpaceInvertsSpaceToDepth) {
  Rng rng(3, 0);
  Tape tape;
  const auto x = tape.constant(Tensor::randn({2, 4, 6, 3}, rng));
  const auto packed = space_to_depth(x, 2);
  EXPECT_EQ(packed.shape(), (Shape{2, 2, 3, 12}));
  EXPECT_EQ(depth_to_space(packed, 2).value(), x.value());
  // The 2x2 block at the origin lands in the first cell in row-major order.
  EXPECT_EQ(packed.value()[3], x.value()[3]);
  EXPECT_EQ(packed.value()[6], x.value()[6 * 3]);
  EXPECT_THROW(space_to_depth(tape.constant(Tensor({1, 3, 4, 1})), 2), ShapeError);
}

TEST(Codec, LatentShape) {
  Codec codec;
  const auto z = codec.encode(random_images(1, 0).reshaped({32, 32, 3}));
  EXPECT_EQ(z.shape(), (Shape{8, 8, 16}));
  EXPECT_EQ(codec.encode(random_images(3, 0)).shape(), (Shape{3, 8, 8, 16}));
  const auto img = codec.decode(Tensor({8, 8, 16}, 0.5f));
  EXPECT_EQ(img.shape(), (Shape{32, 32, 3}));
  for (float v : img.data()) {
    EXPECT_GE(v, -1.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(Codec, OtherFactors) {
  for (int f : {1, 2, 8}) {
    CodecConfig c = small_config();
    c.factor = f;
    Codec codec(c);
    const auto z = codec.encode(random_images(2, 1));
    EXPECT_EQ(z.shape(), (Shape{2, 32 / f, 32 / f, 16})) << f;
    EXPECT_EQ(codec.decode(z).shape(), (Shape{2, 32, 32, 3})) << f;
  }
  CodecConfig bad;
  bad.factor = 3;
  EXPECT_THROW(Codec{bad}, std::invalid_argument);
}

TEST(Codec, EncodeIsDeterministic) {
  Codec codec(CodecConfig{}, 4);
  const auto x = random_images(2, 5);
  EXPECT_EQ(codec.encode(x), codec.encode(x));
}

TEST(Codec, RejectsBadShapes) {
  Codec codec;
  EXPECT_THROW(codec.encode(Tensor({1, 30, 32, 3})), ShapeError);
  EXPECT_THROW(codec.encode(Tensor({1, 32, 32, 1})), ShapeError);
  EXPECT_THROW(codec.decode(Tensor({8, 8, 4})), ShapeError);
  EXPECT_THROW(codec.decode(Tensor({1, 4, 4, 16})), ShapeError);
}

TEST(Codec, ZeroStepsKeepsInitialization) {
  Codec codec(small_config(), 9);
  const auto before = codec.params();
  CodecTrainOptions opt;
  opt.steps = 0;
  const auto log = train_codec(codec, generate_split(1, 0, 8), opt);
  EXPECT_TRUE(log.loss.empty());
  for (const auto& [name, p] : before) EXPECT_EQ(codec.params().at(name).value, p.value) << name;
}

TEST(Codec, TrainingReducesLossAndIsDeterministic) {
  const auto data = generate_split(2, 0, 32);
  CodecTrainOptions opt;
  opt.steps = 40;
  opt.batch = 8;
  opt.seed = 5;
  opt.calibration = 16;
  Codec a(small_config(), 1), b(small_config(), 1);
  const auto la = train_codec(a, data, opt);
  const auto lb = train_codec(b, data, opt);
  ASSERT_EQ(la.loss.size(), 40u);
  double head = 0, tail = 0;
  for (int i = 0; i < 5; ++i) {
    head += la.loss[static_cast<std::size_t>(i)];
    tail += la.loss[la.loss.size() - 1 - static_cast<std::size_t>(i)];
  }
  EXPECT_LT(tail, head);
  EXPECT_EQ(la.loss, lb.loss);
  for (const auto& [name, p] : a.params()) EXPECT_EQ(b.params().at(name).value, p.value) << name;
}

TEST(Codec, CalibrationStandardizesLatents) {
  Codec codec(small_config(), 2);
  const auto x = random_images(16, 3);
  codec.calibrate(x, 5);
  const auto z = codec.encode(x);
  const int d = 16;
  std::vector<double> s(d, 0.0), s2(d, 0.0);
  for (std::int64_t i = 0; i < z.numel(); ++i) {
    s[static_cast<std::size_t>(i % d)] += z[static_cast<std::size_t>(i)];
    s2[static_cast<std::size_t>(i % d)] += double(z[static_cast<std::size_t>(i)]) * z[static_cast<std::size_t>(i)];
  }
  const double n = static_cast<double>(z.numel() / d);
  for (int c = 0; c < d; ++c) {
    EXPECT_NEAR(s[static_cast<std::size_t>(c)] / n, 0.0, 1e-4);
    EXPECT_NEAR(s2[static_cast<std::size_t>(c)] / n, 1.0, 1e-3);
  }
}

TEST(Codec, CheckpointRoundTrip) {
  Codec codec(small_config(), 6);
  codec.calibrate(random_images(4, 1));
  const auto path = std::filesystem::temp_directory_path() / "maskflow_codec_rt.safetensors";
  save_codec(path, codec);
  Codec back = load_codec(path);
  EXPECT_EQ(back.config().width0, 8);
  const auto x = random_images(2, 8);
  EXPECT_EQ(back.encode(x), codec.encode(x));
  std::filesystem::remove(path);
}

TEST(Codec, DecoderGradientMatchesFiniteDifferences) {
  Codec codec(small_config(), 7);
  auto dcodec = codec.cast<double>();
  Rng rng(1, 2);
  const auto z = BasicTensor<double>::randn({1, 8, 8, 16}, rng);
  const double err = grad_check<double>(
      [&](const BasicVar<double>& v) { return mean(square(dcodec.decode_normalized(v.tape(), v, true))); }, z, 1e-5);
  EXPECT_LT(err, 1e-3);
  // Encoder and decoder parameters together.
  const auto x = random_images(1, 3).cast<double>();
  const double perr = grad_check_params<double>(
      [&](BasicTape<double>& tape) {
        const auto in = tape.constant(x);
        return mse_loss(dcodec.decode_raw(tape, dcodec.encode_raw(tape, in)), in);
      },
      dcodec.params(), 1e-5);
  EXPECT_LT(perr, 1e-3);
}

TEST(Codec, VariationalModeEncodesMean) {
  CodecConfig c = small_config();
  c.variational = true;
  c.kl_weight = 1e-3;
  Codec codec(c, 3);
  CodecTrainOptions opt;
  opt.steps = 3;
  opt.batch = 4;
  opt.calibration = 8;
  train_codec(codec, generate_split(4, 0, 8), opt);
  const auto x = random_images(2, 2);
  EXPECT_EQ(codec.encode(x).shape(), (Shape{2, 8, 8, 16}));
  EXPECT_EQ(codec.encode(x), codec.encode(x));
}
