#include <gtest/gtest.h>

#include <filesystem>

#include "maskflow/train.hpp"

using namespace maskflow;

namespace {

CodecConfig tiny_codec() {
  CodecConfig c;
  c.width0 = 8;
  c.width1 = 8;
  return c;
}

TrainConfig tiny_train() {
  TrainConfig c;
  c.steps = 6;
  c.batch = 4;
  c.model.dim = 16;
  c.model.depth = 1;
  c.model.heads = 2;
  c.model.grid = 8;
  c.model.channels = 16;
  c.model.cond_dim = 8;
  c.model.mlp_ratio = 2;
  c.model.time_freqs = 8;
  return c;
}

Image8 mask_from(int h, int w, const std::vector<int>& on) {
  Image8 m{h, w, 1, std::vector<std::uint8_t>(static_cast<std::size_t>(h * w), 0)};
  for (int i : on) m.pixels[static_cast<std::size_t>(i)] = 255;
  return m;
}

struct Fixture {
  Codec codec{tiny_codec(), 3};
  std::vector<Sample> samples = generate_split(9, 0, 12);
  LatentData data;
  Fixture() { data = encode_dataset(codec, samples); }
};

Fixture& fixture() {
  static Fixture f;
  return f;
}

}  // namespace

TEST(Metrics, HandCountedIou) {
  const auto a = mask_from(2, 4, {0, 1, 2, 3});
  EXPECT_DOUBLE_EQ(iou_counts(a, a).iou(), 1.0);
  const auto b = mask_from(2, 4, {4, 5, 6, 7});
  const auto c = iou_counts(a, b);
  EXPECT_EQ(c.intersection, 0);
  EXPECT_EQ(c.union_, 8);
  const auto r = summarize_iou({iou_counts(a, a), c});
  EXPECT_DOUBLE_EQ(r.miou, 0.5);
  EXPECT_DOUBLE_EQ(r.oiou, 4.0 / 12.0);
  EXPECT_DOUBLE_EQ(r.giou, r.miou);
  EXPECT_DOUBLE_EQ(r.ciou, r.oiou);
}

TEST(Metrics, TopHalfAgainstLeftHalf) {
  const auto top = mask_from(4, 4, {0, 1, 2, 3, 4, 5, 6, 7});
  const auto left = mask_from(4, 4, {0, 1, 4, 5, 8, 9, 12, 13});
  EXPECT_DOUBLE_EQ(iou_counts(top, left).iou(), 1.0 / 3.0);
}

TEST(Metrics, EmptyAgainstEmptyIsOne) {
  const auto e = mask_from(3, 3, {});
  EXPECT_DOUBLE_EQ(iou_counts(e, e).iou(), 1.0);
  EXPECT_THROW(iou_counts(e, mask_from(3, 4, {})), ShapeError);
  EXPECT_THROW(summarize_iou({}), std::invalid_argument);
}

TEST(Metrics, DuplicatingEverySampleLeavesMetricsUnchanged) {
  Rng rng(5, 0);
  std::vector<IouCounts> counts, doubled;
  for (int i = 0; i < 20; ++i) {
    std::vector<int> p, g;
    for (int k = 0; k < 64; ++k) {
      if (rng.bernoulli(0.3)) p.push_back(k);
      if (rng.bernoulli(0.4)) g.push_back(k);
    }
    const auto c = iou_counts(mask_from(8, 8, p), mask_from(8, 8, g));
    counts.push_back(c);
    doubled.push_back(c);
    doubled.push_back(c);
  }
  const auto a = summarize_iou(counts), b = summarize_iou(doubled);
  EXPECT_NEAR(a.miou, b.miou, 1e-12);
  EXPECT_NEAR(a.oiou, b.oiou, 1e-12);
}

TEST(Schedule, CosineEndpointsAndMidpoint) {
  EXPECT_DOUBLE_EQ(cosine_lr(0, 1000, 5e-5, 1e-5), 5e-5);
  EXPECT_NEAR(cosine_lr(1000, 1000, 5e-5, 1e-5), 1e-5, 1e-18);
  EXPECT_NEAR(cosine_lr(500, 1000, 5e-5, 1e-5), 3e-5, 1e-15);
  EXPECT_THROW(cosine_lr(1001, 1000, 5e-5, 1e-5), std::out_of_range);
  EXPECT_THROW(cosine_lr(-1, 1000, 5e-5, 1e-5), std::out_of_range);
  double prev = 1.0;
  for (int s = 0; s <= 100; ++s) {
    const double lr = cosine_lr(s, 100, 1.0, 0.1);
    EXPECT_LE(lr, prev);
    prev = lr;
  }
}

TEST(Schedule, CfgDropoutRate) {
  Rng rng(3, 0);
  const Condition c{{1, 2, 8}};
  int nulls = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) nulls += cfg_dropout(c, Task::generation, 0.1, rng).null;
  EXPECT_NEAR(static_cast<double>(nulls) / n, 0.1, 0.01);
  for (int i = 0; i < 1000; ++i) EXPECT_EQ(cfg_dropout(c, Task::segmentation, 1.0, rng), c);
  EXPECT_THROW(cfg_dropout(c, Task::generation, 1.5, rng), std::invalid_argument);
}

TEST(Schedule, MixedBatchCounts) {
  EXPECT_EQ(segmentation_count(32, 1, 1), 16);
  EXPECT_EQ(segmentation_count(32, 3, 1), 24);
  EXPECT_EQ(segmentation_count(32, 1, 0), 32);
  EXPECT_EQ(segmentation_count(32, 0, 1), 0);
  EXPECT_THROW(segmentation_count(32, 0, 0), std::invalid_argument);
  auto& f = fixture();
  TrainConfig cfg = tiny_train();
  cfg.batch = 8;
  cfg.ratio_seg = 3;
  const auto b = mixed_batch(f.data, cfg, 0);
  EXPECT_EQ(b.seg.size(), 6);
  EXPECT_EQ(b.gen.size(), 2);
  for (double t : b.seg.t) EXPECT_TRUE(t >= 0.0 && t <= 1.0);
  for (const auto& c : b.seg.cond) EXPECT_FALSE(c.null);
  EXPECT_EQ(b.seg.clean.shape(), (Shape{6, 8, 8, 16}));
}

TEST(Schedule, BatchesAreDeterministicPerStep) {
  auto& f = fixture();
  const auto cfg = tiny_train();
  const auto a = mixed_batch(f.data, cfg, 7), b = mixed_batch(f.data, cfg, 7), c = mixed_batch(f.data, cfg, 8);
  EXPECT_EQ(a.seg.index, b.seg.index);
  EXPECT_EQ(a.seg.t, b.seg.t);
  EXPECT_EQ(max_abs_diff(a.gen.x_t, b.gen.x_t), 0.0);
  EXPECT_NE(a.seg.t, c.seg.t);
}

TEST(Trainer, SegmentationLossDoesNotDependOnCfgDropout) {
  auto& f = fixture();
  TrainConfig cfg = tiny_train();
  Trainer tr(cfg, &f.codec);
  std::vector<double> seg;
  for (double p : {0.0, 0.5, 1.0}) {
    cfg.cfg_dropout = p;
    seg.push_back(tr.compute_loss(mixed_batch(f.data, cfg, 3), false).seg);
  }
  EXPECT_EQ(seg[0], seg[1]);
  EXPECT_EQ(seg[0], seg[2]);
}

TEST(Trainer, LossDecreasesAndRunsAllSupervisions) {
  auto& f = fixture();
  for (auto s : {Supervision::mse_latent, Supervision::bce_decoder, Supervision::bce_linear}) {
    TrainConfig cfg = tiny_train();
    cfg.supervision = s;
    cfg.steps = 30;
    cfg.ratio_gen = 0;
    cfg.lr_max = 3e-3;
    Trainer tr(cfg, &f.codec);
    const FlowBatch fixed = mixed_batch(f.data, cfg, 0);
    const double before = tr.compute_loss(fixed, false).total;
    tr.run(f.data);
    EXPECT_EQ(tr.step(), 30);
    EXPECT_LT(tr.compute_loss(fixed, false).total, before) << to_string(s);
  }
}

TEST(Trainer, ResumeIsBitExact) {
  auto& f = fixture();
  const auto path = std::filesystem::temp_directory_path() / "maskflow_resume_test.safetensors";
  TrainConfig cfg = tiny_train();
  cfg.supervision = Supervision::bce_linear;
  Trainer full(cfg, &f.codec);
  full.run(f.data);
  Trainer half(cfg, &f.codec);
  half.run(f.data, 3);
  half.save(path);
  Trainer resumed = Trainer::load(path, &f.codec);
  EXPECT_EQ(resumed.step(), 3);
  resumed.run(f.data);
  for (const auto& [name, p] : full.model().params()) EXPECT_EQ(max_abs_diff(p.value, resumed.model().params().at(name).value), 0.0) << name;
  ASSERT_EQ(full.losses().size(), resumed.losses().size());
  for (std::size_t i = 0; i < full.losses().size(); ++i) EXPECT_EQ(full.losses()[i].total, resumed.losses()[i].total);
  std::filesystem::remove(path);
  EXPECT_THROW(Trainer::load(path, &f.codec), IoError);
}

TEST(Trainer, NonFiniteLossAbortsWithStep) {
  auto& f = fixture();
  Trainer tr(tiny_train(), &f.codec);
  tr.model().params().at("final.out.w").value.fill(std::numeric_limits<float>::quiet_NaN());
  try {
    tr.train_step(f.data);
    FAIL() << "expected an exception";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("step 0"), std::string::npos);
  }
}

TEST(Trainer, ConfigRoundTripAndValidation) {
  TrainConfig c = tiny_train();
  c.supervision = Supervision::bce_decoder;
  c.a = 0.1;
  const auto back = train_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_EQ(fingerprint(to_json(back)), fingerprint(to_json(c)));
  auto j = to_json(c);
  j["bogus"] = 1;
  EXPECT_THROW(train_config_from_json(j), std::invalid_argument);
  j = to_json(c);
  j["a"] = 0.0;
  EXPECT_THROW(train_config_from_json(j), std::invalid_argument);
  const auto ref = train_config_from_json({{"lr_schedule", "reference"}});
  EXPECT_DOUBLE_EQ(ref.lr_max, 5e-5);
  EXPECT_DOUBLE_EQ(ref.lr_min, 1e-5);
}

// A model whose velocity maps the noise exactly onto the ground-truth mask latent scores mIoU 1.
TEST(Evaluation, ExactVelocityGivesPerfectScore) {
  auto& f = fixture();
  TrainConfig cfg = tiny_train();
  cfg.supervision = Supervision::bce_linear;
  Trainer tr(cfg, &f.codec);
  // A linear head reading channel 0 and a mask latent whose channel 0 is +-1 per cell.
  auto& ps = tr.model().params();
  ps.at("head.lin.w").value = Tensor::zeros({16, 16});
  for (int k = 0; k < 16; ++k) ps.at("head.lin.w").value[static_cast<std::size_t>(k)] = 1.0f;
  ps.at("head.lin.b").value.fill(0.0f);
  std::vector<Image8> masks;
  Tensor lat({2, 8, 8, 16});
  for (int i = 0; i < 2; ++i) {
    Image8 m{32, 32, 1, std::vector<std::uint8_t>(32 * 32, 0)};
    for (int cy = 0; cy < 8; ++cy)
      for (int cx = 0; cx < 8; ++cx) {
        const bool on = (cx + cy + i) % 3 == 0;
        lat[static_cast<std::size_t>(((i * 8 + cy) * 8 + cx) * 16)] = on ? 1.0f : -1.0f;
        for (int y = 0; y < 4; ++y)
          for (int x = 0; x < 4; ++x) m.pixels[static_cast<std::size_t>((cy * 4 + y) * 32 + cx * 4 + x)] = on ? 255 : 0;
      }
    masks.push_back(m);
  }
  const auto preds = tr.latents_to_masks(lat);
  std::vector<IouCounts> counts;
  for (int i = 0; i < 2; ++i) counts.push_back(iou_counts(preds[static_cast<std::size_t>(i)], masks[static_cast<std::size_t>(i)]));
  EXPECT_DOUBLE_EQ(summarize_iou(counts).miou, 1.0);
  const Tensor eps = segmentation_noise(lat.shape());
  Tensor v(lat.shape());
  for (std::int64_t k = 0; k < v.numel(); ++k) v[static_cast<std::size_t>(k)] = lat[static_cast<std::size_t>(k)] - eps[static_cast<std::size_t>(k)];
  const Tensor x = one_step_segment([&](const Tensor&, double) { return v; }, eps);
  EXPECT_LT(max_abs_diff(x, lat), 1e-6);
}

TEST(Evaluation, ReportIsDeterministicAndChunkIndependent) {
  auto& f = fixture();
  Trainer tr(tiny_train(), &f.codec);
  tr.run(f.data, 2);
  const auto a = evaluate_segmentation(tr, f.data, 0, 64);
  const auto b = evaluate_segmentation(tr, f.data, 0, 5);
  EXPECT_EQ(a.ious, b.ious);
  EXPECT_EQ(a.count, 12);
  EXPECT_FALSE(a.config_fingerprint.empty());
  EXPECT_GE(a.miou, 0.0);
  EXPECT_LE(a.miou, 1.0);
}

TEST(Ablation, ArmsDifferInOneFactor) {
  const auto arms = ablation_arms(tiny_train());
  ASSERT_EQ(arms.size(), 7u);
  const auto base = to_json(arms[0].config);
  for (std::size_t i = 1; i < arms.size(); ++i) {
    auto j = to_json(arms[i].config);
    int diff = 0;
    for (const auto& [k, v] : base.items()) diff += j[k] != v;
    EXPECT_EQ(diff, 1) << arms[i].name;
  }
  EXPECT_EQ(ablation_arms(tiny_train(), {"a=0.5", "shortcut=off"}).size(), 2u);
}

TEST(Ablation, CsvHasDeltaAgainstBase) {
  auto& f = fixture();
  TrainConfig cfg = tiny_train();
  cfg.steps = 2;
  const auto results = run_ablation(ablation_arms(cfg, {"base", "shortcut=off"}), f.codec, f.data, f.data);
  const auto csv = ablation_csv(results);
  EXPECT_EQ(csv.rfind("arm,factor,a,supervision,mix,shortcut,miou,oiou,delta_miou\n", 0), 0u);
  EXPECT_NE(csv.find("base,,0.05,mse,1:1,on,"), std::string::npos);
  EXPECT_NE(csv.find("0.000000\n"), std::string::npos);
}
