#include <gtest/gtest.h>

#include <filesystem>
#include <numbers>

#include "maskflow/dataset.hpp"

using namespace maskflow;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("maskflow_ds_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) { return detail::read_file(p); }

}  // namespace

TEST(GenerateScene, IsDeterministic) {
  for (int id : {0, 1, 17, 999}) EXPECT_EQ(generate_scene(42, id), generate_scene(42, id));
  EXPECT_FALSE(generate_scene(42, 3) == generate_scene(43, 3));
}

TEST(GenerateScene, SceneInvariantsHold) {
  const DataConfig cfg;
  for (int id = 0; id < 300; ++id) {
    const Sample s = generate_scene(7, id, cfg);
    const auto& shapes = s.scene.shapes;
    ASSERT_GE(shapes.size(), 1u);
    ASSERT_LE(shapes.size(), 3u);
    for (std::size_t i = 0; i < shapes.size(); ++i) {
      const auto& a = shapes[i];
      EXPECT_GE(a.cx - a.radius, 0.0);
      EXPECT_LE(a.cx + a.radius, cfg.width);
      EXPECT_GE(a.cy - a.radius, 0.0);
      EXPECT_LE(a.cy + a.radius, cfg.height);
      for (std::size_t j = i + 1; j < shapes.size(); ++j) {
        const auto& b = shapes[j];
        EXPECT_FALSE(a.color == b.color && a.kind == b.kind);
        EXPECT_GE(std::hypot(a.cx - b.cx, a.cy - b.cy), 0.8 * (a.radius + b.radius) - 1e-12);
      }
    }
    // Exactly one shape matches the query.
    int matches = 0;
    for (const auto& sh : shapes) matches += color_token(sh.color) == s.query_tokens[1] && kind_token(sh.kind) == s.query_tokens[2];
    EXPECT_EQ(matches, 1);
    EXPECT_EQ(s.query_tokens[0], vocab::kSeg);
    EXPECT_EQ(s.caption_tokens.size(), 2 * shapes.size());
    for (int t : s.query_tokens) EXPECT_LT(t, vocab::kSize);
    for (int t : s.caption_tokens) EXPECT_LT(t, vocab::kSize);
    // Mask is binary and equals the target's rasterization.
    for (auto v : s.mask.pixels) ASSERT_TRUE(v == 0 || v == 255);
    EXPECT_EQ(s.mask, rasterize(shapes[static_cast<std::size_t>(s.target)], cfg.height, cfg.width));
  }
}

TEST(GenerateScene, SingleShapeMaskArea) {
  DataConfig cfg;
  cfg.min_shapes = cfg.max_shapes = 1;
  for (int id = 0; id < 200; ++id) {
    const auto area = mask_area(generate_scene(5, id, cfg).mask);
    EXPECT_GE(area, 4);
    EXPECT_LE(area, cfg.height * cfg.width / 2);
  }
}

TEST(Rasterize, CircleAreaMatchesAnalytic) {
  ShapeSpec c{ShapeKind::circle, ShapeColor::red, 16, 16, 6};
  const double area = static_cast<double>(mask_area(rasterize(c, 32, 32)));
  EXPECT_NEAR(area, std::numbers::pi * 36, 0.1 * std::numbers::pi * 36);
}

TEST(MaskRgb, RoundTrips) {
  Image8 zero{4, 4, 1, std::vector<std::uint8_t>(16, 0)};
  const Image8 black = mask_to_rgb(zero);
  for (auto v : black.pixels) EXPECT_EQ(v, 0);
  EXPECT_EQ(rgb_to_mask(black), zero);

  Image8 one = zero;
  one.at(2, 1) = 255;
  const Image8 rgb = mask_to_rgb(one);
  for (int c = 0; c < 3; ++c) EXPECT_EQ(rgb.at(2, 1, c), 255);
  EXPECT_EQ(rgb.at(0, 0, 0), 0);
  EXPECT_EQ(rgb_to_mask(rgb), one);

  for (int id = 0; id < 20; ++id) {
    const auto m = generate_scene(3, id).mask;
    EXPECT_EQ(rgb_to_mask(mask_to_rgb(m)), m);
  }
}

TEST(MaskRgb, ThresholdInModelSpace) {
  Tensor gray({1, 1, 3}, 0.2f);
  EXPECT_EQ(rgb_to_mask(gray, 0.0f).pixels[0], 255);
  Tensor dark({1, 1, 3}, -0.2f);
  EXPECT_EQ(rgb_to_mask(dark, 0.0f).pixels[0], 0);
}

TEST(ModelSpace, ByteMapping) {
  Image8 img{1, 2, 1, {0, 255}};
  const Tensor t = to_model_space(img);
  EXPECT_FLOAT_EQ(t[0], -1.0f);
  EXPECT_FLOAT_EQ(t[1], 1.0f);
  EXPECT_EQ(from_model_space(t), img);
}

TEST(BuildDataset, EmptyTrainSplit) {
  const auto dir = scratch("empty");
  const auto m = build_dataset(0, 3, 1, dir);
  EXPECT_TRUE(m.split("train").empty());
  EXPECT_EQ(m.split("val").size(), 3u);
  const auto back = load_manifest(dir);
  EXPECT_TRUE(back.split("train").empty());
  fs::remove_all(dir);
}

TEST(BuildDataset, CountsFilesAndIsReproducible) {
  const auto a = scratch("a"), b = scratch("b");
  build_dataset(20, 5, 99, a);
  build_dataset(20, 5, 99, b);
  int pngs = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (e.path().extension() != ".png") continue;
    ++pngs;
    const auto rel = fs::relative(e.path(), a);
    EXPECT_EQ(slurp(e.path()), slurp(b / rel)) << rel;
  }
  EXPECT_EQ(pngs, 2 * (20 + 5));
  EXPECT_EQ(slurp(a / "manifest.json"), slurp(b / "manifest.json"));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(BuildDataset, SplitsAreDisjoint) {
  const auto dir = scratch("disjoint");
  const auto m = build_dataset(10, 10, 4, dir);
  std::set<std::int64_t> ids;
  for (const auto& [_, recs] : m.splits)
    for (const auto& r : recs) EXPECT_TRUE(ids.insert(r.id).second);
  fs::remove_all(dir);
}

TEST(LoadSample, RoundTripsGeneratedScene) {
  const auto dir = scratch("load");
  build_dataset(4, 2, 11, dir);
  const auto m = load_manifest(dir);
  EXPECT_EQ(load_sample(m, "train", 0), generate_scene(11, 0));
  EXPECT_EQ(load_sample(m, "val", 1), generate_scene(11, 5));
  for (auto v : load_sample(m, "val", 0).mask.pixels) EXPECT_TRUE(v == 0 || v == 255);
  try {
    load_sample(m, "val", 2);
    FAIL() << "expected out_of_range";
  } catch (const std::out_of_range& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("val"), std::string::npos);
    EXPECT_NE(msg.find("2"), std::string::npos);
  }
  fs::remove_all(dir);
}

TEST(LoadSample, DetectsCorruptMask) {
  const auto dir = scratch("corrupt");
  build_dataset(1, 0, 12, dir);
  const auto m = load_manifest(dir);
  Image8 bad = load_sample(m, "train", 0).mask;
  bad.pixels[0] = 128;
  write_png(dir / m.split("train")[0].mask, bad);
  EXPECT_THROW(load_sample(m, "train", 0), IoError);
  fs::remove_all(dir);
}
