#pragma once

// Synthetic shapes corpus with referring-style queries.
//
// Token vocabulary (32 ids): 0 pad, 1 [SEG], 2..7 colors, 8..10 kinds,
// the rest reserved. A query is [SEG, color, kind]; a caption lists every
// (color, kind) pair of the scene in drawing order.

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "maskflow/png_io.hpp"
#include "maskflow/rng.hpp"
#include "maskflow/tensor.hpp"

namespace maskflow {

namespace vocab {
inline constexpr int kSize = 32;
inline constexpr int kPad = 0;
inline constexpr int kSeg = 1;
inline constexpr int kColorBase = 2;
inline constexpr int kKindBase = 8;
}  // namespace vocab

enum class ShapeKind { circle = 0, square = 1, triangle = 2 };
enum class ShapeColor { red = 0, green = 1, blue = 2, yellow = 3, magenta = 4, cyan = 5 };

inline constexpr int kNumKinds = 3;
inline constexpr int kNumColors = 6;

inline constexpr std::array<std::array<std::uint8_t, 3>, kNumColors> kPalette{{
    {230, 40, 40},    // red
    {40, 190, 60},    // green
    {50, 80, 235},    // blue
    {235, 215, 40},   // yellow
    {220, 50, 210},   // magenta
    {40, 215, 225},   // cyan
}};

inline const char* to_string(ShapeKind k) {
  static constexpr const char* names[] = {"circle", "square", "triangle"};
  return names[static_cast<int>(k)];
}
inline const char* to_string(ShapeColor c) {
  static constexpr const char* names[] = {"red", "green", "blue", "yellow", "magenta", "cyan"};
  return names[static_cast<int>(c)];
}

struct ShapeSpec {
  ShapeKind kind = ShapeKind::circle;
  ShapeColor color = ShapeColor::red;
  double cx = 0, cy = 0;  // pixel coordinates of the center
  double radius = 0;      // circumradius in pixels
};

struct DataConfig {
  int height = 32;
  int width = 32;
  int min_shapes = 1;
  int max_shapes = 3;
  double min_radius = 4.0;
  double max_radius = 8.0;
  int min_gray = 60;
  int max_gray = 160;
};

struct SceneSpec {
  int height = 32;
  int width = 32;
  int background = 100;
  std::vector<ShapeSpec> shapes;
};

struct Sample {
  std::int64_t record_id = 0;
  Image8 image;  // H x W x 3
  Image8 mask;   // H x W x 1, values in {0, 255}
  std::vector<int> query_tokens;
  std::vector<int> caption_tokens;
  int target = 0;
  SceneSpec scene;

  friend bool operator==(const Sample& a, const Sample& b) {
    return a.record_id == b.record_id && a.image == b.image && a.mask == b.mask && a.query_tokens == b.query_tokens &&
           a.caption_tokens == b.caption_tokens && a.target == b.target;
  }
};

inline int color_token(ShapeColor c) { return vocab::kColorBase + static_cast<int>(c); }
inline int kind_token(ShapeKind k) { return vocab::kKindBase + static_cast<int>(k); }

// Pixel (x, y) is covered when its center lies inside the shape. No anti-aliasing.
inline bool covers(const ShapeSpec& s, int x, int y) {
  const double px = x + 0.5 - s.cx, py = y + 0.5 - s.cy;
  switch (s.kind) {
    case ShapeKind::circle:
      return px * px + py * py <= s.radius * s.radius;
    case ShapeKind::square: {
      const double h = s.radius * 0.8;
      return std::abs(px) <= h && std::abs(py) <= h;
    }
    case ShapeKind::triangle: {
      // Upright equilateral triangle with the given circumradius.
      const double r = s.radius;
      const double ax = 0, ay = -r;
      const double bx = r * std::sqrt(3.0) / 2, by = r / 2;
      const double cx = -bx, cy = r / 2;
      auto edge = [&](double x0, double y0, double x1, double y1) { return (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0); };
      const double e0 = edge(ax, ay, bx, by), e1 = edge(bx, by, cx, cy), e2 = edge(cx, cy, ax, ay);
      return (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0);
    }
  }
  return false;
}

inline Image8 rasterize(const ShapeSpec& s, int height, int width) {
  Image8 m{height, width, 1, std::vector<std::uint8_t>(static_cast<std::size_t>(height * width), 0)};
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      if (covers(s, x, y)) m.at(y, x) = 255;
  return m;
}

inline std::int64_t mask_area(const Image8& mask) {
  return std::count_if(mask.pixels.begin(), mask.pixels.end(), [](std::uint8_t v) { return v != 0; });
}

namespace detail {

inline bool place_shapes(SceneSpec& scene, int count, const DataConfig& cfg, Rng& rng) {
  // Distinct (color, kind) pairs, drawn without replacement.
  std::vector<int> pairs(kNumColors * kNumKinds);
  std::iota(pairs.begin(), pairs.end(), 0);
  for (int i = 0; i < count; ++i) std::swap(pairs[static_cast<std::size_t>(i)], pairs[static_cast<std::size_t>(i + static_cast<int>(rng.below(pairs.size() - i)))]);
  for (int i = 0; i < count; ++i) {
    ShapeSpec s;
    s.color = static_cast<ShapeColor>(pairs[static_cast<std::size_t>(i)] / kNumKinds);
    s.kind = static_cast<ShapeKind>(pairs[static_cast<std::size_t>(i)] % kNumKinds);
    bool placed = false;
    for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
      s.radius = rng.uniform(cfg.min_radius, cfg.max_radius);
      s.cx = rng.uniform(s.radius, cfg.width - s.radius);
      s.cy = rng.uniform(s.radius, cfg.height - s.radius);
      placed = std::all_of(scene.shapes.begin(), scene.shapes.end(), [&](const ShapeSpec& o) {
        return std::hypot(o.cx - s.cx, o.cy - s.cy) >= 0.8 * (o.radius + s.radius);
      });
    }
    if (!placed) return false;
    scene.shapes.push_back(s);
  }
  return true;
}

}  // namespace detail

// Deterministic in (seed, record_id, cfg). The target is drawn last so its
// mask is fully visible in the image.
inline Sample generate_scene(std::uint64_t seed, std::int64_t record_id, const DataConfig& cfg = {}) {
  if (cfg.min_shapes < 1 || cfg.max_shapes < cfg.min_shapes || cfg.max_shapes > kNumColors * kNumKinds)
    throw std::invalid_argument("generate_scene: invalid shape count range");
  if (2 * cfg.max_radius > std::min(cfg.height, cfg.width)) throw std::invalid_argument("generate_scene: radius too large for canvas");
  for (std::uint64_t sub = 0;; ++sub) {
    Rng rng(seed, derive_stream(static_cast<std::uint64_t>(record_id), sub));
    SceneSpec scene;
    scene.height = cfg.height;
    scene.width = cfg.width;
    scene.background = cfg.min_gray + static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.max_gray - cfg.min_gray + 1)));
    const int count = cfg.min_shapes + static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.max_shapes - cfg.min_shapes + 1)));
    if (!detail::place_shapes(scene, count, cfg, rng)) continue;

    Sample s;
    s.record_id = record_id;
    s.target = static_cast<int>(rng.below(static_cast<std::uint64_t>(count)));
    s.scene = scene;
    std::vector<int> order;
    for (int i = 0; i < count; ++i)
      if (i != s.target) order.push_back(i);
    order.push_back(s.target);

    s.image = Image8{cfg.height, cfg.width, 3, std::vector<std::uint8_t>(static_cast<std::size_t>(cfg.height * cfg.width * 3), static_cast<std::uint8_t>(scene.background))};
    for (int i : order) {
      const auto& sh = scene.shapes[static_cast<std::size_t>(i)];
      const auto& rgb = kPalette[static_cast<std::size_t>(sh.color)];
      for (int y = 0; y < cfg.height; ++y)
        for (int x = 0; x < cfg.width; ++x)
          if (covers(sh, x, y))
            for (int c = 0; c < 3; ++c) s.image.at(y, x, c) = rgb[static_cast<std::size_t>(c)];
    }
    const auto& tgt = scene.shapes[static_cast<std::size_t>(s.target)];
    s.mask = rasterize(tgt, cfg.height, cfg.width);
    s.query_tokens = {vocab::kSeg, color_token(tgt.color), kind_token(tgt.kind)};
    for (const auto& sh : scene.shapes) {
      s.caption_tokens.push_back(color_token(sh.color));
      s.caption_tokens.push_back(kind_token(sh.kind));
    }
    if (mask_area(s.mask) == 0) continue;
    return s;
  }
}

// Mask as a black/white RGB image.
inline Image8 mask_to_rgb(const Image8& mask) {
  Image8 out{mask.height, mask.width, 3, std::vector<std::uint8_t>(mask.pixels.size() * 3)};
  for (std::size_t i = 0; i < mask.pixels.size(); ++i) {
    const std::uint8_t v = mask.pixels[i] ? 255 : 0;
    out.pixels[3 * i] = out.pixels[3 * i + 1] = out.pixels[3 * i + 2] = v;
  }
  return out;
}

// Byte b maps to b / 127.5 - 1.
inline Tensor to_model_space(const Image8& img) {
  Tensor t({img.height, img.width, img.channels});
  for (std::size_t i = 0; i < img.pixels.size(); ++i) t[i] = static_cast<float>(img.pixels[i] / 127.5 - 1.0);
  return t;
}

inline Image8 from_model_space(const Tensor& t) {
  if (t.ndim() != 3) throw ShapeError("from_model_space expects H x W x C, got " + to_string(t.shape()));
  Image8 img{static_cast<int>(t.dim(0)), static_cast<int>(t.dim(1)), static_cast<int>(t.dim(2)), std::vector<std::uint8_t>(static_cast<std::size_t>(t.numel()))};
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    const double v = std::clamp((static_cast<double>(t[i]) + 1.0) * 127.5, 0.0, 255.0);
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(v));
  }
  return img;
}

// Foreground where the channel mean of a model-space image exceeds `threshold`.
inline Image8 rgb_to_mask(const Tensor& image, float threshold = 0.0f) {
  if (image.ndim() != 3) throw ShapeError("rgb_to_mask expects H x W x C, got " + to_string(image.shape()));
  const auto h = static_cast<int>(image.dim(0)), w = static_cast<int>(image.dim(1)), c = static_cast<int>(image.dim(2));
  Image8 m{h, w, 1, std::vector<std::uint8_t>(static_cast<std::size_t>(h * w))};
  for (int i = 0; i < h * w; ++i) {
    double s = 0;
    for (int k = 0; k < c; ++k) s += image[static_cast<std::size_t>(i * c + k)];
    m.pixels[static_cast<std::size_t>(i)] = s / c > threshold ? 255 : 0;
  }
  return m;
}

inline Image8 rgb_to_mask(const Image8& image, float threshold = 0.0f) { return rgb_to_mask(to_model_space(image), threshold); }

struct RecordEntry {
  std::int64_t id = 0;
  std::string image;
  std::string mask;
  std::vector<int> query;
  std::vector<int> caption;
  int target = 0;
  std::int64_t mask_area = 0;
};

struct DatasetManifest {
  int version = 1;
  std::uint64_t seed = 0;
  DataConfig config;
  std::filesystem::path root;
  std::map<std::string, std::vector<RecordEntry>> splits;

  const std::vector<RecordEntry>& split(const std::string& name) const {
    auto it = splits.find(name);
    if (it == splits.end()) throw std::out_of_range("dataset has no split '" + name + "'");
    return it->second;
  }
};

inline nlohmann::json config_to_json(const DataConfig& c) {
  return {{"height", c.height}, {"width", c.width}, {"min_shapes", c.min_shapes}, {"max_shapes", c.max_shapes},
          {"min_radius", c.min_radius}, {"max_radius", c.max_radius}, {"min_gray", c.min_gray}, {"max_gray", c.max_gray}};
}

inline DataConfig config_from_json(const nlohmann::json& j) {
  DataConfig c;
  c.height = j.value("height", c.height);
  c.width = j.value("width", c.width);
  c.min_shapes = j.value("min_shapes", c.min_shapes);
  c.max_shapes = j.value("max_shapes", c.max_shapes);
  c.min_radius = j.value("min_radius", c.min_radius);
  c.max_radius = j.value("max_radius", c.max_radius);
  c.min_gray = j.value("min_gray", c.min_gray);
  c.max_gray = j.value("max_gray", c.max_gray);
  return c;
}

inline nlohmann::json manifest_to_json(const DatasetManifest& m) {
  nlohmann::json j;
  j["version"] = m.version;
  j["seed"] = m.seed;
  j["config"] = config_to_json(m.config);
  nlohmann::json splits = nlohmann::json::object();
  for (const auto& [name, recs] : m.splits) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& r : recs)
      arr.push_back({{"id", r.id}, {"image", r.image}, {"mask", r.mask}, {"query", r.query}, {"caption", r.caption},
                     {"target", r.target}, {"mask_area", r.mask_area}});
    splits[name] = arr;
  }
  j["splits"] = splits;
  return j;
}

inline DatasetManifest load_manifest(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  if (!std::filesystem::exists(path)) throw IoError("no dataset manifest at " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(detail::read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed manifest " + path.string() + ": " + e.what());
  }
  DatasetManifest m;
  m.version = j.at("version").get<int>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.config = config_from_json(j.at("config"));
  m.root = dir;
  for (auto it = j.at("splits").begin(); it != j.at("splits").end(); ++it) {
    auto& recs = m.splits[it.key()];
    for (const auto& r : it.value())
      recs.push_back({r.at("id").get<std::int64_t>(), r.at("image").get<std::string>(), r.at("mask").get<std::string>(),
                      r.at("query").get<std::vector<int>>(), r.at("caption").get<std::vector<int>>(), r.at("target").get<int>(),
                      r.at("mask_area").get<std::int64_t>()});
  }
  return m;
}

// Writes <out>/{train,val}/NNNNNN_{image,mask}.png and <out>/manifest.json.
// Train records use ids [0, n_train), validation ids [n_train, n_train + n_val).
inline DatasetManifest build_dataset(int n_train, int n_val, std::uint64_t seed, const std::filesystem::path& out_dir,
                                     const DataConfig& cfg = {}) {
  if (n_train < 0 || n_val < 0) throw std::invalid_argument("build_dataset: negative split size");
  DatasetManifest m;
  m.seed = seed;
  m.config = cfg;
  m.root = out_dir;
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  std::int64_t next_id = 0;
  for (const auto& [split, count] : {std::pair<std::string, int>{"train", n_train}, {"val", n_val}}) {
    std::filesystem::create_directories(out_dir / split, ec);
    if (ec) throw IoError("cannot create " + (out_dir / split).string() + ": " + ec.message());
    auto& recs = m.splits[split];
    for (int i = 0; i < count; ++i, ++next_id) {
      const Sample s = generate_scene(seed, next_id, cfg);
      char stem[32];
      std::snprintf(stem, sizeof stem, "%06lld", static_cast<long long>(next_id));
      RecordEntry r{next_id, split + "/" + stem + "_image.png", split + "/" + stem + "_mask.png", s.query_tokens, s.caption_tokens, s.target,
                    mask_area(s.mask)};
      write_png(out_dir / r.image, s.image);
      write_png(out_dir / r.mask, s.mask);
      recs.push_back(std::move(r));
    }
  }
  detail::atomic_write(out_dir / "manifest.json", manifest_to_json(m).dump(2) + "\n");
  return m;
}

inline Sample load_sample(const DatasetManifest& m, const std::string& split, std::int64_t index) {
  const auto& recs = m.split(split);
  if (index < 0 || index >= static_cast<std::int64_t>(recs.size()))
    throw std::out_of_range("index " + std::to_string(index) + " out of range for split '" + split + "' of size " +
                            std::to_string(recs.size()));
  const auto& r = recs[static_cast<std::size_t>(index)];
  Sample s;
  s.record_id = r.id;
  s.image = read_png(m.root / r.image, 3);
  s.mask = read_png(m.root / r.mask, 1);
  s.query_tokens = r.query;
  s.caption_tokens = r.caption;
  s.target = r.target;
  const auto bad = std::find_if(s.mask.pixels.begin(), s.mask.pixels.end(), [](std::uint8_t v) { return v != 0 && v != 255; });
  if (bad != s.mask.pixels.end() || mask_area(s.mask) != r.mask_area || s.mask.height != m.config.height ||
      s.mask.width != m.config.width || s.image.height != m.config.height || s.image.width != m.config.width)
    throw IoError("corrupt record " + std::to_string(r.id) + " in split '" + split + "' (" + r.mask + ")");
  return s;
}

inline std::vector<Sample> load_split(const DatasetManifest& m, const std::string& split) {
  std::vector<Sample> out;
  const auto n = static_cast<std::int64_t>(m.split(split).size());
  out.reserve(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) out.push_back(load_sample(m, split, i));
  return out;
}

// In-memory equivalent of a built split, without touching disk.
inline std::vector<Sample> generate_split(std::uint64_t seed, std::int64_t first_id, int count, const DataConfig& cfg = {}) {
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) out.push_back(generate_scene(seed, first_id + i, cfg));
  return out;
}

}  // namespace maskflow
