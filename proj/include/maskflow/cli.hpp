#pragma once

// Command-line front end. Every subcommand is reachable through run_cli so the
// tests can drive it without spawning processes.
//
// Exit codes: 0 success, 1 user error (bad flag, missing file, invalid value),
// 2 internal error.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "maskflow/analysis.hpp"
#include "maskflow/runtime.hpp"
#include "maskflow/train.hpp"

namespace maskflow::cli {

namespace fs = std::filesystem;

class UserError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// JSON-lines logger.
class Log {
 public:
  explicit Log(std::ostream& out) : out_(out) {}
  void emit(const nlohmann::json& record) { out_ << record.dump() << '\n' << std::flush; }

 private:
  std::ostream& out_;
};

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  detail::atomic_write(path, text);
}

inline nlohmann::json read_json(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("no such file: " + path.string());
  try {
    return nlohmann::json::parse(detail::read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw UserError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

inline void require_file(const fs::path& path, const std::string& what, const std::string& producer) {
  if (!fs::exists(path)) throw IoError("missing " + what + " at " + path.string() + " (run `maskflow " + producer + "` first)");
}

inline DatasetManifest open_dataset(const fs::path& dir) {
  require_file(dir / "manifest.json", "dataset", "gen-data");
  return load_manifest(dir);
}

inline Codec open_codec(const fs::path& path) {
  require_file(path, "codec checkpoint", "train-codec");
  return load_codec(path);
}

inline Trainer open_checkpoint(const fs::path& path) {
  require_file(path, "model checkpoint", "train");
  return Trainer::load(path);
}

// "red circle" -> [SEG, red, circle].
inline Condition parse_query(const std::string& text) {
  std::istringstream in(text);
  std::string word;
  int color = -1, kind = -1;
  while (in >> word) {
    bool known = false;
    for (int c = 0; c < kNumColors; ++c)
      if (word == to_string(static_cast<ShapeColor>(c))) color = c, known = true;
    for (int k = 0; k < kNumKinds; ++k)
      if (word == to_string(static_cast<ShapeKind>(k))) kind = k, known = true;
    if (!known) throw UserError("unknown query word '" + word + "'");
  }
  if (color < 0 || kind < 0) throw UserError("query needs a color and a shape kind, e.g. \"red circle\"");
  return {{vocab::kSeg, color_token(static_cast<ShapeColor>(color)), kind_token(static_cast<ShapeKind>(kind))}};
}

// "red circle blue square" -> [red, circle, blue, square]; empty -> null condition.
inline Condition parse_caption(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> words;
  for (std::string w; in >> w;) words.push_back(w);
  if (words.empty()) return Condition::null_condition();
  if (words.size() % 2 != 0) throw UserError("caption must list (color kind) pairs");
  Condition c;
  for (std::size_t i = 0; i < words.size(); i += 2) {
    const Condition q = parse_query(words[i] + " " + words[i + 1]);
    c.ids.push_back(q.ids[1]);
    c.ids.push_back(q.ids[2]);
  }
  return c;
}

inline std::string density_csv(const std::vector<std::string>& kinds, const std::vector<double>& as, int grid_n) {
  const auto grid = uniform_grid(grid_n);
  std::string text = "kind,a,t,pdf,cdf\n";
  char buf[160];
  for (const auto& kind : kinds) {
    if (kind != "gen" && kind != "seg") throw UserError("unknown sampler kind '" + kind + "' (expected gen or seg)");
    const std::vector<double> params = kind == "gen" ? std::vector<double>{0.0} : as;
    for (double a : params) {
      if (kind == "seg" && !(a > 0.0)) throw UserError("sampler shift a must be positive");
      for (const auto& r : density_table(kind == "gen" ? SamplerKind::generation : SamplerKind::segmentation, a, grid)) {
        std::snprintf(buf, sizeof buf, "%s,%g,%.6f,%.9g,%.9g\n", kind.c_str(), r.a, r.t, r.pdf, r.cdf);
        text += buf;
      }
    }
  }
  return text;
}

inline std::string eval_csv(const EvalReport& r, const std::vector<Sample>& samples) {
  std::string text = "index,record_id,iou\n";
  char buf[96];
  for (std::size_t i = 0; i < r.ious.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%lld,%.6f\n", i, static_cast<long long>(samples[i].record_id), r.ious[i]);
    text += buf;
  }
  return text;
}

// Per-step training log record.
inline nlohmann::json step_record(std::int64_t step, const StepLoss& l, double lr) {
  return {{"event", "step"}, {"step", step}, {"loss", l.total}, {"seg_loss", l.seg}, {"gen_loss", l.gen}, {"lr", lr}};
}

// ---- reproduce ----

struct ReproduceProfile {
  std::string name;
  int n_train = 0;
  int n_val = 0;
  CodecConfig codec;
  CodecTrainOptions codec_train;
  TrainConfig train;
  int pca_samples = 0;
  int fig4_images = 0;
};

inline ReproduceProfile reproduce_profile(const std::string& name, std::uint64_t seed) {
  ReproduceProfile p;
  p.name = name;
  p.codec_train.seed = seed;
  p.train.seed = seed;
  if (name == "quick") {
    p.n_train = 240;
    p.n_val = 60;
    p.codec.width0 = 8;
    p.codec.width1 = 16;
    p.codec_train.steps = 150;
    p.codec_train.batch = 16;
    p.codec_train.calibration = 240;
    p.train.steps = 30;
    p.train.batch = 8;
    p.train.model.dim = 32;
    p.train.model.depth = 1;
    p.train.model.heads = 2;
    p.train.model.cond_dim = 16;
    p.train.model.mlp_ratio = 2;
    p.train.model.time_freqs = 16;
    p.pca_samples = 60;
    p.fig4_images = 4;
  } else if (name == "desk") {
    p.n_train = 2000;
    p.n_val = 500;
    p.codec_train.steps = 3000;
    p.pca_samples = 100;
    p.fig4_images = 8;
  } else {
    throw UserError("unknown profile '" + name + "' (expected quick or desk)");
  }
  return p;
}

inline std::string file_fingerprint(const fs::path& path) {
  const std::string bytes = detail::read_file(path);
  return fingerprint(nlohmann::json(bytes));
}

inline void reproduce(const fs::path& out, const ReproduceProfile& p, std::uint64_t seed, Log& log) {
  fs::create_directories(out);
  nlohmann::json manifest = {{"profile", p.name}, {"seed", seed}};
  const fs::path data_dir = out / "data";
  const auto dm = build_dataset(p.n_train, p.n_val, seed, data_dir);
  manifest["data"] = {{"n_train", p.n_train}, {"n_val", p.n_val}, {"seed", seed}, {"config", config_to_json(dm.config)}};
  log.emit({{"event", "stage"}, {"stage", "gen-data"}, {"dir", data_dir.string()}});
  const auto train_s = load_split(dm, "train"), val_s = load_split(dm, "val");

  Codec codec(p.codec, seed);
  train_codec(codec, train_s, p.codec_train);
  save_codec(out / "codec.safetensors", codec);
  const auto cr = evaluate_codec(codec, val_s);
  manifest["codec"] = {{"config", to_json(p.codec)},
                       {"steps", p.codec_train.steps},
                       {"batch", p.codec_train.batch},
                       {"seed", seed},
                       {"val_image_psnr", cr.image_psnr},
                       {"val_mask_iou", cr.mask_iou}};
  log.emit({{"event", "stage"}, {"stage", "train-codec"}, {"image_psnr", cr.image_psnr}, {"mask_iou", cr.mask_iou}});

  // Fig. 4 analog: mask labels next to single-component PCA scores.
  const std::vector<Sample> pca_set(val_s.begin(), val_s.begin() + std::min<std::ptrdiff_t>(p.pca_samples, std::ssize(val_s)));
  const auto pm = mask_analysis_matrix(codec, pca_set);
  const auto pca = pca_one_component(pm);
  const double thr = otsu_threshold(pca.scores);
  const double agreement = threshold_agreement(pca.scores, pm.labels, thr);
  fs::create_directories(out / "fig4");
  for (int i = 0; i < std::min<int>(p.fig4_images, static_cast<int>(pm.n)); ++i) {
    char stem[32];
    std::snprintf(stem, sizeof stem, "%02d", i);
    Image8 labels{static_cast<int>(pm.h), static_cast<int>(pm.w), 1, {}};
    for (std::int64_t k = 0; k < pm.h * pm.w; ++k) labels.pixels.push_back(pm.labels[static_cast<std::size_t>(i * pm.h * pm.w + k)] ? 255 : 0);
    write_png(out / "fig4" / (std::string(stem) + "_mask.png"), labels);
    write_png(out / "fig4" / (std::string(stem) + "_pca.png"), score_image(pca.scores, i, pm.h, pm.w));
  }
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", agreement);
  manifest["fig4"] = {{"samples", pm.n}, {"threshold", "otsu"}, {"agreement", buf}};
  log.emit({{"event", "stage"}, {"stage", "fig4"}, {"agreement", agreement}});

  write_text(out / "fig5.csv", density_csv({"gen", "seg"}, {0.05, 0.1, 0.5}, 1001));
  manifest["fig5"] = {{"kinds", {"gen", "seg"}}, {"a", {0.05, 0.1, 0.5}}, {"grid", 1001}};

  SweepOptions so;
  so.t_grid = default_t_grid();
  const auto tm = mask_analysis_matrix(codec, train_s), vm = mask_analysis_matrix(codec, val_s);
  write_sweep_csv(out / "fig6.csv", separability_sweep(tm, vm, so));
  manifest["fig6"] = {{"seeds", so.seeds}, {"lambda", so.lambda}, {"balance", so.balance}};
  log.emit({{"event", "stage"}, {"stage", "fig6"}});

  TrainConfig base = p.train;
  base.model.grid = p.codec.latent_size();
  base.model.channels = p.codec.latent_channels;
  const auto train_l = encode_dataset(codec, train_s), val_l = encode_dataset(codec, val_s);
  const auto results = run_ablation(ablation_arms(base), codec, train_l, val_l);
  write_text(out / "tables.csv", ablation_csv(results));
  manifest["tables"] = {{"base", to_json(base)}, {"arms", nlohmann::json::array()}};
  for (const auto& r : results) manifest["tables"]["arms"].push_back(r.arm.name);
  log.emit({{"event", "stage"}, {"stage", "tables"}});

  nlohmann::json files = nlohmann::json::object();
  for (const char* f : {"fig5.csv", "fig6.csv", "tables.csv"}) files[f] = file_fingerprint(out / f);
  manifest["files"] = files;
  write_text(out / "manifest.json", manifest.dump(2) + "\n");
}

// ---- dispatch ----

inline int run_cli(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Mask generation by one-step rectified flow on a latent codec", "maskflow"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);
  app.fallthrough();
  int threads = 0;
  bool deterministic = false;
  app.add_option("--threads", threads, "Worker threads (0: MASKFLOW_THREADS or all cores)");
  app.add_flag("--deterministic", deterministic, "Sequential reductions for bit-reproducible runs");

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic shapes corpus");
  int n_train = 2000, n_val = 500;
  std::uint64_t seed = 0;
  std::string out_path;
  gen->add_option("--n-train", n_train, "Training samples");
  gen->add_option("--n-val", n_val, "Validation samples");
  gen->add_option("--seed", seed, "Corpus seed");
  gen->add_option("--out", out_path, "Output directory")->required();

  // train-codec
  auto* tcodec = app.add_subcommand("train-codec", "Train the latent codec on images and mask renderings");
  std::string data_dir;
  CodecConfig codec_cfg;
  CodecTrainOptions codec_opt;
  int log_every = 100;
  tcodec->add_option("--data", data_dir, "Dataset directory")->required();
  tcodec->add_option("--steps", codec_opt.steps, "Optimizer steps");
  tcodec->add_option("--batch", codec_opt.batch, "Batch size");
  tcodec->add_option("--lr", codec_opt.lr, "Peak learning rate");
  tcodec->add_option("--seed", seed, "Initialization and batch seed");
  tcodec->add_option("--width0", codec_cfg.width0, "Channels at half resolution");
  tcodec->add_option("--width1", codec_cfg.width1, "Channels at the latent resolution");
  tcodec->add_option("--latent-channels", codec_cfg.latent_channels, "Latent channels");
  tcodec->add_option("--log-every", log_every, "Steps between log records");
  tcodec->add_option("--out", out_path, "Checkpoint path")->required();

  // analyze-latents
  auto* analyze = app.add_subcommand("analyze-latents", "Linear-probe separability of mask latents under noise");
  std::string codec_path;
  std::vector<double> t_grid = default_t_grid();
  std::vector<std::uint64_t> seeds{0, 1, 2};
  double lambda = 1e-3;
  int max_train = 1000, pca_n = 100;
  std::string pca_out;
  analyze->add_option("--codec", codec_path, "Codec checkpoint")->required();
  analyze->add_option("--data", data_dir, "Dataset directory")->required();
  analyze->add_option("--t-grid", t_grid, "Noise levels")->delimiter(',');
  analyze->add_option("--seeds", seeds, "Probe seeds")->delimiter(',');
  analyze->add_option("--lambda", lambda, "Ridge strength");
  analyze->add_option("--max-train", max_train, "Training images used for the probe (0: all)");
  analyze->add_option("--pca-samples", pca_n, "Validation images for the PCA comparison");
  analyze->add_option("--pca-out", pca_out, "Optional JSON report of the PCA comparison");
  analyze->add_option("--out", out_path, "CSV path")->required();

  // plot-samplers
  auto* plot = app.add_subcommand("plot-samplers", "Tabulate timestep densities");
  std::vector<double> as{0.05, 0.1, 0.5};
  int grid_n = 1000;
  std::vector<std::string> kinds{"seg"};
  plot->add_option("--a", as, "Segmentation sampler shifts")->delimiter(',');
  plot->add_option("--grid", grid_n, "Grid points per curve");
  plot->add_option("--kinds", kinds, "Sampler kinds (gen, seg)")->delimiter(',');
  plot->add_option("--out", out_path, "CSV path")->required();

  // train
  auto* train = app.add_subcommand("train", "Joint segmentation/generation flow training");
  std::string config_path, resume_path;
  bool dump_config = false;
  int steps_override = -1;
  train->add_option("--config", config_path, "JSON training config");
  train->add_flag("--dump-config", dump_config, "Print the fully resolved config and exit");
  train->add_option("--codec", codec_path, "Codec checkpoint");
  train->add_option("--data", data_dir, "Dataset directory");
  train->add_option("--resume", resume_path, "Continue from a training checkpoint");
  train->add_option("--steps", steps_override, "Override the configured step count");
  train->add_option("--log-every", log_every, "Steps between log records");
  train->add_option("--out", out_path, "Checkpoint path");

  // segment
  auto* segment = app.add_subcommand("segment", "One-step mask prediction for an image and a query");
  std::string ckpt_path, image_path, query, caption;
  std::uint64_t eps_seed = 0;
  segment->add_option("--ckpt", ckpt_path, "Training checkpoint")->required();
  segment->add_option("--image", image_path, "Input PNG")->required();
  segment->add_option("--query", query, "Referring query, e.g. \"red circle\"")->required();
  segment->add_option("--eps-seed", eps_seed, "Noise seed");
  segment->add_option("--out", out_path, "Mask PNG")->required();

  // sample
  auto* sample = app.add_subcommand("sample", "Caption-conditioned image generation");
  int sample_steps = 20;
  double guidance = 3.0;
  sample->add_option("--ckpt", ckpt_path, "Training checkpoint")->required();
  sample->add_option("--caption", caption, "Caption, e.g. \"red circle blue square\" (empty: unconditional)");
  sample->add_option("--steps", sample_steps, "Euler steps");
  sample->add_option("--w", guidance, "Guidance weight");
  sample->add_option("--seed", seed, "Noise seed");
  sample->add_option("--out", out_path, "Image PNG")->required();

  // eval
  auto* eval = app.add_subcommand("eval", "One-step segmentation metrics on a split");
  std::string split = "val", csv_path;
  eval->add_option("--ckpt", ckpt_path, "Training checkpoint")->required();
  eval->add_option("--data", data_dir, "Dataset directory")->required();
  eval->add_option("--split", split, "Split to evaluate");
  eval->add_option("--eps-seed", eps_seed, "Noise seed");
  eval->add_option("--csv", csv_path, "Optional per-sample CSV");
  eval->add_option("--out", out_path, "Report JSON")->required();

  // ablate
  auto* ablate = app.add_subcommand("ablate", "Train and evaluate the ablation arms");
  std::vector<std::string> arms;
  ablate->add_option("--base", config_path, "Base JSON config (default config when omitted)");
  ablate->add_option("--codec", codec_path, "Codec checkpoint")->required();
  ablate->add_option("--data", data_dir, "Dataset directory")->required();
  ablate->add_option("--arms", arms, "Subset of arms (default: all)")->delimiter(',');
  ablate->add_option("--out", out_path, "Results CSV")->required();

  // reproduce
  auto* repro = app.add_subcommand("reproduce", "Regenerate the figure and table artifacts");
  std::string profile = "quick";
  repro->add_option("--profile", profile, "quick or desk");
  repro->add_option("--seed", seed, "Seed for every stage");
  repro->add_option("--out", out_path, "Output directory")->required();

  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    if (app.get_subcommands().empty()) err << app.help();
    return 1;
  }

  Log log(out);
  try {
    const int used = configure_runtime(threads, deterministic || repro->parsed());
    if (gen->parsed()) {
      const auto m = build_dataset(n_train, n_val, seed, out_path);
      log.emit({{"event", "done"}, {"command", "gen-data"}, {"out", out_path}, {"train", m.split("train").size()}, {"val", m.split("val").size()}});
    } else if (tcodec->parsed()) {
      const auto dm = open_dataset(data_dir);
      const auto train_s = load_split(dm, "train");
      codec_cfg.image_size = dm.config.height;
      codec_cfg.validate();
      Codec codec(codec_cfg, seed);
      codec_opt.seed = seed;
      codec_opt.on_step = [&](int s, double l) {
        if (log_every > 0 && (s % log_every == 0 || s + 1 == codec_opt.steps)) log.emit({{"event", "step"}, {"step", s}, {"loss", l}});
      };
      train_codec(codec, train_s, codec_opt);
      const auto cr = evaluate_codec(codec, dm.splits.count("val") && !dm.split("val").empty() ? load_split(dm, "val") : train_s);
      const nlohmann::json report = {{"steps", codec_opt.steps}, {"seed", seed}, {"image_psnr", cr.image_psnr}, {"mask_psnr", cr.mask_psnr},
                                     {"mask_iou", cr.mask_iou}};
      save_codec(out_path, codec, report);
      log.emit({{"event", "done"}, {"command", "train-codec"}, {"out", out_path}, {"report", report}});
    } else if (analyze->parsed()) {
      Codec codec = open_codec(codec_path);
      const auto dm = open_dataset(data_dir);
      auto train_s = load_split(dm, "train");
      if (max_train > 0 && std::ssize(train_s) > max_train) train_s.resize(static_cast<std::size_t>(max_train));
      const auto val_s = load_split(dm, "val");
      SweepOptions so;
      so.t_grid = t_grid;
      so.seeds = seeds;
      so.lambda = lambda;
      const auto rows = separability_sweep(mask_analysis_matrix(codec, train_s), mask_analysis_matrix(codec, val_s), so);
      write_sweep_csv(out_path, rows);
      nlohmann::json summary = nlohmann::json::array();
      for (const auto& s : summarize_sweep(rows)) summary.push_back({{"t", s.t}, {"val_acc", s.mean}, {"std", s.std}});
      if (!pca_out.empty()) {
        const std::vector<Sample> set(val_s.begin(), val_s.begin() + std::min<std::ptrdiff_t>(pca_n, std::ssize(val_s)));
        const auto pm = mask_analysis_matrix(codec, set);
        const auto pca = pca_one_component(pm);
        const double thr = otsu_threshold(pca.scores);
        write_text(pca_out, nlohmann::json{{"samples", pm.n},
                                           {"explained", pca.direction.explained},
                                           {"threshold", thr},
                                           {"agreement", threshold_agreement(pca.scores, pm.labels, thr)}}
                                .dump(2) +
                                "\n");
      }
      log.emit({{"event", "done"}, {"command", "analyze-latents"}, {"out", out_path}, {"summary", summary}});
    } else if (plot->parsed()) {
      write_text(out_path, density_csv(kinds, as, grid_n));
      log.emit({{"event", "done"}, {"command", "plot-samplers"}, {"out", out_path}});
    } else if (train->parsed()) {
      TrainConfig cfg = config_path.empty() ? TrainConfig{} : train_config_from_json(read_json(config_path));
      if (steps_override >= 0) cfg.steps = steps_override;
      cfg.validate();
      if (dump_config) {
        out << to_json(cfg).dump(2) << '\n';
        return 0;
      }
      if (out_path.empty()) throw UserError("train needs --out");
      if (data_dir.empty()) throw UserError("train needs --data");
      const auto dm = open_dataset(data_dir);
      std::optional<Codec> codec;
      std::optional<Trainer> tr;
      if (!resume_path.empty()) {
        require_file(resume_path, "resume checkpoint", "train");
        if (!codec_path.empty() || !config_path.empty() || steps_override >= 0)
          throw UserError("a resumed run uses the config and codec stored in the checkpoint; drop --codec, --config and --steps");
        tr.emplace(Trainer::load(resume_path));
      } else {
        if (codec_path.empty()) throw UserError("train needs --codec");
        codec.emplace(open_codec(codec_path));
        tr.emplace(cfg, &*codec);
      }
      const auto data = encode_dataset(*tr->codec(), load_split(dm, "train"));
      const int every = tr->config().checkpoint_every;
      tr->run(data, -1, [&](std::int64_t s, const StepLoss& l) {
        if (log_every > 0 && (s % log_every == 0 || s == tr->config().steps)) log.emit(step_record(s, l, tr->optimizer().lr));
        if (every > 0 && s % every == 0) tr->save(out_path);
      });
      tr->save(out_path);
      log.emit({{"event", "done"}, {"command", "train"}, {"out", out_path}, {"steps", tr->step()}, {"threads", used}});
    } else if (segment->parsed()) {
      Trainer tr = open_checkpoint(ckpt_path);
      require_file(image_path, "input image", "gen-data");
      const Image8 img = read_png(image_path, 3);
      const int size = tr.codec()->config().image_size;
      if (img.height != size || img.width != size)
        throw UserError("image is " + std::to_string(img.width) + "x" + std::to_string(img.height) + ", the codec expects " +
                        std::to_string(size) + "x" + std::to_string(size));
      const Tensor lat = tr.codec()->encode(to_model_space(img));
      const Tensor batch = lat.reshaped({1, lat.dim(0), lat.dim(1), lat.dim(2)});
      const Tensor x = tr.segment_latents(batch, {parse_query(query)}, eps_seed);
      const Image8 mask = tr.latents_to_masks(x).front();
      if (fs::path(out_path).has_parent_path()) fs::create_directories(fs::path(out_path).parent_path());
      write_png(out_path, mask);
      log.emit({{"event", "done"}, {"command", "segment"}, {"out", out_path}, {"foreground", mask_area(mask)}});
    } else if (sample->parsed()) {
      Trainer tr = open_checkpoint(ckpt_path);
      const Condition cond = parse_caption(caption);
      const auto& mc = tr.config().model;
      Rng rng(seed, derive_stream(0x5A3, 0));
      const Tensor eps = Tensor::randn({1, mc.grid, mc.grid, mc.channels}, rng);
      auto& model = tr.model();
      const Tensor z = euler_sample(
          [&](const Tensor& x, double t, bool conditional) {
            return model.velocity(x, {t}, {conditional ? cond : Condition::null_condition()}, nullptr);
          },
          eps, sample_steps, guidance);
      const Tensor img = tr.codec()->decode(z);
      if (fs::path(out_path).has_parent_path()) fs::create_directories(fs::path(out_path).parent_path());
      write_png(out_path, from_model_space(img.reshaped({img.dim(1), img.dim(2), img.dim(3)})));
      log.emit({{"event", "done"}, {"command", "sample"}, {"out", out_path}});
    } else if (eval->parsed()) {
      Trainer tr = open_checkpoint(ckpt_path);
      const auto dm = open_dataset(data_dir);
      const auto samples = load_split(dm, split);
      const auto data = encode_dataset(*tr.codec(), samples);
      const auto report = evaluate_segmentation(tr, data, eps_seed);
      auto j = to_json(report);
      j["generation_val_loss"] = generation_val_loss(tr, data);
      j["split"] = split;
      j["eps_seed"] = eps_seed;
      write_text(out_path, j.dump(2) + "\n");
      if (!csv_path.empty()) write_text(csv_path, eval_csv(report, samples));
      log.emit({{"event", "done"}, {"command", "eval"}, {"out", out_path}, {"miou", report.miou}, {"oiou", report.oiou}});
    } else if (ablate->parsed()) {
      const TrainConfig base = config_path.empty() ? TrainConfig{} : train_config_from_json(read_json(config_path));
      Codec codec = open_codec(codec_path);
      const auto dm = open_dataset(data_dir);
      const auto selected = ablation_arms(base, arms);
      if (selected.empty()) throw UserError("no ablation arm matches --arms");
      for (const auto& name : arms)
        if (std::none_of(selected.begin(), selected.end(), [&](const AblationArm& a) { return a.name == name; }))
          throw UserError("unknown ablation arm '" + name + "'");
      const auto train_l = encode_dataset(codec, load_split(dm, "train")), val_l = encode_dataset(codec, load_split(dm, "val"));
      const auto results = run_ablation(selected, codec, train_l, val_l, [&](const std::string& arm, std::int64_t s, const StepLoss& l) {
        if (log_every > 0 && s % log_every == 0) {
          auto r = step_record(s, l, 0.0);
          r.erase("lr");
          r["arm"] = arm;
          log.emit(r);
        }
      });
      write_text(out_path, ablation_csv(results));
      log.emit({{"event", "done"}, {"command", "ablate"}, {"out", out_path}, {"arms", results.size()}});
    } else if (repro->parsed()) {
      reproduce(out_path, reproduce_profile(profile, seed), seed, log);
      log.emit({{"event", "done"}, {"command", "reproduce"}, {"out", out_path}});
    }
    return 0;
  } catch (const UserError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const IoError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::out_of_range& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::domain_error& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return 2;
  }
}

inline int run_cli(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  return run_cli(std::vector<std::string>(argv + 1, argv + argc), out, err);
}

}  // namespace maskflow::cli
