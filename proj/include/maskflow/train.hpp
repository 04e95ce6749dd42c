#pragma once

// Mixed segmentation/generation training, evaluation metrics and ablations.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <memory>
#include <numbers>
#include <string>
#include <vector>

#include "maskflow/codec.hpp"
#include "maskflow/dit.hpp"
#include "maskflow/flow.hpp"
#include "maskflow/samplers.hpp"

namespace maskflow {

struct TrainConfig {
  int steps = 8000;
  int batch = 32;
  int ratio_seg = 1;
  int ratio_gen = 1;
  double a = 0.05;
  Supervision supervision = Supervision::mse_latent;
  double lr_max = 1e-3;  // desk schedule: the reference 5e-5 -> 1e-5 scaled by 20
  double lr_min = 2e-4;
  double cfg_dropout = 0.1;
  bool shortcut = true;  // feed the clean image latent as extra tokens
  std::uint64_t seed = 0;
  int checkpoint_every = 0;
  ModelConfig model;

  void validate() const {
    if (steps < 0) throw std::invalid_argument("steps must be non-negative");
    if (batch < 1) throw std::invalid_argument("batch must be positive");
    if (ratio_seg < 0 || ratio_gen < 0 || ratio_seg + ratio_gen == 0) throw std::invalid_argument("mix ratio needs a positive component");
    if (!(a > 0.0)) throw std::invalid_argument("sampler shift a must be positive");
    if (!(lr_min <= lr_max) || lr_min < 0) throw std::invalid_argument("need 0 <= lr_min <= lr_max");
    if (!(cfg_dropout >= 0.0 && cfg_dropout <= 1.0)) throw std::invalid_argument("cfg dropout must lie in [0, 1]");
    model.validate();
  }
};

// Reference schedule of the original large-scale setting.
inline constexpr double kReferenceLrMax = 5e-5;
inline constexpr double kReferenceLrMin = 1e-5;

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"steps", c.steps},
          {"batch", c.batch},
          {"ratio_seg", c.ratio_seg},
          {"ratio_gen", c.ratio_gen},
          {"a", c.a},
          {"supervision", to_string(c.supervision)},
          {"lr_max", c.lr_max},
          {"lr_min", c.lr_min},
          {"cfg_dropout", c.cfg_dropout},
          {"shortcut", c.shortcut},
          {"seed", c.seed},
          {"checkpoint_every", c.checkpoint_every},
          {"model", to_json(c.model)}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  static const std::vector<std::string> known{"steps",  "batch",      "ratio_seg",   "ratio_gen", "a",
                                              "supervision", "lr_max", "lr_min",  "cfg_dropout", "shortcut",
                                              "seed",   "checkpoint_every", "model", "lr_schedule"};
  for (const auto& [key, _] : j.items())
    if (std::find(known.begin(), known.end(), key) == known.end()) throw std::invalid_argument("unknown train config key '" + key + "'");
  TrainConfig c;
  c.steps = j.value("steps", c.steps);
  c.batch = j.value("batch", c.batch);
  c.ratio_seg = j.value("ratio_seg", c.ratio_seg);
  c.ratio_gen = j.value("ratio_gen", c.ratio_gen);
  c.a = j.value("a", c.a);
  if (j.contains("supervision")) c.supervision = parse_supervision(j.at("supervision").get<std::string>());
  if (j.value("lr_schedule", std::string("desk")) == "reference") {
    c.lr_max = kReferenceLrMax;
    c.lr_min = kReferenceLrMin;
  }
  c.lr_max = j.value("lr_max", c.lr_max);
  c.lr_min = j.value("lr_min", c.lr_min);
  c.cfg_dropout = j.value("cfg_dropout", c.cfg_dropout);
  c.shortcut = j.value("shortcut", c.shortcut);
  c.seed = j.value("seed", c.seed);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
  c.validate();
  return c;
}

// FNV-1a over the canonical JSON text.
inline std::string fingerprint(const nlohmann::json& j) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline double cosine_lr(std::int64_t step, std::int64_t total, double lr_max, double lr_min) {
  if (step < 0 || step > total) throw std::out_of_range("cosine_lr: step " + std::to_string(step) + " outside [0, " + std::to_string(total) + "]");
  if (total == 0) return lr_max;
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total)));
}

// Generation conditions are replaced by the null token with probability p;
// segmentation conditions never are.
inline Condition cfg_dropout(const Condition& cond, Task task, double p, Rng& rng) {
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("cfg_dropout: p must lie in [0, 1]");
  if (task == Task::segmentation) return cond;
  const double u = rng.uniform();
  return u < p ? Condition::null_condition() : cond;
}

// Number of segmentation samples in a batch; the rest are generation.
inline int segmentation_count(int batch, int ratio_seg, int ratio_gen) {
  if (ratio_seg < 0 || ratio_gen < 0 || ratio_seg + ratio_gen == 0) throw std::invalid_argument("mix ratio needs a positive component");
  const int total = ratio_seg + ratio_gen;
  return (2 * batch * ratio_seg + total) / (2 * total);
}

// Codec-encoded training data. Latents are [N, h, w, d].
struct LatentData {
  Tensor image_latents;
  Tensor mask_latents;
  std::vector<Image8> masks;
  std::vector<Condition> queries;
  std::vector<Condition> captions;

  std::int64_t size() const { return static_cast<std::int64_t>(masks.size()); }
};

inline Tensor encode_batched(Codec& codec, const std::vector<Sample>& samples, bool masks, std::size_t chunk = 128) {
  std::vector<float> all;
  Shape shape;
  for (std::size_t start = 0; start < samples.size(); start += chunk) {
    const std::vector<Sample> part(samples.begin() + static_cast<std::ptrdiff_t>(start),
                                   samples.begin() + static_cast<std::ptrdiff_t>(std::min(samples.size(), start + chunk)));
    const Tensor z = codec.encode(stack_images(part, masks));
    all.insert(all.end(), z.data().begin(), z.data().end());
    shape = z.shape();
  }
  shape[0] = static_cast<std::int64_t>(samples.size());
  return Tensor(shape, std::move(all));
}

inline LatentData encode_dataset(Codec& codec, const std::vector<Sample>& samples) {
  if (samples.empty()) throw std::invalid_argument("encode_dataset: no samples");
  LatentData d;
  d.image_latents = encode_batched(codec, samples, false);
  d.mask_latents = encode_batched(codec, samples, true);
  for (const auto& s : samples) {
    d.masks.push_back(s.mask);
    d.queries.push_back({s.query_tokens});
    d.captions.push_back({s.caption_tokens});
  }
  return d;
}

namespace detail {

inline Tensor gather_latents(const Tensor& all, const std::vector<std::int64_t>& idx) {
  const std::int64_t per = all.numel() / all.dim(0);
  Shape s = all.shape();
  s[0] = static_cast<std::int64_t>(idx.size());
  Tensor out(s);
  for (std::size_t i = 0; i < idx.size(); ++i) std::copy_n(all.ptr() + idx[i] * per, per, out.ptr() + static_cast<std::int64_t>(i) * per);
  return out;
}

}  // namespace detail

// One task's share of a batch.
struct TaskBatch {
  std::vector<std::int64_t> index;  // rows of LatentData
  std::vector<double> t;
  Tensor x0, eps, x_t, v_target;
  Tensor clean;  // segmentation only
  std::vector<Image8> masks;  // segmentation only
  std::vector<Condition> cond;

  std::int64_t size() const { return static_cast<std::int64_t>(index.size()); }
};

struct FlowBatch {
  TaskBatch seg;
  TaskBatch gen;
};

// Draws a batch with the configured task mix; deterministic in (seed, step).
inline FlowBatch mixed_batch(const LatentData& data, const TrainConfig& cfg, std::int64_t step) {
  if (data.size() == 0) throw std::invalid_argument("mixed_batch: empty dataset");
  Rng rng(cfg.seed, derive_stream(0x7EA1, static_cast<std::uint64_t>(step)));
  const int n_seg = segmentation_count(cfg.batch, cfg.ratio_seg, cfg.ratio_gen);
  const int n_gen = cfg.batch - n_seg;
  const SegSampler seg_sampler(cfg.a);
  FlowBatch fb;
  auto fill = [&](TaskBatch& tb, int n, Task task) {
    if (n == 0) return;
    for (int i = 0; i < n; ++i) tb.index.push_back(static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(data.size()))));
    for (int i = 0; i < n; ++i) tb.t.push_back(task == Task::segmentation ? seg_sampler.sample(rng) : sample_gen(rng));
    tb.x0 = detail::gather_latents(task == Task::segmentation ? data.mask_latents : data.image_latents, tb.index);
    tb.eps = Tensor::randn(tb.x0.shape(), rng);
    auto path = make_path(tb.x0, tb.eps, tb.t);
    tb.x_t = std::move(path.x_t);
    tb.v_target = std::move(path.v_target);
    for (auto i : tb.index) {
      const auto k = static_cast<std::size_t>(i);
      if (task == Task::segmentation) {
        tb.cond.push_back(data.queries[k]);
        tb.masks.push_back(data.masks[k]);
      } else {
        tb.cond.push_back(cfg_dropout(data.captions[k], task, cfg.cfg_dropout, rng));
      }
    }
    if (task == Task::segmentation) tb.clean = detail::gather_latents(data.image_latents, tb.index);
  };
  fill(fb.seg, n_seg, Task::segmentation);
  fill(fb.gen, n_gen, Task::generation);
  return fb;
}

struct StepLoss {
  double total = 0.0;
  double seg = 0.0;
  double gen = 0.0;
};

// Model, supervision head, optimizer and step counter.
class Trainer {
 public:
  Trainer(TrainConfig cfg, Codec* codec) : cfg_(std::move(cfg)), model_(cfg_.model, cfg_.seed), codec_(codec) {
    cfg_.validate();
    if (codec_ && (codec_->config().latent_size() != cfg_.model.grid || codec_->config().latent_channels != cfg_.model.channels))
      throw std::invalid_argument("model expects " + std::to_string(cfg_.model.grid) + "x" + std::to_string(cfg_.model.grid) + "x" +
                                  std::to_string(cfg_.model.channels) + " latents but the codec produces " +
                                  std::to_string(codec_->config().latent_size()) + "x" + std::to_string(codec_->config().latent_size()) +
                                  "x" + std::to_string(codec_->config().latent_channels));
    if (cfg_.supervision == Supervision::bce_decoder) {
      if (!codec_) throw std::invalid_argument("BCE decoder supervision needs a codec");
      model_.params().add("head.dec.scale", Tensor::scalar(4.0f));
      model_.params().add("head.dec.bias", Tensor::scalar(0.0f));
    } else if (cfg_.supervision == Supervision::bce_linear) {
      const int f = codec_ ? codec_->config().factor : 4;
      Rng rng(cfg_.seed, derive_stream(0x11EAD, 0));
      model_.params().add("head.lin.w", Tensor::randn({cfg_.model.channels, f * f}, rng, 1.0 / std::sqrt(cfg_.model.channels)));
      model_.params().add("head.lin.b", Tensor::zeros({f * f}));
    }
    adam_.lr = cfg_.lr_max;
  }

  const TrainConfig& config() const { return cfg_; }
  DiT& model() { return model_; }
  AdamState& optimizer() { return adam_; }
  std::int64_t step() const { return step_; }
  const std::vector<StepLoss>& losses() const { return losses_; }
  Codec* codec() { return codec_; }

  // Loss of one batch on a fresh tape; gradients land in the parameter store.
  StepLoss compute_loss(const FlowBatch& fb, bool backward) {
    Tape tape;
    Var total;
    StepLoss out;
    auto accumulate = [&](const Var& l) { total = total.valid() ? add(total, l) : l; };
    if (fb.seg.size() > 0) {
      const auto& s = fb.seg;
      const Var v = model_.forward(tape, s.x_t, s.t, s.cond, cfg_.shortcut ? &s.clean : nullptr);
      Var l;
      if (cfg_.supervision == Supervision::mse_latent) {
        l = mse_loss(v, tape.constant(s.v_target));
      } else {
        const Var x0 = predict_x0(s.x_t, s.t, v);
        const Tensor targets = mask_targets<float>(s.masks);
        auto& ps = model_.params();
        if (cfg_.supervision == Supervision::bce_decoder)
          l = bce_decoder_loss(x0, targets, *codec_, tape.param(ps.at("head.dec.scale")), tape.param(ps.at("head.dec.bias")));
        else
          l = bce_linear_loss(x0, targets, tape.param(ps.at("head.lin.w")), tape.param(ps.at("head.lin.b")), factor());
      }
      out.seg = l.value()[0];
      accumulate(l);
    }
    if (fb.gen.size() > 0) {
      const auto& g = fb.gen;
      const Var l = mse_loss(model_.forward(tape, g.x_t, g.t, g.cond, nullptr), tape.constant(g.v_target));
      out.gen = l.value()[0];
      accumulate(l);
    }
    out.total = total.value()[0];
    if (backward) tape.backward(total);
    return out;
  }

  StepLoss train_step(const LatentData& data) {
    if (step_ >= cfg_.steps) throw std::logic_error("training already finished");
    const FlowBatch fb = mixed_batch(data, cfg_, step_);
    model_.params().zero_grad();
    const StepLoss loss = compute_loss(fb, true);
    if (!std::isfinite(loss.total)) {
      std::vector<std::int64_t> ids = fb.seg.index;
      ids.insert(ids.end(), fb.gen.index.begin(), fb.gen.index.end());
      throw std::runtime_error("loss is not finite at step " + std::to_string(step_) + " (batch " + fingerprint(nlohmann::json(ids)) + ")");
    }
    adam_.lr = cosine_lr(step_, cfg_.steps, cfg_.lr_max, cfg_.lr_min);
    adam_step(model_.params(), adam_);
    ++step_;
    losses_.push_back(loss);
    return loss;
  }

  // Runs until `until` (default: all configured steps).
  void run(const LatentData& data, std::int64_t until = -1, const std::function<void(std::int64_t, const StepLoss&)>& on_step = {}) {
    const std::int64_t end = until < 0 ? cfg_.steps : std::min<std::int64_t>(until, cfg_.steps);
    while (step_ < end) {
      const auto l = train_step(data);
      if (on_step) on_step(step_, l);
    }
  }

  int factor() const { return codec_ ? codec_->config().factor : 4; }

  // One-step mask latents for a batch of image latents and queries.
  Tensor segment_latents(const Tensor& image_latents, const std::vector<Condition>& queries, std::uint64_t eps_seed = 0) {
    const Tensor eps = segmentation_noise(image_latents.shape(), eps_seed);
    const std::vector<double> t(static_cast<std::size_t>(image_latents.dim(0)), 1.0);
    return one_step_segment([&](const Tensor& x, double) { return model_.velocity(x, t, queries, cfg_.shortcut ? &image_latents : nullptr); },
                            eps);
  }

  // Binary masks from predicted mask latents under the active supervision.
  std::vector<Image8> latents_to_masks(const Tensor& latents) {
    std::vector<Image8> out;
    const std::int64_t n = latents.dim(0), per = latents.numel() / n;
    const Shape one{latents.dim(1), latents.dim(2), latents.dim(3)};
    if (cfg_.supervision == Supervision::bce_linear) {
      const auto& ps = model_.params();
      for (std::int64_t i = 0; i < n; ++i) {
        Tensor z(one);
        std::copy_n(latents.ptr() + i * per, per, z.ptr());
        out.push_back(linear_head_mask(z, ps.at("head.lin.w").value, ps.at("head.lin.b").value, factor()));
      }
      return out;
    }
    if (!codec_) throw std::invalid_argument("decoding masks needs a codec");
    const Tensor images = codec_->decode(latents);
    const std::int64_t ip = images.numel() / n;
    for (std::int64_t i = 0; i < n; ++i) {
      Tensor img({images.dim(1), images.dim(2), images.dim(3)});
      std::copy_n(images.ptr() + i * ip, ip, img.ptr());
      out.push_back(rgb_to_mask(img));
    }
    return out;
  }

  void save(const std::filesystem::path& path, const nlohmann::json& extra = {}) const {
    Archive a;
    export_params(model_.params(), a, "model.");
    std::size_t i = 0;
    for (const auto& [name, p] : model_.params()) {
      if (!p.requires_grad) continue;
      if (i < adam_.m.size()) {
        a.tensors["adam.m." + name] = adam_.m[i];
        a.tensors["adam.v." + name] = adam_.v[i];
      }
      ++i;
    }
    if (codec_) export_params(codec_->params(), a, "codec.");
    a.metadata = {{"kind", "maskflow"},
                  {"step", step_},
                  {"config", to_json(cfg_)},
                  {"adam", {{"step", adam_.step}, {"lr", adam_.lr}, {"beta1", adam_.beta1}, {"beta2", adam_.beta2}, {"eps", adam_.eps}}},
                  {"rng", {{"seed", cfg_.seed}, {"next_batch", step_}}}};
    if (codec_) a.metadata["codec"] = to_json(codec_->config());
    nlohmann::json log = nlohmann::json::array();
    for (const auto& l : losses_) log.push_back({l.total, l.seg, l.gen});
    a.metadata["loss_log"] = log;
    if (!extra.is_null()) a.metadata["extra"] = extra;
    save_archive(path, a);
  }

  // Without an explicit codec the one embedded in the checkpoint is used.
  static Trainer load(const std::filesystem::path& path, Codec* codec = nullptr) {
    const Archive a = load_archive(path);
    if (a.metadata.value("kind", "") != "maskflow") throw IoError(path.string() + " is not a training checkpoint");
    std::shared_ptr<Codec> owned;
    if (!codec && a.metadata.contains("codec")) {
      owned = std::make_shared<Codec>(codec_config_from_json(a.metadata.at("codec")));
      import_params(owned->params(), a, "codec.");
      codec = owned.get();
    }
    Trainer tr(train_config_from_json(a.metadata.at("config")), codec);
    tr.owned_codec_ = std::move(owned);
    import_params(tr.model_.params(), a, "model.");
    tr.step_ = a.metadata.at("step").get<std::int64_t>();
    const auto& ad = a.metadata.at("adam");
    tr.adam_.step = ad.at("step").get<std::int64_t>();
    tr.adam_.lr = ad.at("lr").get<double>();
    if (tr.adam_.step > 0) {
      for (const auto& [name, p] : tr.model_.params()) {
        if (!p.requires_grad) continue;
        tr.adam_.m.push_back(a.tensors.at("adam.m." + name));
        tr.adam_.v.push_back(a.tensors.at("adam.v." + name));
      }
    }
    for (const auto& l : a.metadata.at("loss_log")) tr.losses_.push_back({l[0].get<double>(), l[1].get<double>(), l[2].get<double>()});
    return tr;
  }

 private:
  TrainConfig cfg_;
  DiT model_;
  Codec* codec_;
  std::shared_ptr<Codec> owned_codec_;
  AdamState adam_;
  std::int64_t step_ = 0;
  std::vector<StepLoss> losses_;
};

// Mean of the first and last `window` entries of a series.
inline std::pair<double, double> smoothed_ends(const std::vector<double>& xs, std::size_t window) {
  if (xs.empty()) throw std::invalid_argument("smoothed_ends: empty series");
  const std::size_t w = std::max<std::size_t>(1, std::min(window, xs.size()));
  double head = 0, tail = 0;
  for (std::size_t i = 0; i < w; ++i) {
    head += xs[i];
    tail += xs[xs.size() - 1 - i];
  }
  return {head / static_cast<double>(w), tail / static_cast<double>(w)};
}

// ---- metrics ----

struct IouCounts {
  std::int64_t intersection = 0;
  std::int64_t union_ = 0;
  double iou() const { return union_ == 0 ? 1.0 : static_cast<double>(intersection) / static_cast<double>(union_); }
};

inline IouCounts iou_counts(const Image8& pred, const Image8& gt) {
  if (pred.height != gt.height || pred.width != gt.width || pred.pixels.size() != gt.pixels.size())
    throw ShapeError("iou: prediction and ground truth differ in size");
  IouCounts c;
  for (std::size_t i = 0; i < pred.pixels.size(); ++i) {
    const bool p = pred.pixels[i] != 0, g = gt.pixels[i] != 0;
    c.intersection += p && g;
    c.union_ += p || g;
  }
  return c;
}

struct EvalReport {
  std::vector<double> ious;
  double miou = 0.0;
  double oiou = 0.0;
  double giou = 0.0;  // same as mIoU under the adopted convention
  double ciou = 0.0;  // same as oIoU
  std::int64_t count = 0;
  std::string config_fingerprint;
};

inline EvalReport summarize_iou(const std::vector<IouCounts>& counts, std::string fp = {}) {
  if (counts.empty()) throw std::invalid_argument("summarize_iou: no samples");
  EvalReport r;
  std::int64_t inter = 0, uni = 0;
  double s = 0;
  for (const auto& c : counts) {
    r.ious.push_back(c.iou());
    s += c.iou();
    inter += c.intersection;
    uni += c.union_;
  }
  r.count = static_cast<std::int64_t>(counts.size());
  r.miou = s / static_cast<double>(r.count);
  r.oiou = uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
  r.giou = r.miou;
  r.ciou = r.oiou;
  r.config_fingerprint = std::move(fp);
  return r;
}

inline nlohmann::json to_json(const EvalReport& r) {
  return {{"miou", r.miou}, {"oiou", r.oiou}, {"giou", r.giou}, {"ciou", r.ciou}, {"count", r.count},
          {"config_fingerprint", r.config_fingerprint}, {"ious", r.ious}};
}

// One-step segmentation of every validation sample, scored against its mask.
inline EvalReport evaluate_segmentation(Trainer& trainer, const LatentData& val, std::uint64_t eps_seed = 0, std::int64_t chunk = 64) {
  std::vector<IouCounts> counts;
  for (std::int64_t start = 0; start < val.size(); start += chunk) {
    const std::int64_t n = std::min(chunk, val.size() - start);
    std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = start + i;
    const std::vector<Condition> q(val.queries.begin() + start, val.queries.begin() + start + n);
    // Noise depends on the sample, not on the chunking.
    Tensor lat = detail::gather_latents(val.image_latents, idx);
    Tensor eps(lat.shape());
    const std::int64_t per = lat.numel() / n;
    for (std::int64_t i = 0; i < n; ++i) {
      const Tensor e = segmentation_noise({per}, derive_stream(eps_seed, static_cast<std::uint64_t>(start + i)));
      std::copy_n(e.ptr(), per, eps.ptr() + i * per);
    }
    const std::vector<double> t(static_cast<std::size_t>(n), 1.0);
    auto& model = trainer.model();
    const bool shortcut = trainer.config().shortcut;
    const Tensor x = one_step_segment([&](const Tensor& xt, double) { return model.velocity(xt, t, q, shortcut ? &lat : nullptr); }, eps);
    const auto preds = trainer.latents_to_masks(x);
    for (std::int64_t i = 0; i < n; ++i) counts.push_back(iou_counts(preds[static_cast<std::size_t>(i)], val.masks[static_cast<std::size_t>(start + i)]));
  }
  return summarize_iou(counts, fingerprint(to_json(trainer.config())));
}

// Held-out generation flow loss (velocity MSE) at logit-normal timesteps.
inline double generation_val_loss(Trainer& trainer, const LatentData& val, std::uint64_t seed = 0, std::int64_t chunk = 64) {
  double total = 0;
  std::int64_t n_all = 0;
  Rng rng(seed, derive_stream(0x6E4, 0));
  for (std::int64_t start = 0; start < val.size(); start += chunk) {
    const std::int64_t n = std::min(chunk, val.size() - start);
    std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
    std::vector<double> t(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
      idx[static_cast<std::size_t>(i)] = start + i;
      t[static_cast<std::size_t>(i)] = sample_gen(rng);
    }
    const Tensor x0 = detail::gather_latents(val.image_latents, idx);
    const Tensor eps = Tensor::randn(x0.shape(), rng);
    const auto path = make_path(x0, eps, t);
    const std::vector<Condition> c(val.captions.begin() + start, val.captions.begin() + start + n);
    const Tensor v = trainer.model().velocity(path.x_t, t, c, nullptr);
    for (std::int64_t i = 0; i < v.numel(); ++i) {
      const double d = v[static_cast<std::size_t>(i)] - path.v_target[static_cast<std::size_t>(i)];
      total += d * d;
    }
    n_all += v.numel();
  }
  return total / static_cast<double>(n_all);
}

struct CodecReport {
  double image_psnr = 0.0;
  double mask_psnr = 0.0;
  double mask_iou = 0.0;  // pooled over all pixels of the set
};

// Round-trip quality of the codec on images and mask renderings.
inline CodecReport evaluate_codec(Codec& codec, const std::vector<Sample>& samples, std::size_t chunk = 128) {
  if (samples.empty()) throw std::invalid_argument("evaluate_codec: no samples");
  double se_img = 0, se_mask = 0;
  std::int64_t n_img = 0, n_mask = 0;
  std::vector<IouCounts> counts;
  for (std::size_t start = 0; start < samples.size(); start += chunk) {
    const std::vector<Sample> part(samples.begin() + static_cast<std::ptrdiff_t>(start),
                                   samples.begin() + static_cast<std::ptrdiff_t>(std::min(samples.size(), start + chunk)));
    for (bool masks : {false, true}) {
      const Tensor x = stack_images(part, masks);
      const Tensor y = codec.decode(codec.encode(x));
      double& se = masks ? se_mask : se_img;
      for (std::int64_t i = 0; i < x.numel(); ++i) {
        const double d = static_cast<double>(x[static_cast<std::size_t>(i)]) - y[static_cast<std::size_t>(i)];
        se += d * d;
      }
      (masks ? n_mask : n_img) += x.numel();
      if (!masks) continue;
      const std::int64_t per = y.numel() / y.dim(0);
      for (std::size_t k = 0; k < part.size(); ++k) {
        Tensor one({y.dim(1), y.dim(2), y.dim(3)});
        std::copy_n(y.ptr() + static_cast<std::int64_t>(k) * per, per, one.ptr());
        counts.push_back(iou_counts(rgb_to_mask(one), part[k].mask));
      }
    }
  }
  auto to_psnr = [](double se, std::int64_t n) { return 10.0 * std::log10(4.0 / std::max(se / static_cast<double>(n), 1e-20)); };
  return {to_psnr(se_img, n_img), to_psnr(se_mask, n_mask), summarize_iou(counts).oiou};
}

// ---- ablations ----

struct AblationArm {
  std::string name;
  std::string factor;  // which setting differs from the base ("" for the base)
  TrainConfig config;
};

inline std::vector<AblationArm> ablation_arms(const TrainConfig& base, const std::vector<std::string>& only = {}) {
  std::vector<AblationArm> arms;
  arms.push_back({"base", "", base});
  for (double a : {0.1, 0.5}) {
    auto c = base;
    c.a = a;
    char name[32];
    std::snprintf(name, sizeof name, "a=%g", a);
    arms.push_back({name, "a", c});
  }
  for (auto s : {Supervision::bce_decoder, Supervision::bce_linear}) {
    auto c = base;
    c.supervision = s;
    arms.push_back({"supervision=" + to_string(s), "supervision", c});
  }
  {
    auto c = base;
    c.ratio_gen = 0;
    arms.push_back({"mix=off", "mix", c});
  }
  {
    auto c = base;
    c.shortcut = false;
    arms.push_back({"shortcut=off", "shortcut", c});
  }
  if (only.empty()) return arms;
  std::vector<AblationArm> kept;
  for (const auto& arm : arms)
    if (std::find(only.begin(), only.end(), arm.name) != only.end()) kept.push_back(arm);
  return kept;
}

struct AblationResult {
  AblationArm arm;
  EvalReport report;
  double final_loss = 0.0;
  double seconds = 0.0;
};

inline std::vector<AblationResult> run_ablation(const std::vector<AblationArm>& arms, Codec& codec, const LatentData& train,
                                                const LatentData& val,
                                                const std::function<void(const std::string&, std::int64_t, const StepLoss&)>& on_step = {}) {
  std::vector<AblationResult> out;
  for (const auto& arm : arms) {
    const auto t0 = std::chrono::steady_clock::now();
    Trainer tr(arm.config, &codec);
    tr.run(train, -1, [&](std::int64_t s, const StepLoss& l) {
      if (on_step) on_step(arm.name, s, l);
    });
    AblationResult r{arm, evaluate_segmentation(tr, val), tr.losses().empty() ? 0.0 : tr.losses().back().total, 0.0};
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.push_back(std::move(r));
  }
  return out;
}

// CSV with one row per arm and its mIoU delta against the base arm.
inline std::string ablation_csv(const std::vector<AblationResult>& results) {
  double base = std::nan("");
  for (const auto& r : results)
    if (r.arm.name == "base") base = r.report.miou;
  std::string text = "arm,factor,a,supervision,mix,shortcut,miou,oiou,delta_miou\n";
  char buf[256];
  for (const auto& r : results) {
    const auto& c = r.arm.config;
    std::snprintf(buf, sizeof buf, "%s,%s,%g,%s,%d:%d,%s,%.6f,%.6f,%.6f\n", r.arm.name.c_str(), r.arm.factor.c_str(), c.a,
                  to_string(c.supervision).c_str(), c.ratio_seg, c.ratio_gen, c.shortcut ? "on" : "off", r.report.miou, r.report.oiou,
                  r.report.miou - base);
    text += buf;
  }
  return text;
}

}  // namespace maskflow
