#pragma once

// Convolutional autoencoder mapping H x W x 3 model-space images to an
// (H/f) x (W/f) x d latent grid. Latents are normalized per channel with
// statistics measured on a calibration set and stored alongside the weights.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

#include "maskflow/checkpoint.hpp"
#include "maskflow/dataset.hpp"
#include "maskflow/ops.hpp"
#include "maskflow/optim.hpp"

namespace maskflow {

struct CodecConfig {
  int image_size = 32;
  int factor = 4;
  int latent_channels = 16;
  int width0 = 32;  // full-resolution feature width
  int width1 = 64;  // downsampled feature width
  bool variational = false;
  double kl_weight = 0.0;

  int latent_size() const { return image_size / factor; }
  int stages() const {
    int s = 0;
    for (int f = factor; f > 1; f /= 2) ++s;
    return s;
  }
  void validate() const {
    if (factor < 1 || (factor & (factor - 1)) != 0) throw std::invalid_argument("codec factor must be a power of two");
    if (image_size % factor != 0) throw std::invalid_argument("codec factor must divide the image size");
    if (latent_channels < 1) throw std::invalid_argument("codec needs at least one latent channel");
  }
};

inline nlohmann::json to_json(const CodecConfig& c) {
  return {{"image_size", c.image_size}, {"factor", c.factor}, {"latent_channels", c.latent_channels}, {"width0", c.width0},
          {"width1", c.width1}, {"variational", c.variational}, {"kl_weight", c.kl_weight}};
}

inline CodecConfig codec_config_from_json(const nlohmann::json& j) {
  CodecConfig c;
  c.image_size = j.value("image_size", c.image_size);
  c.factor = j.value("factor", c.factor);
  c.latent_channels = j.value("latent_channels", c.latent_channels);
  c.width0 = j.value("width0", c.width0);
  c.width1 = j.value("width1", c.width1);
  c.variational = j.value("variational", c.variational);
  c.kl_weight = j.value("kl_weight", c.kl_weight);
  return c;
}

template <typename T>
class BasicCodec {
 public:
  using Var = BasicVar<T>;
  using Tape = BasicTape<T>;
  using Tensor = BasicTensor<T>;

  BasicCodec() : BasicCodec(CodecConfig{}) {}

  explicit BasicCodec(CodecConfig cfg, std::uint64_t seed = 0) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed, derive_stream(0xC0DEC, 0));
    auto conv = [&](const std::string& name, int cin, int cout, double gain) {
      params_.add(name + ".w", Tensor::randn({3, 3, cin, cout}, rng, gain / std::sqrt(9.0 * cin)));
      params_.add(name + ".b", Tensor::zeros({cout}));
    };
    const int d = cfg_.latent_channels;
    const int w0 = cfg_.width0, w1 = cfg_.width1, st = cfg_.stages();
    // Encoder: pixel unshuffle by 2, then stride-2 convolutions for the remaining stages.
    conv("enc.in", st > 0 ? 12 : 3, w0, std::sqrt(2.0));
    for (int s = 1; s < st; ++s) conv("enc.down" + std::to_string(s), s == 1 ? w0 : w1, w1, std::sqrt(2.0));
    conv("enc.out", st > 1 ? w1 : w0, cfg_.variational ? 2 * d : d, 1.0);
    // Decoder mirrors it with 1x1 projections followed by pixel shuffles.
    conv("dec.in", d, st > 1 ? w1 : w0, std::sqrt(2.0));
    for (int s = st - 1; s >= 1; --s) {
      const int cout = s == 1 ? w0 : w1;
      params_.add("dec.up" + std::to_string(s) + ".w", Tensor::randn({w1, 4 * cout}, rng, 2.0 / std::sqrt(w1)));
      params_.add("dec.up" + std::to_string(s) + ".b", Tensor::zeros({4 * cout}));
    }
    conv("dec.mid", w0, w0, std::sqrt(2.0));
    conv("dec.out", w0, st > 0 ? 12 : 3, 1.0);
    params_.add("norm.mean", Tensor::zeros({d}), false);
    params_.add("norm.std", Tensor::ones({d}), false);
  }

  const CodecConfig& config() const { return cfg_; }
  BasicParamStore<T>& params() { return params_; }
  const BasicParamStore<T>& params() const { return params_; }

  // Raw (unnormalized) encoder output; 2d channels (mean, log-variance) when variational.
  Var encode_raw(Tape& tape, const Var& images, bool frozen = false) {
    check_image(images.shape());
    const int st = cfg_.stages();
    Var h = silu(conv(tape, "enc.in", st > 0 ? space_to_depth(images, 2) : images, 1, frozen));
    for (int s = 1; s < st; ++s) h = silu(conv(tape, "enc.down" + std::to_string(s), h, 2, frozen));
    return conv(tape, "enc.out", h, 1, frozen);
  }

  // Decoder from raw latents to tanh-bounded model-space images.
  Var decode_raw(Tape& tape, const Var& latent, bool frozen = false) {
    check_latent(latent.shape());
    const int st = cfg_.stages();
    Var h = silu(conv(tape, "dec.in", latent, 1, frozen));
    for (int s = st - 1; s >= 1; --s) {
      const std::string name = "dec.up" + std::to_string(s);
      h = matmul(h, param(tape, name + ".w", frozen));
      h = silu(depth_to_space(add(h, param(tape, name + ".b", frozen)), 2));
    }
    h = silu(conv(tape, "dec.mid", h, 1, frozen));
    h = conv(tape, "dec.out", h, 1, frozen);
    return tanh(st > 0 ? depth_to_space(h, 2) : h);
  }

  // Decoder from normalized latents; differentiable with respect to `latent`.
  Var decode_normalized(Tape& tape, const Var& latent, bool frozen = true) {
    const Var sd = tape.constant(params_.at("norm.std").value);
    const Var mu = tape.constant(params_.at("norm.mean").value);
    return decode_raw(tape, add(mul(latent, sd), mu), frozen);
  }

  // Normalized latent mean for a batch [B, H, W, 3] or a single image [H, W, 3].
  Tensor encode(const Tensor& images) {
    const bool single = images.ndim() == 3;
    const Tensor batch = single ? images.reshaped({1, images.dim(0), images.dim(1), images.dim(2)}) : images;
    Tape tape;
    Var raw = encode_raw(tape, tape.constant(batch), true);
    const int d = cfg_.latent_channels;
    if (cfg_.variational) raw = slice(raw, -1, 0, d);
    Tensor z = raw.value();
    const auto& mu = params_.at("norm.mean").value;
    const auto& sd = params_.at("norm.std").value;
    for (std::int64_t i = 0; i < z.numel(); ++i) {
      const auto c = static_cast<std::size_t>(i % d);
      z[static_cast<std::size_t>(i)] = (z[static_cast<std::size_t>(i)] - mu[c]) / sd[c];
    }
    if (single) return z.reshaped({z.dim(1), z.dim(2), z.dim(3)});
    return z;
  }

  // Model-space image(s) clamped to [-1, 1].
  Tensor decode(const Tensor& latent) {
    const bool single = latent.ndim() == 3;
    const Tensor batch = single ? latent.reshaped({1, latent.dim(0), latent.dim(1), latent.dim(2)}) : latent;
    Tape tape;
    Tensor out = decode_normalized(tape, tape.constant(batch), true).value();
    for (auto& v : out.data()) v = std::clamp(v, T{-1}, T{1});
    if (single) return out.reshaped({out.dim(1), out.dim(2), out.dim(3)});
    return out;
  }

  // Sets the per-channel normalization from a calibration batch.
  void calibrate(const Tensor& images, std::int64_t chunk = 128) {
    const int d = cfg_.latent_channels;
    params_.at("norm.mean").value = Tensor::zeros({d});
    params_.at("norm.std").value = Tensor::ones({d});
    std::vector<double> s(static_cast<std::size_t>(d), 0.0), s2(static_cast<std::size_t>(d), 0.0);
    std::int64_t count = 0;
    const std::int64_t n = images.dim(0);
    const std::int64_t per = images.numel() / n;
    for (std::int64_t start = 0; start < n; start += chunk) {
      const std::int64_t len = std::min(chunk, n - start);
      Tensor part({len, images.dim(1), images.dim(2), images.dim(3)});
      std::copy_n(images.ptr() + start * per, len * per, part.ptr());
      const Tensor z = encode(part);
      for (std::int64_t i = 0; i < z.numel(); ++i) {
        const auto c = static_cast<std::size_t>(i % d);
        s[c] += z[static_cast<std::size_t>(i)];
        s2[c] += static_cast<double>(z[static_cast<std::size_t>(i)]) * z[static_cast<std::size_t>(i)];
      }
      count += z.numel() / d;
    }
    auto& mu = params_.at("norm.mean").value;
    auto& sd = params_.at("norm.std").value;
    for (std::size_t c = 0; c < static_cast<std::size_t>(d); ++c) {
      const double m = s[c] / count;
      const double var = std::max(s2[c] / count - m * m, 1e-12);
      mu[c] = static_cast<T>(m);
      sd[c] = static_cast<T>(std::sqrt(var));
    }
  }

  template <typename U>
  BasicCodec<U> cast() const {
    BasicCodec<U> out(cfg_);
    for (const auto& [name, p] : params_) out.params().at(name).value = p.value.template cast<U>();
    return out;
  }

 private:
  Var param(Tape& tape, const std::string& name, bool frozen) {
    auto& p = params_.at(name);
    return frozen ? tape.constant(p.value) : tape.param(p);
  }

  Var conv(Tape& tape, const std::string& name, const Var& x, int stride, bool frozen) {
    return add(conv2d(x, param(tape, name + ".w", frozen), stride), param(tape, name + ".b", frozen));
  }

  void check_image(const Shape& s) const {
    if (s.size() != 4 || s[3] != 3 || s[1] % cfg_.factor != 0 || s[2] % cfg_.factor != 0)
      throw ShapeError("codec: image batch " + to_string(s) + " is not [B, H, W, 3] with H, W divisible by " + std::to_string(cfg_.factor));
  }
  void check_latent(const Shape& s) const {
    if (s.size() != 4 || s[3] != cfg_.latent_channels || s[1] != cfg_.latent_size() || s[2] != cfg_.latent_size())
      throw ShapeError("codec: latent " + to_string(s) + " does not match [B, " + std::to_string(cfg_.latent_size()) + ", " +
                       std::to_string(cfg_.latent_size()) + ", " + std::to_string(cfg_.latent_channels) + "]");
  }

  CodecConfig cfg_;
  BasicParamStore<T> params_;
};

using Codec = BasicCodec<float>;

inline void save_codec(const std::filesystem::path& path, const Codec& codec, const nlohmann::json& extra = {}) {
  Archive a;
  export_params(codec.params(), a);
  a.metadata["kind"] = "codec";
  a.metadata["config"] = to_json(codec.config());
  if (!extra.is_null()) a.metadata["training"] = extra;
  save_archive(path, a);
}

inline Codec load_codec(const std::filesystem::path& path) {
  const Archive a = load_archive(path);
  if (a.metadata.value("kind", "") != "codec") throw IoError(path.string() + " is not a codec checkpoint");
  Codec codec(codec_config_from_json(a.metadata.at("config")));
  import_params(codec.params(), a);
  return codec;
}

// Stacks model-space images of the given samples into [N, H, W, 3]; masks are rendered as RGB.
inline Tensor stack_images(const std::vector<Sample>& samples, bool masks) {
  if (samples.empty()) throw std::invalid_argument("stack_images: no samples");
  const auto& first = samples.front().image;
  Tensor out({static_cast<std::int64_t>(samples.size()), first.height, first.width, 3});
  const std::int64_t per = static_cast<std::int64_t>(first.height) * first.width * 3;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Tensor t = to_model_space(masks ? mask_to_rgb(samples[i].mask) : samples[i].image);
    std::copy_n(t.ptr(), per, out.ptr() + static_cast<std::int64_t>(i) * per);
  }
  return out;
}

struct CodecTrainLog {
  std::vector<double> loss;  // per-step reconstruction MSE
};

struct CodecTrainOptions {
  int steps = 3000;
  int batch = 32;
  double lr = 2e-3;
  double lr_min = 1e-4;
  std::uint64_t seed = 0;
  int calibration = 1024;
  std::function<void(int, double)> on_step;
};

// Trains on an even mix of natural images and mask renderings, then
// calibrates latent normalization on up to `calibration` images of the same mix.
inline CodecTrainLog train_codec(Codec& codec, const std::vector<Sample>& data, const CodecTrainOptions& opt) {
  if (data.empty()) throw std::invalid_argument("train_codec: empty dataset");
  CodecTrainLog log;
  if (opt.steps == 0) return log;
  const Tensor images = stack_images(data, false);
  const Tensor masks = stack_images(data, true);
  const std::int64_t n = images.dim(0), per = images.numel() / n;
  AdamState adam;
  adam.lr = opt.lr;
  const int d = codec.config().latent_channels;
  for (int step = 0; step < opt.steps; ++step) {
    Rng rng(opt.seed, derive_stream(0xC0DEC, 1), static_cast<std::uint64_t>(step) << 20);
    Tensor batch({opt.batch, images.dim(1), images.dim(2), 3});
    for (int b = 0; b < opt.batch; ++b) {
      const auto idx = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(n)));
      const Tensor& src = (b % 2 == 0) ? images : masks;
      std::copy_n(src.ptr() + idx * per, per, batch.ptr() + b * per);
    }
    codec.params().zero_grad();
    Tape tape;
    const Var x = tape.constant(batch);
    Var z = codec.encode_raw(tape, x);
    Var kl;
    if (codec.config().variational) {
      const Var mu = slice(z, -1, 0, d);
      const Var logvar = slice(z, -1, d, d);
      const Var eps = tape.constant(Tensor::randn(mu.shape(), rng));
      z = add(mu, mul(exp(scale(logvar, 0.5f)), eps));
      // 0.5 * mean(mu^2 + exp(logvar) - 1 - logvar)
      kl = scale(mean(sub(add(square(mu), exp(logvar)), add_scalar(logvar, 1.0f))), 0.5f);
    }
    const Var recon = codec.decode_raw(tape, z);
    Var loss = mse_loss(recon, x);
    const double rec = loss.value()[0];
    if (kl.valid() && codec.config().kl_weight > 0) loss = add(loss, scale(kl, static_cast<float>(codec.config().kl_weight)));
    if (!std::isfinite(loss.value()[0])) throw std::runtime_error("codec training diverged at step " + std::to_string(step));
    tape.backward(loss);
    const double progress = opt.steps > 1 ? static_cast<double>(step) / (opt.steps - 1) : 0.0;
    adam.lr = opt.lr_min + 0.5 * (opt.lr - opt.lr_min) * (1.0 + std::cos(std::numbers::pi * progress));
    adam_step(codec.params(), adam);
    log.loss.push_back(rec);
    if (opt.on_step) opt.on_step(step, rec);
  }
  // Calibration mix: alternate images and masks.
  const std::int64_t m = std::min<std::int64_t>(opt.calibration, 2 * n);
  Tensor calib({m, images.dim(1), images.dim(2), 3});
  for (std::int64_t i = 0; i < m; ++i) std::copy_n((i % 2 == 0 ? images : masks).ptr() + (i / 2 % n) * per, per, calib.ptr() + i * per);
  codec.calibrate(calib);
  return log;
}

inline double psnr(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_mismatch("psnr", a.shape(), b.shape());
  double mse = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    const double d = a[static_cast<std::size_t>(i)] - b[static_cast<std::size_t>(i)];
    mse += d * d;
  }
  mse /= static_cast<double>(a.numel());
  // Peak-to-peak range of model space is 2.
  return 10.0 * std::log10(4.0 / std::max(mse, 1e-20));
}

}  // namespace maskflow
