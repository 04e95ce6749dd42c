#pragma once

// Rectified-flow path, supervision heads, Euler sampling with classifier-free
// guidance, and one-step segmentation.
//
// Path: x_t = t * eps + (1 - t) * x0, velocity v = x0 - eps, so x0 = x_t + t * v.
// t = 1 is pure noise.

#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "maskflow/codec.hpp"

namespace maskflow {

enum class Task { generation, segmentation };

enum class Supervision { mse_latent, bce_decoder, bce_linear };

inline std::string to_string(Supervision s) {
  switch (s) {
    case Supervision::mse_latent: return "mse";
    case Supervision::bce_decoder: return "bce_decoder";
    case Supervision::bce_linear: return "bce_linear";
  }
  return "?";
}

inline Supervision parse_supervision(const std::string& s) {
  if (s == "mse" || s == "mse_latent" || s == "MSE_LATENT") return Supervision::mse_latent;
  if (s == "bce_decoder" || s == "BCE_DECODER") return Supervision::bce_decoder;
  if (s == "bce_linear" || s == "BCE_LINEAR") return Supervision::bce_linear;
  throw std::invalid_argument("unknown supervision '" + s + "' (expected mse, bce_decoder or bce_linear)");
}

template <typename T>
struct FlowPath {
  BasicTensor<T> x_t;
  BasicTensor<T> v_target;
};

namespace detail {

inline void check_t(double t, const char* fn) {
  if (!(t >= 0.0 && t <= 1.0)) throw std::domain_error(std::string(fn) + ": t must lie in [0, 1], got " + std::to_string(t));
}

}  // namespace detail

// Per-sample timesteps over the leading axis of x0.
template <typename T>
FlowPath<T> make_path(const BasicTensor<T>& x0, const BasicTensor<T>& eps, const std::vector<double>& t) {
  if (x0.shape() != eps.shape()) shape_mismatch("make_path", x0.shape(), eps.shape());
  if (x0.ndim() == 0 || static_cast<std::int64_t>(t.size()) != x0.dim(0))
    throw ShapeError("make_path: " + std::to_string(t.size()) + " timesteps for batch " + to_string(x0.shape()));
  FlowPath<T> p{BasicTensor<T>(x0.shape()), BasicTensor<T>(x0.shape())};
  const std::int64_t per = x0.numel() / x0.dim(0);
  for (std::size_t b = 0; b < t.size(); ++b) {
    detail::check_t(t[b], "make_path");
    const T tb = static_cast<T>(t[b]), sb = static_cast<T>(1.0 - t[b]);
    for (std::int64_t i = 0; i < per; ++i) {
      const auto k = static_cast<std::size_t>(static_cast<std::int64_t>(b) * per + i);
      p.x_t[k] = tb * eps[k] + sb * x0[k];
      p.v_target[k] = x0[k] - eps[k];
    }
  }
  return p;
}

// Single timestep shared by the whole tensor.
template <typename T>
FlowPath<T> make_path(const BasicTensor<T>& x0, const BasicTensor<T>& eps, double t) {
  if (x0.shape() != eps.shape()) shape_mismatch("make_path", x0.shape(), eps.shape());
  const auto flat = x0.reshaped({1, x0.numel()});
  auto p = make_path(flat, eps.reshaped({1, eps.numel()}), std::vector<double>{t});
  return {p.x_t.reshaped(x0.shape()), p.v_target.reshaped(x0.shape())};
}

// x0 = x_t + t * v.
template <typename T>
BasicTensor<T> predict_x0(const BasicTensor<T>& x_t, double t, const BasicTensor<T>& v) {
  if (x_t.shape() != v.shape()) shape_mismatch("predict_x0", x_t.shape(), v.shape());
  detail::check_t(t, "predict_x0");
  BasicTensor<T> out(x_t.shape());
  const T tt = static_cast<T>(t);
  for (std::int64_t i = 0; i < out.numel(); ++i) out[static_cast<std::size_t>(i)] = x_t[static_cast<std::size_t>(i)] + tt * v[static_cast<std::size_t>(i)];
  return out;
}

// Differentiable x0 estimate for a batch with per-sample timesteps; x_t is data.
template <typename T>
BasicVar<T> predict_x0(const BasicTensor<T>& x_t, const std::vector<double>& t, const BasicVar<T>& v) {
  if (x_t.shape() != v.shape()) shape_mismatch("predict_x0", x_t.shape(), v.shape());
  if (static_cast<std::int64_t>(t.size()) != x_t.dim(0)) throw ShapeError("predict_x0: timestep count does not match batch");
  Shape ts(x_t.ndim(), 1);
  ts[0] = x_t.dim(0);
  BasicTensor<T> tt(ts);
  for (std::size_t b = 0; b < t.size(); ++b) {
    detail::check_t(t[b], "predict_x0");
    tt[b] = static_cast<T>(t[b]);
  }
  auto& tape = v.tape();
  return add(tape.constant(x_t), mul(v, tape.constant(std::move(tt))));
}

// Stacked binary mask targets [B, H, W, 1] with values in {0, 1}.
template <typename T>
BasicTensor<T> mask_targets(const std::vector<Image8>& masks) {
  if (masks.empty()) throw std::invalid_argument("mask_targets: no masks");
  const int h = masks[0].height, w = masks[0].width;
  BasicTensor<T> out({static_cast<std::int64_t>(masks.size()), h, w, 1});
  std::size_t k = 0;
  for (const auto& m : masks) {
    if (m.height != h || m.width != w || m.channels != 1) throw ShapeError("mask_targets: masks differ in size");
    for (auto p : m.pixels) out[k++] = p ? T{1} : T{0};
  }
  return out;
}

// Pixel-space BCE on an image batch [B, H, W, C]: logit = scale * channel-mean + bias.
template <typename T>
BasicVar<T> bce_pixel_loss(const BasicVar<T>& img, const BasicTensor<T>& targets, const BasicVar<T>& scale, const BasicVar<T>& bias) {
  if (img.value().ndim() != 4 || targets.ndim() != 4 || img.dim(0) != targets.dim(0) || img.dim(1) != targets.dim(1) ||
      img.dim(2) != targets.dim(2))
    throw ShapeError("bce_decoder_loss: decoded " + to_string(img.shape()) + " vs mask " + to_string(targets.shape()));
  return bce_with_logits(add(mul(mean_last(img), scale), bias), targets);
}

// BCE in pixel space through the frozen decoder.
template <typename T>
BasicVar<T> bce_decoder_loss(const BasicVar<T>& x0_latent, const BasicTensor<T>& targets, BasicCodec<T>& codec,
                             const BasicVar<T>& scale, const BasicVar<T>& bias) {
  return bce_pixel_loss(codec.decode_normalized(x0_latent.tape(), x0_latent, true), targets, scale, bias);
}

// Per-cell linear map d -> f*f logits, unshuffled onto the pixel grid.
template <typename T>
BasicVar<T> linear_head_logits(const BasicVar<T>& x0_latent, const BasicVar<T>& weight, const BasicVar<T>& bias, int factor) {
  const auto d = x0_latent.dim(-1);
  if (weight.value().ndim() != 2 || weight.dim(0) != d || weight.dim(1) != static_cast<std::int64_t>(factor) * factor)
    throw ShapeError("linear head " + to_string(weight.shape()) + " does not map " + std::to_string(d) + " channels to " +
                     std::to_string(factor * factor) + " pixels");
  return depth_to_space(add(matmul(x0_latent, weight), bias), factor);
}

template <typename T>
BasicVar<T> bce_linear_loss(const BasicVar<T>& x0_latent, const BasicTensor<T>& targets, const BasicVar<T>& weight,
                            const BasicVar<T>& bias, int factor) {
  const auto logits = linear_head_logits(x0_latent, weight, bias, factor);
  if (logits.shape() != targets.shape()) shape_mismatch("bce_linear_loss", logits.shape(), targets.shape());
  return bce_with_logits(logits, targets);
}

// Velocity field: (x, t, conditional) -> v. The unconditional branch is only
// queried for guidance weights other than 1.
using VelocityFn = std::function<Tensor(const Tensor& x, double t, bool conditional)>;

// Euler integration from t = 1 (x = eps) to t = 0 with uniform steps.
inline Tensor euler_sample(const VelocityFn& model, const Tensor& eps, int steps, double guidance_w = 3.0) {
  if (steps < 1) throw std::invalid_argument("euler_sample: steps must be at least 1");
  if (!(guidance_w >= 0.0)) throw std::invalid_argument("euler_sample: guidance weight must be non-negative");
  Tensor x = eps;
  const double dt = 1.0 / steps;
  for (int k = steps; k >= 1; --k) {
    const double t = k * dt;
    Tensor v = model(x, t, true);
    if (guidance_w != 1.0) {
      const Tensor vu = model(x, t, false);
      const auto w = static_cast<float>(guidance_w);
      for (std::int64_t i = 0; i < v.numel(); ++i) {
        const auto j = static_cast<std::size_t>(i);
        v[j] = vu[j] + w * (v[j] - vu[j]);
      }
    }
    if (v.shape() != x.shape()) shape_mismatch("euler_sample", x.shape(), v.shape());
    const auto fdt = static_cast<float>(dt);
    for (std::int64_t i = 0; i < x.numel(); ++i) x[static_cast<std::size_t>(i)] += fdt * v[static_cast<std::size_t>(i)];
  }
  return x;
}

inline Tensor euler_sample(const VelocityFn& model, const Shape& shape, Rng& rng, int steps, double guidance_w = 3.0) {
  return euler_sample(model, Tensor::randn(shape, rng), steps, guidance_w);
}

// Noise for one-step inference; the default is the fixed zero-seed stream.
inline Tensor segmentation_noise(const Shape& shape, std::uint64_t seed = 0) {
  Rng rng(seed, derive_stream(0x5E6, 0));
  return Tensor::randn(shape, rng);
}

// x_mask = eps + v(eps, 1): a single conditional forward pass, no guidance.
inline Tensor one_step_segment(const std::function<Tensor(const Tensor& x, double t)>& velocity, const Tensor& eps) {
  const Tensor v = velocity(eps, 1.0);
  return predict_x0(eps, 1.0, v);
}

// Binary mask from a predicted mask latent via the codec decoder.
inline Image8 latent_to_mask(Codec& codec, const Tensor& latent) { return rgb_to_mask(codec.decode(latent)); }

// Binary mask from linear-head logits (sigmoid > 0.5).
inline Image8 linear_head_mask(const Tensor& x0_latent, const Tensor& weight, const Tensor& bias, int factor) {
  Tape tape;
  const Tensor batch = x0_latent.ndim() == 3 ? x0_latent.reshaped({1, x0_latent.dim(0), x0_latent.dim(1), x0_latent.dim(2)}) : x0_latent;
  const Tensor logits = linear_head_logits(tape.constant(batch), tape.constant(weight), tape.constant(bias), factor).value();
  Image8 m{static_cast<int>(logits.dim(1)), static_cast<int>(logits.dim(2)), 1,
           std::vector<std::uint8_t>(static_cast<std::size_t>(logits.dim(1) * logits.dim(2)))};
  for (std::size_t i = 0; i < m.pixels.size(); ++i) m.pixels[i] = logits[i] > 0.0f ? 255 : 0;
  return m;
}

}  // namespace maskflow
