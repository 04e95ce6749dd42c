#pragma once

// Small diffusion transformer over latent-grid tokens.
//
// Sequence: [noisy tokens | clean tokens] where the clean block (segmentation
// only) is the image latent with timestep 0. Each block applies adaLN-zero
// modulated self-attention, cross-attention to condition tokens and a SiLU
// feed-forward layer; modulation is computed per token from its timestep.

#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "maskflow/checkpoint.hpp"
#include "maskflow/ops.hpp"

namespace maskflow {

struct ModelConfig {
  int dim = 128;
  int depth = 4;
  int heads = 4;
  int grid = 8;       // latent grid is grid x grid
  int channels = 16;  // latent channels
  int vocab = 32;
  int cond_dim = 128;
  int max_cond = 8;
  int mlp_ratio = 4;
  int time_freqs = 64;

  int tokens() const { return grid * grid; }
  void validate() const {
    if (dim <= 0 || heads <= 0 || dim % heads != 0) throw std::invalid_argument("model dim must be a positive multiple of heads");
    if (depth < 0 || grid <= 0 || channels <= 0 || vocab <= 0 || cond_dim <= 0 || max_cond <= 0 || mlp_ratio <= 0 || time_freqs <= 0)
      throw std::invalid_argument("model config has a non-positive size");
  }
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"dim", c.dim},     {"depth", c.depth},       {"heads", c.heads},       {"grid", c.grid},
          {"channels", c.channels}, {"vocab", c.vocab}, {"cond_dim", c.cond_dim}, {"max_cond", c.max_cond},
          {"mlp_ratio", c.mlp_ratio}, {"time_freqs", c.time_freqs}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.dim = j.value("dim", c.dim);
  c.depth = j.value("depth", c.depth);
  c.heads = j.value("heads", c.heads);
  c.grid = j.value("grid", c.grid);
  c.channels = j.value("channels", c.channels);
  c.vocab = j.value("vocab", c.vocab);
  c.cond_dim = j.value("cond_dim", c.cond_dim);
  c.max_cond = j.value("max_cond", c.max_cond);
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
  c.time_freqs = j.value("time_freqs", c.time_freqs);
  c.validate();
  return c;
}

// Condition token ids; `null` selects the single learned null token.
struct Condition {
  std::vector<int> ids;
  bool null = false;

  static Condition null_condition() { return {{}, true}; }
  friend bool operator==(const Condition&, const Condition&) = default;
};

// [B, h, w, d] latent <-> [B, h*w, d] tokens in row-major cell order.
template <typename T>
BasicTensor<T> patchify(const BasicTensor<T>& latent) {
  if (latent.ndim() != 4) throw ShapeError("patchify expects [B, h, w, d], got " + to_string(latent.shape()));
  return latent.reshaped({latent.dim(0), latent.dim(1) * latent.dim(2), latent.dim(3)});
}

template <typename T>
BasicTensor<T> unpatchify(const BasicTensor<T>& tokens, std::int64_t h, std::int64_t w) {
  if (tokens.ndim() != 3 || tokens.dim(1) != h * w)
    throw ShapeError("unpatchify: " + to_string(tokens.shape()) + " is not " + std::to_string(h * w) + " tokens");
  return tokens.reshaped({tokens.dim(0), h, w, tokens.dim(2)});
}

// Sinusoidal features of t * 1000 at geometrically spaced frequencies: [cos | sin].
template <typename T>
BasicTensor<T> timestep_features(const std::vector<double>& t, int freqs) {
  BasicTensor<T> out({static_cast<std::int64_t>(t.size()), 2 * freqs});
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (!(t[i] >= 0.0 && t[i] <= 1.0)) throw std::domain_error("time_embed: t must lie in [0, 1], got " + std::to_string(t[i]));
    for (int k = 0; k < freqs; ++k) {
      const double f = std::exp(-std::log(10000.0) * k / freqs);
      const double arg = t[i] * 1000.0 * f;
      out[i * 2 * freqs + k] = static_cast<T>(std::cos(arg));
      out[i * 2 * freqs + freqs + k] = static_cast<T>(std::sin(arg));
    }
  }
  return out;
}

// 2-D sin-cos codes for a grid x grid token layout, repeated `copies` times so
// the noisy and clean blocks start from the same cell code. Half of the
// channels encode the row, half the column.
template <typename T>
BasicTensor<T> grid_positions(int grid, int dim, int copies) {
  const int quarter = dim / 4;
  BasicTensor<T> out({static_cast<std::int64_t>(copies) * grid * grid, dim});
  for (int c = 0; c < copies; ++c)
    for (int r = 0; r < grid; ++r)
      for (int q = 0; q < grid; ++q) {
        T* row = out.ptr() + (static_cast<std::int64_t>(c) * grid * grid + r * grid + q) * dim;
        for (int k = 0; k < quarter; ++k) {
          const double w = std::pow(10000.0, -static_cast<double>(k) / std::max(quarter, 1));
          row[k] = static_cast<T>(std::sin(r * w));
          row[quarter + k] = static_cast<T>(std::cos(r * w));
          row[2 * quarter + k] = static_cast<T>(std::sin(q * w));
          row[3 * quarter + k] = static_cast<T>(std::cos(q * w));
        }
      }
  return out;
}

template <typename T>
class BasicDiT {
 public:
  using Var = BasicVar<T>;
  using Tape = BasicTape<T>;
  using Tensor = BasicTensor<T>;

  explicit BasicDiT(ModelConfig cfg = {}, std::uint64_t seed = 0) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed, derive_stream(0xD17, 0));
    const int D = cfg_.dim, Dc = cfg_.cond_dim, F = 2 * cfg_.time_freqs, M = cfg_.mlp_ratio * D;
    linear("patch", cfg_.channels, D, rng);
    params_.add("pos", grid_positions<T>(cfg_.grid, D, 2));
    linear("time.fc1", F, D, rng);
    linear("time.fc2", D, D, rng);
    params_.add("cond.table", Tensor::randn({cfg_.vocab, Dc}, rng, 1.0));
    params_.add("cond.pos", Tensor::randn({cfg_.max_cond, Dc}, rng, 0.02));
    params_.add("cond.null", Tensor::randn({1, Dc}, rng, 1.0));
    for (int b = 0; b < cfg_.depth; ++b) {
      const std::string p = block_name(b);
      zeros(p + "ada", D, 6 * D);
      linear(p + "attn.qkv", D, 3 * D, rng);
      linear(p + "attn.out", D, D, rng);
      linear(p + "cross.q", D, D, rng);
      linear(p + "cross.kv", Dc, 2 * D, rng);
      zeros(p + "cross.out", D, D);
      linear(p + "mlp.fc1", D, M, rng);
      linear(p + "mlp.fc2", M, D, rng);
    }
    zeros("final.ada", D, 2 * D);
    zeros("final.out", D, cfg_.channels);
  }

  const ModelConfig& config() const { return cfg_; }
  BasicParamStore<T>& params() { return params_; }
  const BasicParamStore<T>& params() const { return params_; }

  // Timestep embedding [n, D] through the two-layer perceptron.
  Var time_embed(Tape& tape, const std::vector<double>& t, bool frozen = false) {
    const Var feats = tape.constant(timestep_features<T>(t, cfg_.time_freqs));
    return dense(tape, "time.fc2", silu(dense(tape, "time.fc1", feats, frozen)), frozen);
  }

  // Condition tokens [B, L, Dc] (L = longest condition in the batch) and an
  // additive key mask [B, L] that hides padding.
  std::pair<Var, Tensor> embed_condition(Tape& tape, const std::vector<Condition>& cond, bool frozen = false) {
    if (cond.empty()) throw std::invalid_argument("embed_condition: empty batch");
    std::int64_t len = 1;
    for (const auto& c : cond) {
      if (!c.null && c.ids.empty()) throw std::invalid_argument("embed_condition: empty non-null condition");
      if (static_cast<int>(c.ids.size()) > cfg_.max_cond)
        throw std::invalid_argument("embed_condition: condition of length " + std::to_string(c.ids.size()) + " exceeds " +
                                    std::to_string(cfg_.max_cond));
      for (int id : c.ids)
        if (id < 0 || id >= cfg_.vocab) throw std::out_of_range("embed_condition: token id " + std::to_string(id) + " outside vocabulary");
      if (!c.null) len = std::max<std::int64_t>(len, static_cast<std::int64_t>(c.ids.size()));
    }
    const auto B = static_cast<std::int64_t>(cond.size());
    // Row V of the extended table is the null token; row max_cond of the
    // positional table is a zero row used by null and padding slots.
    std::vector<std::int64_t> tok, pos;
    Tensor mask({B, len}, T{0});
    for (std::int64_t b = 0; b < B; ++b) {
      const auto& c = cond[static_cast<std::size_t>(b)];
      for (std::int64_t j = 0; j < len; ++j) {
        if (c.null) {
          tok.push_back(j == 0 ? cfg_.vocab : 0);
          pos.push_back(cfg_.max_cond);
          if (j > 0) mask[static_cast<std::size_t>(b * len + j)] = T(-1e9);
        } else if (j < static_cast<std::int64_t>(c.ids.size())) {
          tok.push_back(c.ids[static_cast<std::size_t>(j)]);
          pos.push_back(j);
        } else {
          tok.push_back(0);
          pos.push_back(cfg_.max_cond);
          mask[static_cast<std::size_t>(b * len + j)] = T(-1e9);
        }
      }
    }
    const Var table = concat<T>({param(tape, "cond.table", frozen), param(tape, "cond.null", frozen)}, 0);
    const Var ptable = concat<T>({param(tape, "cond.pos", frozen), tape.constant(Tensor::zeros({1, cfg_.cond_dim}))}, 0);
    const Var e = add(gather_rows(table, tok), gather_rows(ptable, pos));
    return {reshape(e, {B, len, cfg_.cond_dim}), std::move(mask)};
  }

  // Velocity for noisy latents x_t [B, h, w, d] at per-sample t; `clean` is
  // the image latent for segmentation, nullptr for generation.
  Var forward(Tape& tape, const Tensor& x_t, const std::vector<double>& t, const std::vector<Condition>& cond,
              const Tensor* clean, bool frozen = false) {
    const int D = cfg_.dim, hw = cfg_.tokens();
    const Shape expect{x_t.ndim() > 0 ? x_t.dim(0) : 0, cfg_.grid, cfg_.grid, cfg_.channels};
    if (x_t.shape() != expect) shape_mismatch("dit forward", x_t.shape(), expect);
    const std::int64_t B = x_t.dim(0);
    if (static_cast<std::int64_t>(t.size()) != B || static_cast<std::int64_t>(cond.size()) != B)
      throw ShapeError("dit forward: batch of " + std::to_string(B) + " with " + std::to_string(t.size()) + " timesteps and " +
                       std::to_string(cond.size()) + " conditions");
    if (clean && clean->shape() != x_t.shape()) shape_mismatch("dit forward (clean latent)", clean->shape(), x_t.shape());
    const std::int64_t L = clean ? 2 * hw : hw;

    const Var patch_w = param(tape, "patch.w", frozen), patch_b = param(tape, "patch.b", frozen);
    std::vector<Var> parts{add(matmul(tape.constant(patchify(x_t)), patch_w), patch_b)};
    if (clean) parts.push_back(add(matmul(tape.constant(patchify(*clean)), patch_w), patch_b));
    Var x = parts.size() == 1 ? parts[0] : concat(parts, 1);
    x = add(x, slice(param(tape, "pos", frozen), 0, 0, L));

    // Embeddings are computed once per distinct timestep (each sample's t, then
    // 0 for clean tokens) and gathered per token.
    std::vector<double> tv(t);
    tv.push_back(0.0);
    const Var temb = silu(time_embed(tape, tv, frozen));
    std::vector<std::int64_t> rows(static_cast<std::size_t>(B * L));
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t l = 0; l < L; ++l) rows[static_cast<std::size_t>(b * L + l)] = l < hw ? b : B;
    last_token_t_.resize(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) last_token_t_[i] = tv[static_cast<std::size_t>(rows[i])];
    auto modulation = [&](const std::string& name, int parts_n) {
      const Var m = dense(tape, name, temb, frozen);  // [B + 1, parts_n * D]
      return reshape(gather_rows(m, rows), {B, L, static_cast<std::int64_t>(parts_n) * D});
    };
    auto chunk = [&](const Var& m, int k) { return slice(m, -1, static_cast<std::int64_t>(k) * D, D); };
    auto modulate = [&](const Var& h, const Var& shift, const Var& scl) { return add(mul(h, add_scalar(scl, T{1})), shift); };

    const auto [ctok, cmask] = embed_condition(tape, cond, frozen);
    for (int blk = 0; blk < cfg_.depth; ++blk) {
      const std::string p = block_name(blk);
      const Var mod = modulation(p + "ada", 6);
      // Self-attention.
      Var h = modulate(layer_norm(x), chunk(mod, 0), chunk(mod, 1));
      const Var qkv = dense(tape, p + "attn.qkv", h, frozen);
      h = attention(slice(qkv, -1, 0, D), slice(qkv, -1, D, D), slice(qkv, -1, 2 * D, D), nullptr);
      x = add(x, mul(chunk(mod, 2), dense(tape, p + "attn.out", h, frozen)));
      // Cross-attention to the condition.
      const Var q = dense(tape, p + "cross.q", layer_norm(x), frozen);
      const Var kv = dense(tape, p + "cross.kv", ctok, frozen);
      h = attention(q, slice(kv, -1, 0, D), slice(kv, -1, D, D), &cmask);
      x = add(x, dense(tape, p + "cross.out", h, frozen));
      // Feed-forward.
      h = modulate(layer_norm(x), chunk(mod, 3), chunk(mod, 4));
      h = dense(tape, p + "mlp.fc2", silu(dense(tape, p + "mlp.fc1", h, frozen)), frozen);
      x = add(x, mul(chunk(mod, 5), h));
    }
    const Var fmod = modulation("final.ada", 2);
    Var out = modulate(layer_norm(x), chunk(fmod, 0), chunk(fmod, 1));
    if (clean) out = slice(out, 1, 0, hw);  // clean-token outputs are discarded
    out = dense(tape, "final.out", out, frozen);
    return reshape(out, {B, cfg_.grid, cfg_.grid, cfg_.channels});
  }

  // Per-token timesteps [B * L] used by the most recent forward pass.
  const std::vector<double>& last_token_timesteps() const { return last_token_t_; }

  // Inference without gradients.
  Tensor velocity(const Tensor& x_t, const std::vector<double>& t, const std::vector<Condition>& cond, const Tensor* clean) {
    Tape tape;
    return forward(tape, x_t, t, cond, clean, true).value();
  }

  template <typename U>
  BasicDiT<U> cast() const {
    BasicDiT<U> out(cfg_);
    for (const auto& [name, p] : params_) out.params().at(name).value = p.value.template cast<U>();
    return out;
  }

 private:
  static std::string block_name(int b) { return "block" + std::to_string(b) + "."; }

  void linear(const std::string& name, int in, int out, Rng& rng) {
    params_.add(name + ".w", Tensor::randn({in, out}, rng, 1.0 / std::sqrt(static_cast<double>(in))));
    params_.add(name + ".b", Tensor::zeros({out}));
  }
  void zeros(const std::string& name, int in, int out) {
    params_.add(name + ".w", Tensor::zeros({in, out}));
    params_.add(name + ".b", Tensor::zeros({out}));
  }

  Var param(Tape& tape, const std::string& name, bool frozen) {
    auto& p = params_.at(name);
    return frozen ? tape.constant(p.value) : tape.param(p);
  }
  Var dense(Tape& tape, const std::string& name, const Var& x, bool frozen) {
    return add(matmul(x, param(tape, name + ".w", frozen)), param(tape, name + ".b", frozen));
  }

  // Multi-head scaled dot-product attention; q [B, Lq, D], k/v [B, Lk, D],
  // optional additive key mask [B, Lk].
  Var attention(const Var& q, const Var& k, const Var& v, const Tensor* key_mask) {
    const std::int64_t B = q.dim(0), Lq = q.dim(1), Lk = k.dim(1), H = cfg_.heads, Dh = cfg_.dim / cfg_.heads;
    auto split = [&](const Var& a, std::int64_t len) {
      return reshape(permute(reshape(a, {B, len, H, Dh}), {0, 2, 1, 3}), {B * H, len, Dh});
    };
    Var s = scale(bmm(split(q, Lq), split(k, Lk), false, true), static_cast<T>(1.0 / std::sqrt(static_cast<double>(Dh))));
    if (key_mask) {
      Tensor m({B * H, 1, Lk});
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t hh = 0; hh < H; ++hh)
          std::copy_n(key_mask->ptr() + b * Lk, Lk, m.ptr() + (b * H + hh) * Lk);
      s = add(s, q.tape().constant(std::move(m)));
    }
    const Var o = bmm(softmax_last(s), split(v, Lk));
    return reshape(permute(reshape(o, {B, H, Lq, Dh}), {0, 2, 1, 3}), {B, Lq, cfg_.dim});
  }

  ModelConfig cfg_;
  BasicParamStore<T> params_;
  std::vector<double> last_token_t_;
};

using DiT = BasicDiT<float>;

}  // namespace maskflow
