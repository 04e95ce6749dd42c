#pragma once

// Linear structure of mask latents: one-component PCA and a ridge
// least-squares probe evaluated along the noising path.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "maskflow/codec.hpp"

namespace maskflow {

// Rows are latent cells (N*h*w), columns latent channels.
struct AnalysisMatrix {
  std::int64_t n = 0, h = 0, w = 0, d = 0;
  std::vector<double> x;
  std::vector<std::uint8_t> labels;

  std::int64_t rows() const { return static_cast<std::int64_t>(labels.size()); }
  const double* row(std::int64_t r) const { return x.data() + r * d; }
};

// Cell labels by majority vote over factor x factor pixel blocks; ties go to foreground.
inline std::vector<std::uint8_t> downsample_mask(const Image8& mask, int factor) {
  if (factor < 1 || mask.height % factor != 0 || mask.width % factor != 0)
    throw std::invalid_argument("downsample_mask: factor does not divide the mask size");
  const int h = mask.height / factor, w = mask.width / factor;
  std::vector<std::uint8_t> out(static_cast<std::size_t>(h * w));
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int on = 0;
      for (int dy = 0; dy < factor; ++dy)
        for (int dx = 0; dx < factor; ++dx) on += mask.at(y * factor + dy, x * factor + dx) != 0;
      out[static_cast<std::size_t>(y * w + x)] = 2 * on >= factor * factor;
    }
  return out;
}

inline AnalysisMatrix make_analysis_matrix(const Tensor& latents, const std::vector<Image8>& masks, int factor) {
  if (latents.ndim() != 4) throw ShapeError("analysis matrix expects [N, h, w, d] latents, got " + to_string(latents.shape()));
  AnalysisMatrix m;
  m.n = latents.dim(0);
  m.h = latents.dim(1);
  m.w = latents.dim(2);
  m.d = latents.dim(3);
  if (static_cast<std::int64_t>(masks.size()) != m.n)
    throw std::invalid_argument("analysis matrix: " + std::to_string(masks.size()) + " masks for " + std::to_string(m.n) + " latents");
  m.x.assign(latents.data().begin(), latents.data().end());
  m.labels.reserve(static_cast<std::size_t>(m.n * m.h * m.w));
  for (const auto& mask : masks) {
    const auto cells = downsample_mask(mask, factor);
    if (static_cast<std::int64_t>(cells.size()) != m.h * m.w)
      throw ShapeError("analysis matrix: mask grid does not match latent grid");
    m.labels.insert(m.labels.end(), cells.begin(), cells.end());
  }
  return m;
}

struct PcaDirection {
  std::vector<double> w;     // unit vector
  std::vector<double> mean;  // column means removed before projection
  double eigenvalue = 0.0;
  double explained = 0.0;    // eigenvalue / trace
  int iterations = 0;
};

struct PcaResult {
  PcaDirection direction;
  std::vector<double> scores;  // one per row, in row order
};

// Top principal component of rows x d data by power iteration on the covariance.
// With labels, the sign is chosen so scores correlate non-negatively with them;
// otherwise the largest-magnitude coordinate of w is made positive.
inline PcaResult pca_one_component(const std::vector<double>& x, std::int64_t rows, std::int64_t d,
                                   const std::vector<std::uint8_t>& labels = {}) {
  if (rows < 2) throw std::invalid_argument("pca needs at least two rows");
  if (static_cast<std::int64_t>(x.size()) != rows * d) throw ShapeError("pca: data size does not match rows x d");
  const auto du = static_cast<std::size_t>(d);
  std::vector<double> mean(du, 0.0);
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < du; ++j) mean[j] += x[static_cast<std::size_t>(r) * du + j];
  for (auto& v : mean) v /= static_cast<double>(rows);
  std::vector<double> cov(du * du, 0.0), centered(du);
  for (std::int64_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < du; ++j) centered[j] = x[static_cast<std::size_t>(r) * du + j] - mean[j];
    for (std::size_t i = 0; i < du; ++i)
      for (std::size_t j = i; j < du; ++j) cov[i * du + j] += centered[i] * centered[j];
  }
  double trace = 0.0;
  for (std::size_t i = 0; i < du; ++i) {
    for (std::size_t j = i; j < du; ++j) {
      cov[i * du + j] /= static_cast<double>(rows - 1);
      cov[j * du + i] = cov[i * du + j];
    }
    trace += cov[i * du + i];
  }
  if (!(trace > 0.0)) throw std::invalid_argument("pca: data has zero variance");

  std::vector<double> v(du), next(du);
  for (std::size_t i = 0; i < du; ++i) v[i] = 1.0 + 0.1 * static_cast<double>(i);
  auto normalize = [](std::vector<double>& a) {
    double n = 0.0;
    for (double e : a) n += e * e;
    n = std::sqrt(n);
    for (double& e : a) e /= n;
    return n;
  };
  normalize(v);
  PcaDirection dir;
  double lambda = 0.0;
  for (dir.iterations = 1; dir.iterations <= 10000; ++dir.iterations) {
    for (std::size_t i = 0; i < du; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < du; ++j) s += cov[i * du + j] * v[j];
      next[i] = s;
    }
    const double norm = normalize(next);
    v.swap(next);
    const bool done = dir.iterations > 1 && std::abs(norm - lambda) < 1e-8 * norm;
    lambda = norm;
    if (done) break;
  }
  dir.iterations = std::min(dir.iterations, 10000);

  PcaResult out;
  out.scores.resize(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < du; ++j) s += (x[static_cast<std::size_t>(r) * du + j] - mean[j]) * v[j];
    out.scores[static_cast<std::size_t>(r)] = s;
  }
  bool flip = false;
  if (!labels.empty()) {
    if (static_cast<std::int64_t>(labels.size()) != rows) throw ShapeError("pca: label count does not match rows");
    double corr = 0.0;
    for (std::int64_t r = 0; r < rows; ++r) corr += out.scores[static_cast<std::size_t>(r)] * (labels[static_cast<std::size_t>(r)] ? 1.0 : -1.0);
    flip = corr < 0.0;
  } else {
    const auto it = std::max_element(v.begin(), v.end(), [](double a, double b) { return std::abs(a) < std::abs(b); });
    flip = *it < 0.0;
  }
  if (flip) {
    for (double& e : v) e = -e;
    for (double& s : out.scores) s = -s;
  }
  dir.w = std::move(v);
  dir.mean = std::move(mean);
  dir.eigenvalue = lambda;
  dir.explained = lambda / trace;
  out.direction = std::move(dir);
  return out;
}

inline PcaResult pca_one_component(const AnalysisMatrix& m) { return pca_one_component(m.x, m.rows(), m.d, m.labels); }

// Threshold maximizing between-class variance of a 256-bin histogram.
inline double otsu_threshold(const std::vector<double>& values, int bins = 256) {
  if (values.empty()) throw std::invalid_argument("otsu_threshold: no values");
  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  const double lo = *lo_it, hi = *hi_it;
  if (hi == lo) return lo;
  std::vector<double> hist(static_cast<std::size_t>(bins), 0.0);
  for (double v : values) {
    const int b = std::min(bins - 1, static_cast<int>((v - lo) / (hi - lo) * bins));
    hist[static_cast<std::size_t>(b)] += 1.0;
  }
  const double total = static_cast<double>(values.size());
  double sum_all = 0.0;
  for (int b = 0; b < bins; ++b) sum_all += b * hist[static_cast<std::size_t>(b)];
  double w0 = 0.0, sum0 = 0.0, best = -1.0;
  int best_bin = 0, last_bin = 0;
  for (int b = 0; b < bins - 1; ++b) {
    w0 += hist[static_cast<std::size_t>(b)];
    sum0 += b * hist[static_cast<std::size_t>(b)];
    const double w1 = total - w0;
    if (w0 == 0.0 || w1 == 0.0) continue;
    const double m0 = sum0 / w0, m1 = (sum_all - sum0) / w1;
    const double between = w0 * w1 * (m0 - m1) * (m0 - m1);
    if (between > best * (1 + 1e-12)) {
      best = between;
      best_bin = last_bin = b;
    } else if (between >= best * (1 - 1e-12)) {
      last_bin = b;
    }
  }
  // A flat optimum (empty bins between the classes) resolves to its midpoint.
  return lo + (hi - lo) * (0.5 * (best_bin + last_bin) + 1) / bins;
}

// Fraction of cells where (score > threshold) equals the label.
inline double threshold_agreement(const std::vector<double>& scores, const std::vector<std::uint8_t>& labels, double threshold) {
  if (scores.size() != labels.size() || scores.empty()) throw std::invalid_argument("threshold_agreement: size mismatch");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) hits += (scores[i] > threshold) == (labels[i] != 0);
  return static_cast<double>(hits) / static_cast<double>(scores.size());
}

// Grayscale rendering of one sample's scores, min-max scaled over the whole set.
inline Image8 score_image(const std::vector<double>& scores, std::int64_t index, std::int64_t h, std::int64_t w) {
  const auto [lo_it, hi_it] = std::minmax_element(scores.begin(), scores.end());
  const double lo = *lo_it, span = std::max(*hi_it - lo, 1e-12);
  Image8 img{static_cast<int>(h), static_cast<int>(w), 1, std::vector<std::uint8_t>(static_cast<std::size_t>(h * w))};
  for (std::int64_t i = 0; i < h * w; ++i)
    img.pixels[static_cast<std::size_t>(i)] =
        static_cast<std::uint8_t>(std::lround(255.0 * (scores[static_cast<std::size_t>(index * h * w + i)] - lo) / span));
  return img;
}

// x_t = t * eps + (1 - t) * latent.
template <typename T>
BasicTensor<T> noise_perturb(const BasicTensor<T>& latent, double t, const BasicTensor<T>& eps) {
  if (!(t >= 0.0 && t <= 1.0)) throw std::domain_error("noise_perturb: t must lie in [0, 1], got " + std::to_string(t));
  if (latent.shape() != eps.shape()) shape_mismatch("noise_perturb", latent.shape(), eps.shape());
  BasicTensor<T> out(latent.shape());
  const T a = static_cast<T>(t), b = static_cast<T>(1.0 - t);
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    const auto k = static_cast<std::size_t>(i);
    out[k] = a * eps[k] + b * latent[k];
  }
  return out;
}

struct LinearProbe {
  std::vector<double> w;
  double b = 0.0;
  double lambda = 0.0;

  double decision(const double* row) const {
    double s = b;
    for (std::size_t j = 0; j < w.size(); ++j) s += w[j] * row[j];
    return s;
  }
  int predict(const double* row) const { return decision(row) >= 0.0 ? 1 : 0; }

  double accuracy(const std::vector<double>& x, const std::vector<std::uint8_t>& labels) const {
    if (labels.empty()) throw std::invalid_argument("probe accuracy: no rows");
    std::size_t hits = 0;
    for (std::size_t r = 0; r < labels.size(); ++r) hits += predict(x.data() + r * w.size()) == labels[r];
    return static_cast<double>(hits) / static_cast<double>(labels.size());
  }
};

namespace detail {

// Solves the symmetric positive definite system A x = rhs (n x n, row-major) by Cholesky.
inline std::vector<double> cholesky_solve(std::vector<double> a, std::vector<double> rhs, std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) {
    double diag = a[j * n + j];
    for (std::size_t k = 0; k < j; ++k) diag -= a[j * n + k] * a[j * n + k];
    if (!(diag > 0.0)) throw std::runtime_error("normal equations are not positive definite");
    a[j * n + j] = std::sqrt(diag);
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a[i * n + j];
      for (std::size_t k = 0; k < j; ++k) s -= a[i * n + k] * a[j * n + k];
      a[i * n + j] = s / a[j * n + j];
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < i; ++k) rhs[i] -= a[i * n + k] * rhs[k];
    rhs[i] /= a[i * n + i];
  }
  for (std::size_t i = n; i-- > 0;) {
    for (std::size_t k = i + 1; k < n; ++k) rhs[i] -= a[k * n + i] * rhs[k];
    rhs[i] /= a[i * n + i];
  }
  return rhs;
}

}  // namespace detail

// Ridge least squares on targets {-1, +1} with an unpenalized-scale bias column.
// The normal equations are averaged over rows, so uniform reweighting leaves the fit unchanged.
inline LinearProbe probe_fit(const std::vector<double>& x, const std::vector<std::uint8_t>& labels, std::int64_t d, double lambda) {
  if (!(lambda > 0.0)) throw std::invalid_argument("probe_fit: ridge strength must be positive");
  const std::size_t n = labels.size();
  if (n == 0 || x.size() != n * static_cast<std::size_t>(d)) throw ShapeError("probe_fit: data size does not match labels x d");
  const auto pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), std::uint8_t{1}));
  const double frac = static_cast<double>(pos) / static_cast<double>(n);
  if (frac < 0.01 || frac > 0.99)
    throw std::invalid_argument("probe_fit: classes too unbalanced (positive fraction " + std::to_string(frac) + ")");
  const std::size_t m = static_cast<std::size_t>(d) + 1;
  std::vector<double> a(m * m, 0.0), rhs(m, 0.0), z(m);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j + 1 < m; ++j) z[j] = x[r * (m - 1) + j];
    z[m - 1] = 1.0;
    const double y = labels[r] ? 1.0 : -1.0;
    for (std::size_t i = 0; i < m; ++i) {
      rhs[i] += z[i] * y;
      for (std::size_t j = i; j < m; ++j) a[i * m + j] += z[i] * z[j];
    }
  }
  for (std::size_t i = 0; i < m; ++i) {
    rhs[i] /= static_cast<double>(n);
    for (std::size_t j = i; j < m; ++j) {
      a[i * m + j] /= static_cast<double>(n);
      a[j * m + i] = a[i * m + j];
    }
    a[i * m + i] += lambda;
  }
  const auto sol = detail::cholesky_solve(std::move(a), std::move(rhs), m);
  LinearProbe probe;
  probe.w.assign(sol.begin(), sol.end() - 1);
  probe.b = sol.back();
  probe.lambda = lambda;
  for (double v : sol)
    if (!std::isfinite(v)) throw std::runtime_error("probe_fit: non-finite coefficients");
  return probe;
}

struct SweepRow {
  double t;
  std::uint64_t seed;
  double train_acc;
  double val_acc;
  friend bool operator==(const SweepRow&, const SweepRow&) = default;
};

struct SweepOptions {
  std::vector<double> t_grid;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  double lambda = 1e-3;
  bool balance = true;  // subsample the majority class so chance level is 0.5
};

// Mask latents and cell labels for a list of samples.
inline AnalysisMatrix mask_analysis_matrix(Codec& codec, const std::vector<Sample>& samples) {
  std::vector<Image8> masks;
  masks.reserve(samples.size());
  for (const auto& s : samples) masks.push_back(s.mask);
  Tensor latents;
  const std::int64_t chunk = 128;
  std::vector<float> all;
  Shape shape;
  for (std::size_t start = 0; start < samples.size(); start += chunk) {
    const std::vector<Sample> part(samples.begin() + static_cast<std::ptrdiff_t>(start),
                                   samples.begin() + static_cast<std::ptrdiff_t>(std::min(samples.size(), start + chunk)));
    const Tensor z = codec.encode(stack_images(part, true));
    all.insert(all.end(), z.data().begin(), z.data().end());
    shape = z.shape();
  }
  shape[0] = static_cast<std::int64_t>(samples.size());
  return make_analysis_matrix(Tensor(shape, std::move(all)), masks, codec.config().factor);
}

namespace detail {

// Row indices with equal class counts, majority rows subsampled without replacement.
inline std::vector<std::size_t> balanced_rows(const std::vector<std::uint8_t>& labels, Rng& rng) {
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < labels.size(); ++i) (labels[i] ? pos : neg).push_back(i);
  auto& big = pos.size() > neg.size() ? pos : neg;
  const std::size_t keep = std::min(pos.size(), neg.size());
  for (std::size_t i = 0; i < keep; ++i) std::swap(big[i], big[i + rng.below(big.size() - i)]);
  big.resize(keep);
  std::vector<std::size_t> rows(pos);
  rows.insert(rows.end(), neg.begin(), neg.end());
  std::sort(rows.begin(), rows.end());
  return rows;
}

inline void noisy_rows(const AnalysisMatrix& m, const std::vector<std::size_t>& rows, double t, Rng& rng,
                       std::vector<double>& x, std::vector<std::uint8_t>& y) {
  const auto d = static_cast<std::size_t>(m.d);
  x.resize(rows.size() * d);
  y.resize(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const double* src = m.row(static_cast<std::int64_t>(rows[i]));
    for (std::size_t j = 0; j < d; ++j) x[i * d + j] = t * rng.normal() + (1.0 - t) * src[j];
    y[i] = m.labels[rows[i]];
  }
}

}  // namespace detail

// For each (t, seed): perturb train and validation latents along the flow path,
// fit the probe on train rows, score it on validation rows.
inline std::vector<SweepRow> separability_sweep(const AnalysisMatrix& train, const AnalysisMatrix& val, const SweepOptions& opt) {
  if (train.d != val.d) throw ShapeError("separability_sweep: train and validation widths differ");
  std::vector<SweepRow> out;
  for (std::uint64_t seed : opt.seeds) {
    Rng pick(seed, derive_stream(0xA7A1, 0));
    std::vector<std::size_t> tr(static_cast<std::size_t>(train.rows())), va(static_cast<std::size_t>(val.rows()));
    std::iota(tr.begin(), tr.end(), std::size_t{0});
    std::iota(va.begin(), va.end(), std::size_t{0});
    if (opt.balance) {
      tr = detail::balanced_rows(train.labels, pick);
      va = detail::balanced_rows(val.labels, pick);
    }
    for (std::size_t k = 0; k < opt.t_grid.size(); ++k) {
      const double t = opt.t_grid[k];
      if (!(t >= 0.0 && t <= 1.0)) throw std::domain_error("separability_sweep: t outside [0, 1]");
      Rng noise(seed, derive_stream(0xA7A1, 1 + k));
      std::vector<double> xt, xv;
      std::vector<std::uint8_t> yt, yv;
      detail::noisy_rows(train, tr, t, noise, xt, yt);
      detail::noisy_rows(val, va, t, noise, xv, yv);
      const LinearProbe probe = probe_fit(xt, yt, train.d, opt.lambda);
      out.push_back({t, seed, probe.accuracy(xt, yt), probe.accuracy(xv, yv)});
    }
  }
  return out;
}

struct SweepSummary {
  double t;
  double mean;
  double std;
};

// Validation accuracy per t (in grid order), mean and sample std over seeds.
inline std::vector<SweepSummary> summarize_sweep(const std::vector<SweepRow>& rows) {
  std::vector<SweepSummary> out;
  std::vector<double> ts;
  for (const auto& r : rows)
    if (std::find(ts.begin(), ts.end(), r.t) == ts.end()) ts.push_back(r.t);
  for (double t : ts) {
    double s = 0, s2 = 0;
    int n = 0;
    for (const auto& r : rows)
      if (r.t == t) {
        s += r.val_acc;
        s2 += r.val_acc * r.val_acc;
        ++n;
      }
    const double mean = s / n;
    out.push_back({t, mean, n > 1 ? std::sqrt(std::max(0.0, (s2 - n * mean * mean) / (n - 1))) : 0.0});
  }
  return out;
}

inline void write_sweep_csv(const std::filesystem::path& path, const std::vector<SweepRow>& rows) {
  std::string text = "t,seed,train_acc,val_acc\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.4f,%llu,%.6f,%.6f\n", r.t, static_cast<unsigned long long>(r.seed), r.train_acc, r.val_acc);
    text += buf;
  }
  detail::atomic_write(path, text);
}

// Grid 0, 0.1, ..., 1.0 unless given.
inline std::vector<double> default_t_grid() {
  std::vector<double> g;
  for (int i = 0; i <= 10; ++i) g.push_back(i / 10.0);
  return g;
}

}  // namespace maskflow
