#pragma once

// Timestep distributions for the two tasks.
//
// Generation: logit-normal, t = logistic(u), u ~ N(0, 1), density peaked at
// t = 0.5.
//
// Segmentation: long-tailed density 2a^2 s / (s^2 + a^2)^2 in the mirrored
// variable s = 1 - t, so mass concentrates near t = 1 (pure noise). Draws use
// s = a * sqrt(u / (1 - u)), u ~ U(0, 1), rejecting s > 1; the truncated
// density is the closed form scaled by (1 + a^2).

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "maskflow/rng.hpp"

namespace maskflow {

inline double logistic(double u) { return 1.0 / (1.0 + std::exp(-u)); }

inline double std_normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

inline double sample_gen(Rng& rng) {
  double t = 0.0;
  do {
    t = logistic(rng.normal());
  } while (t <= 0.0 || t >= 1.0);  // only reachable through float saturation
  return t;
}

inline double pdf_gen(double t) {
  if (!(t > 0.0 && t < 1.0)) throw std::domain_error("pdf_gen: t must lie in (0, 1), got " + std::to_string(t));
  const double l = std::log(t / (1.0 - t));
  return std::exp(-0.5 * l * l) / (std::sqrt(2.0 * std::numbers::pi) * t * (1.0 - t));
}

inline double cdf_gen(double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw std::domain_error("cdf_gen: t must lie in [0, 1], got " + std::to_string(t));
  if (t == 0.0) return 0.0;
  if (t == 1.0) return 1.0;
  return std_normal_cdf(std::log(t / (1.0 - t)));
}

struct SegSampler {
  double a = 0.05;

  explicit SegSampler(double shift = 0.05) : a(shift) {
    if (!(a > 0.0)) throw std::invalid_argument("segmentation sampler shift must be positive");
  }

  // Probability that a raw draw lands outside [0, 1] and is rejected.
  double rejection_rate() const { return a * a / (1.0 + a * a); }

  // Maps one uniform variate to t, or nullopt if it falls in the rejected tail.
  std::optional<double> from_uniform(double u) const {
    const double s = a * std::sqrt(u / (1.0 - u));
    if (!(s <= 1.0)) return std::nullopt;
    return 1.0 - s;
  }

  double sample(Rng& rng) const {
    for (;;) {
      if (auto t = from_uniform(rng.uniform())) return *t;
    }
  }

  // Density in t. `normalized` rescales by (1 + a^2) so it integrates to 1 on [0, 1].
  double pdf(double t, bool normalized = false) const {
    check_t(t, "pdf_seg");
    const double s = 1.0 - t;
    const double d = s * s + a * a;
    const double p = 2.0 * a * a * s / (d * d);
    return normalized ? p * (1.0 + a * a) : p;
  }

  // P(T <= t). The untruncated form keeps the tail mass a^2 / (1 + a^2) below t = 0.
  double cdf(double t, bool normalized = false) const {
    check_t(t, "cdf_seg");
    const double s = 1.0 - t;
    const double f = s * s / (s * s + a * a);
    return normalized ? 1.0 - (1.0 + a * a) * f : 1.0 - f;
  }

  // Inverse of the normalized cdf.
  double quantile(double q) const {
    if (!(q >= 0.0 && q <= 1.0)) throw std::domain_error("quantile: q must lie in [0, 1]");
    const double w = (1.0 - q) / (1.0 + a * a);
    return 1.0 - a * std::sqrt(w / (1.0 - w));
  }

  // Mode of the density; for a >= sqrt(3) the density is increasing in s and peaks at t = 0.
  double peak_t() const { return std::max(0.0, 1.0 - a / std::sqrt(3.0)); }

 private:
  static void check_t(double t, const char* fn) {
    if (!(t >= 0.0 && t <= 1.0)) throw std::domain_error(std::string(fn) + ": t must lie in [0, 1], got " + std::to_string(t));
  }
};

inline double sample_seg(double a, Rng& rng) { return SegSampler(a).sample(rng); }
inline double pdf_seg(double a, double t, bool normalized = false) { return SegSampler(a).pdf(t, normalized); }
inline double cdf_seg(double a, double t, bool normalized = false) { return SegSampler(a).cdf(t, normalized); }

enum class SamplerKind { generation, segmentation };

struct DensityRow {
  SamplerKind kind;
  double a;  // 0 for the generation sampler
  double t;
  double pdf;
  double cdf;
};

// Evaluates the (normalized) density and cdf on a grid inside [0, 1]. The
// generation density is reported as its limit 0 at the endpoints.
inline std::vector<DensityRow> density_table(SamplerKind kind, double a, const std::vector<double>& grid) {
  if (grid.empty()) throw std::invalid_argument("density_table: empty grid");
  std::vector<DensityRow> rows;
  rows.reserve(grid.size());
  const SegSampler seg(kind == SamplerKind::segmentation ? a : 1.0);
  for (double t : grid) {
    if (!(t >= 0.0 && t <= 1.0)) throw std::domain_error("density_table: grid point outside [0, 1]");
    if (kind == SamplerKind::generation) {
      rows.push_back({kind, 0.0, t, (t > 0.0 && t < 1.0) ? pdf_gen(t) : 0.0, cdf_gen(t)});
    } else {
      rows.push_back({kind, a, t, seg.pdf(t, true), seg.cdf(t, true)});
    }
  }
  return rows;
}

inline std::vector<double> uniform_grid(int n) {
  if (n < 2) throw std::invalid_argument("grid needs at least two points");
  std::vector<double> g(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) g[static_cast<std::size_t>(i)] = static_cast<double>(i) / (n - 1);
  return g;
}

// Two-sided Kolmogorov-Smirnov distance between a sample and a continuous cdf.
template <typename Cdf>
double ks_statistic(std::vector<double> samples, Cdf&& cdf) {
  if (samples.empty()) throw std::invalid_argument("ks_statistic: empty sample");
  std::sort(samples.begin(), samples.end());
  const double n = static_cast<double>(samples.size());
  double d = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const double f = cdf(samples[i]);
    d = std::max({d, (static_cast<double>(i) + 1.0) / n - f, f - static_cast<double>(i) / n});
  }
  return d;
}

}  // namespace maskflow
