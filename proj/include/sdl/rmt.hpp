#pragma once

// Random-matrix tools: the Marchenko–Pastur law, empirical spectra, streamed
// update covariances with their anisotropy statistics, the accumulated-step
// concentration bounds, Stieltjes transforms, effective windows under weight
// decay, and diagonality ratios.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>

#include "sdl/numerics.hpp"

namespace sdl {

// ---------------------------------------------------------------------------
// Marchenko–Pastur law with unit variance and ratio c = p/n.

struct MpSupport {
  double lower;
  double upper;
};

inline MpSupport mp_support(double c) {
  require(c > 0.0, ErrorKind::InvalidArgument, "mp_support: c must be > 0");
  const double r = std::sqrt(c);
  return {(1.0 - r) * (1.0 - r), (1.0 + r) * (1.0 + r)};
}

// Density of the continuous part; integrates to min(1, 1/c).
inline double mp_density(double x, double c) {
  const MpSupport s = mp_support(c);
  if (x <= s.lower || x >= s.upper || x <= 0.0) return 0.0;
  return std::sqrt((s.upper - x) * (x - s.lower)) / (2.0 * std::numbers::pi * x * c);
}

// Weight of the atom at zero (present for c > 1).
inline double mp_point_mass(double c) { return c > 1.0 ? 1.0 - 1.0 / c : 0.0; }

namespace detail {

// Integrand of the continuous part after x = m − h·cos θ, θ ∈ [0, π], which
// removes the square-root endpoint behaviour.
inline double mp_theta_integrand(double theta, double c) {
  const MpSupport s = mp_support(c);
  const double m = 0.5 * (s.upper + s.lower);
  const double h = 0.5 * (s.upper - s.lower);
  const double x = m - h * std::cos(theta);
  if (x <= 0.0) return 0.0;
  const double sin_t = std::sin(theta);
  // sqrt((b−x)(x−a)) = h·sin θ, dx = h·sin θ dθ
  return (h * sin_t) * (h * sin_t) / (2.0 * std::numbers::pi * x * c);
}

inline double simpson_recursive(double c, double a, double b, double fa, double fm, double fb, double whole, double tol,
                                int depth) {
  const double m = 0.5 * (a + b);
  const double lm = 0.5 * (a + m), rm = 0.5 * (m + b);
  const double flm = mp_theta_integrand(lm, c), frm = mp_theta_integrand(rm, c);
  const double left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
  const double right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
  const double delta = left + right - whole;
  if (depth <= 0 || std::abs(delta) <= 15.0 * tol) return left + right + delta / 15.0;
  return simpson_recursive(c, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) +
         simpson_recursive(c, m, b, fm, frm, fb, right, tol / 2.0, depth - 1);
}

inline double mp_theta_integral(double c, double t0, double t1, double tol) {
  if (t1 <= t0) return 0.0;
  const double f0 = mp_theta_integrand(t0, c), f1 = mp_theta_integrand(t1, c);
  const double fm = mp_theta_integrand(0.5 * (t0 + t1), c);
  const double whole = (t1 - t0) / 6.0 * (f0 + 4.0 * fm + f1);
  return simpson_recursive(c, t0, t1, f0, fm, f1, whole, tol, 40);
}

inline double mp_theta_of(double x, double c) {
  const MpSupport s = mp_support(c);
  if (x <= s.lower) return 0.0;
  if (x >= s.upper) return std::numbers::pi;
  const double m = 0.5 * (s.upper + s.lower);
  const double h = 0.5 * (s.upper - s.lower);
  return std::acos(std::clamp((m - x) / h, -1.0, 1.0));
}

}  // namespace detail

// CDF including the atom at zero, by adaptive Simpson integration (target 1e-10).
inline double mp_cdf(double x, double c) {
  if (x < 0.0) return 0.0;
  const double atom = mp_point_mass(c);
  return atom + detail::mp_theta_integral(c, 0.0, detail::mp_theta_of(x, c), 1e-12);
}

// Inverse CDF by bisection on [0, upper edge].
inline double mp_quantile(double u, double c) {
  require(u >= 0.0 && u <= 1.0, ErrorKind::InvalidArgument, "mp_quantile: u must be in [0, 1]");
  if (u <= mp_point_mass(c)) return 0.0;
  const MpSupport s = mp_support(c);
  double lo = s.lower, hi = s.upper;
  for (int i = 0; i < 100 && hi - lo > 1e-14 * s.upper; ++i) {
    const double mid = 0.5 * (lo + hi);
    (mp_cdf(mid, c) < u ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

// Kolmogorov–Smirnov distance between the empirical CDF of `eigs` and the
// MP(c) CDF. The MP CDF is integrated incrementally between consecutive
// sorted eigenvalues.
inline double esd_and_ks(std::span<const double> eigs, double c) {
  require(!eigs.empty(), ErrorKind::InvalidArgument, "esd_and_ks: empty spectrum");
  Vector sorted(eigs.begin(), eigs.end());
  std::sort(sorted.begin(), sorted.end());
  const double m = static_cast<double>(sorted.size());
  const double atom = mp_point_mass(c);
  double ks = 0.0;
  double theta_prev = 0.0;
  double cont = 0.0;
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    const double x = sorted[i];
    double F = 0.0;
    if (x >= 0.0) {
      const double theta = detail::mp_theta_of(x, c);
      cont += detail::mp_theta_integral(c, theta_prev, theta, 1e-13);
      theta_prev = std::max(theta_prev, theta);
      F = atom + cont;
    }
    ks = std::max({ks, std::abs(F - static_cast<double>(i) / m), std::abs(F - static_cast<double>(i + 1) / m)});
  }
  return ks;
}

// ---------------------------------------------------------------------------
// Spectral reports

struct SpectralReport {
  Vector eigenvalues;  // descending
  double near_zero_threshold = 1e-3;
  double coverage = 0.7;
  double near_zero_rate = 0.0;
  std::optional<double> majority_ratio;          // 10^(width of shortest log10 window covering `coverage`)
  std::optional<double> extremal_nonzero_ratio;  // largest / smallest eigenvalue ≥ threshold
  double trace = 0.0;
};

inline SpectralReport spectral_report_from_eigenvalues(Vector eigs, double near_zero_threshold, double coverage = 0.7) {
  require(coverage > 0.0 && coverage <= 1.0, ErrorKind::InvalidArgument, "spectral_report: coverage must be in (0, 1]");
  std::sort(eigs.begin(), eigs.end(), std::greater<>());
  SpectralReport r;
  r.near_zero_threshold = near_zero_threshold;
  r.coverage = coverage;
  Vector logs;
  for (double e : eigs) {
    r.trace += e;
    if (e >= near_zero_threshold && e > 0.0) logs.push_back(std::log10(e));
  }
  r.near_zero_rate = eigs.empty() ? 0.0 : 1.0 - static_cast<double>(logs.size()) / static_cast<double>(eigs.size());
  if (!logs.empty()) {
    r.extremal_nonzero_ratio = std::pow(10.0, logs.front() - logs.back());
    std::reverse(logs.begin(), logs.end());  // ascending
    const std::size_t k = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(coverage * static_cast<double>(logs.size()) - 1e-9)));
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i + k <= logs.size(); ++i) best = std::min(best, logs[i + k - 1] - logs[i]);
    r.majority_ratio = std::pow(10.0, best);
  }
  r.eigenvalues = std::move(eigs);
  return r;
}

inline SpectralReport spectral_report(const Matrix& m, double near_zero_threshold = 1e-3, double coverage = 0.7) {
  return spectral_report_from_eigenvalues(symmetric_eigenvalues(m), near_zero_threshold, coverage);
}

// Eigenvalues below rel·λ_max (treats the spectrum as PSD).
inline std::size_t count_below_relative(std::span<const double> eigs, double rel) {
  if (eigs.empty()) return 0;
  const double top = *std::max_element(eigs.begin(), eigs.end());
  return static_cast<std::size_t>(std::count_if(eigs.begin(), eigs.end(), [&](double e) { return e < rel * top; }));
}

// ---------------------------------------------------------------------------
// Streamed update covariance

// Accumulates S = (1/W) Σ_k w_k x_k x_kᵀ without storing columns. With a
// decay factor r < 1, every previously streamed batch is multiplied by r
// when a new batch arrives, so a column from t steps ago carries weight r^t.
class UpdateStreamAccumulator {
 public:
  UpdateStreamAccumulator() = default;
  explicit UpdateStreamAccumulator(std::size_t p, double decay = 1.0) : p_(p), decay_(decay), sum_(p, p) {
    require(p >= 1, ErrorKind::InvalidArgument, "UpdateStreamAccumulator: p must be >= 1");
    require(decay > 0.0 && decay <= 1.0, ErrorKind::InvalidArgument, "UpdateStreamAccumulator: decay must be in (0, 1]");
  }

  // One training step: rows of `columns` are the streamed vectors.
  void add_batch(const Matrix& columns) {
    require(columns.cols() == p_, ErrorKind::Shape, "UpdateStreamAccumulator: vector length mismatch");
    if (decay_ != 1.0 && steps_ > 0) {
      for (double& v : sum_.values()) v *= decay_;
      weight_ *= decay_;
    }
    for (std::size_t r = 0; r < columns.rows(); ++r) {
      auto x = columns.row(r);
      for (std::size_t i = 0; i < p_; ++i) {
        const double xi = x[i];
        if (xi == 0.0) continue;
        auto si = sum_.row(i);
        for (std::size_t j = 0; j <= i; ++j) si[j] += xi * x[j];
      }
      max_norm2_ = std::max(max_norm2_, squared_norm(x));
    }
    weight_ += static_cast<double>(columns.rows());
    columns_ += columns.rows();
    batch_ = std::max(batch_, columns.rows());
    ++steps_;
  }

  std::size_t dimension() const { return p_; }
  std::size_t columns() const { return columns_; }
  std::size_t steps() const { return steps_; }
  std::size_t batch_size() const { return batch_; }
  double weight() const { return weight_; }
  double decay() const { return decay_; }
  double max_norm2() const { return max_norm2_; }

  // S = (1/W) Σ w x xᵀ, full symmetric matrix.
  Matrix covariance() const {
    require(weight_ > 0.0, ErrorKind::InvalidArgument, "UpdateStreamAccumulator: no columns streamed");
    Matrix s(p_, p_);
    for (std::size_t i = 0; i < p_; ++i)
      for (std::size_t j = 0; j <= i; ++j) s(i, j) = s(j, i) = sum_(i, j) / weight_;
    return s;
  }

  double trace_s() const {
    if (weight_ <= 0.0) return 0.0;
    double t = 0.0;
    for (std::size_t i = 0; i < p_; ++i) t += sum_(i, i);
    return t / weight_;
  }

  double trace_s2() const {
    if (weight_ <= 0.0) return 0.0;
    double t = 0.0;
    for (std::size_t i = 0; i < p_; ++i) {
      t += sum_(i, i) * sum_(i, i);
      for (std::size_t j = 0; j < i; ++j) t += 2.0 * sum_(i, j) * sum_(i, j);
    }
    return t / (weight_ * weight_);
  }

 private:
  std::size_t p_ = 0;
  double decay_ = 1.0;
  Matrix sum_;  // lower triangle holds Σ w x xᵀ
  double weight_ = 0.0;
  std::size_t columns_ = 0;
  std::size_t steps_ = 0;
  std::size_t batch_ = 0;
  double max_norm2_ = 0.0;
};

struct AnisotropyStats {
  std::size_t p = 0;
  double a = 0.0;                  // tr(S) / tr(S²)
  double a_over_p = 0.0;
  double a_normalized = 0.0;       // a after rescaling columns to max norm 1: a · max‖x‖²
  double expected_u_norm2 = 0.0;   // tr(T) = tr(aS) = E‖√a x‖²
  double u_norm2_over_p = 0.0;
  double beta_hat = 0.0;           // √(p · tr((T − I)²))
  double beta_over_p = 0.0;
};

// From traces of S: T = aS is invariant to rescaling the streamed columns.
inline AnisotropyStats anisotropy_from_traces(std::size_t p, double tr_s, double tr_s2, double max_norm2) {
  require(tr_s2 > 0.0 && tr_s > 0.0, ErrorKind::InvalidArgument, "anisotropy_stats: zero covariance");
  AnisotropyStats st;
  const double pd = static_cast<double>(p);
  st.p = p;
  st.a = tr_s / tr_s2;
  st.a_over_p = st.a / pd;
  st.a_normalized = st.a * max_norm2;
  st.expected_u_norm2 = st.a * tr_s;
  st.u_norm2_over_p = st.expected_u_norm2 / pd;
  // tr((aS − I)²) = a² tr(S²) − 2a tr(S) + p
  const double dev = std::max(st.a * st.a * tr_s2 - 2.0 * st.a * tr_s + pd, 0.0);
  st.beta_hat = std::sqrt(pd * dev);
  st.beta_over_p = st.beta_hat / pd;
  return st;
}

inline AnisotropyStats anisotropy_stats(const UpdateStreamAccumulator& acc) {
  require(acc.columns() >= 1, ErrorKind::InvalidArgument, "anisotropy_stats: accumulator is empty");
  return anisotropy_from_traces(acc.dimension(), acc.trace_s(), acc.trace_s2(), acc.max_norm2());
}

// ---------------------------------------------------------------------------
// Accumulated-step concentration bounds

struct BoundInputs {
  double alpha = 0.0;  // bound on a
  double beta = 0.0;   // anisotropy bound
  double c = 0.0;      // p / (bT)
  std::size_t p = 1;
  std::size_t b = 1;
  std::size_t T = 1;
  double v = 0.0;
  double v0 = 0.0;
  double mean_nonzero_eig = 0.0;
};

struct ConcentrationBounds {
  double im_bound = 0.0;
  double re_bound = 0.0;
  double tau = 0.0;
  double v0_condition_lhs = 0.0;
  double v0_condition_rhs = 0.0;
  double v0_condition_margin = 0.0;  // negative: bound not applicable
  bool v0_at_least_2c = false;
};

inline ConcentrationBounds concentration_bounds(const BoundInputs& in) {
  require(in.c > 0.0 && in.c <= 1.0, ErrorKind::InvalidArgument, "concentration_bounds: c must be in (0, 1]");
  require(in.v0 > 0.0 && in.v >= in.v0, ErrorKind::InvalidArgument, "concentration_bounds: need v >= v0 > 0");
  require(in.p >= 1 && in.alpha >= 0.0 && in.beta >= 0.0, ErrorKind::InvalidArgument, "concentration_bounds: bad inputs");
  const double p = static_cast<double>(in.p);
  const double c = in.c, v = in.v;
  const double min_bt_p = std::min(static_cast<double>(in.b) * static_cast<double>(in.T), p);
  const double root = std::sqrt(c + (2.0 * std::numbers::sqrt2 + 2.0) * c * in.alpha / (v * p) + c * in.beta / (v * p) + c / (v * p));
  const double lead = std::numbers::sqrt2 / (c * std::sqrt(v));
  ConcentrationBounds out;
  out.im_bound = lead * in.alpha * in.alpha / (v * min_bt_p * min_bt_p) * root;
  out.re_bound = lead * in.alpha / min_bt_p * root;
  out.tau = c / p * (1.0 + in.beta + 2.0 * (std::numbers::sqrt2 + 1.0) * in.alpha);
  out.v0_condition_lhs = (in.v0 + (1.0 - c)) / std::numbers::sqrt2;
  out.v0_condition_rhs = out.tau / in.v0 + 2.0 * std::sqrt(c * in.v0) + 2.0 * std::sqrt(out.tau);
  out.v0_condition_margin = out.v0_condition_lhs - out.v0_condition_rhs;
  out.v0_at_least_2c = in.v0 >= 2.0 * c;
  return out;
}

struct Stieltjes {
  double re = 0.0;
  double im = 0.0;
};

// Mean of 1/(λ − v i) over the spectrum: real part λ/(λ² + v²), imaginary part v/(λ² + v²).
inline Stieltjes stieltjes_at(std::span<const double> eigs, double v) {
  require(v > 0.0, ErrorKind::InvalidArgument, "stieltjes_at: v must be > 0");
  require(!eigs.empty(), ErrorKind::InvalidArgument, "stieltjes_at: empty spectrum");
  Stieltjes s;
  for (double l : eigs) {
    const double den = l * l + v * v;
    s.re += l / den;
    s.im += v / den;
  }
  s.re /= static_cast<double>(eigs.size());
  s.im /= static_cast<double>(eigs.size());
  return s;
}

struct ConcentrationLhs {
  double im_lhs = 0.0;  // (λ̄/√v)² · E[1/((λ/√v)² + v)]
  double re_lhs = 0.0;  // λ̄ · E[1/(λ + v²/λ)]
};

// Measured left-hand sides for the spectrum of T with mean nonzero eigenvalue λ̄.
inline ConcentrationLhs concentration_lhs(std::span<const double> eigs, double v, double mean_nonzero_eig) {
  const Stieltjes s = stieltjes_at(eigs, v);
  return {mean_nonzero_eig * mean_nonzero_eig / v * s.im, mean_nonzero_eig * s.re};
}

// Smallest integer k with k ≥ ln(τ(1 − r))/ln r − 1, r = 1 − lr·w.
inline std::size_t effective_window(double lr, double weight_decay, double tau) {
  const double lw = lr * weight_decay;
  require(lw > 0.0, ErrorKind::InvalidArgument, "effective_window: needs lr·w > 0");
  require(lw < 1.0, ErrorKind::InvalidArgument, "effective_window: needs lr·w < 1");
  require(tau > 0.0 && tau < 1.0, ErrorKind::InvalidArgument, "effective_window: tau must be in (0, 1)");
  const double r = 1.0 - lw;
  const double bound = std::log(tau * (1.0 - r)) / std::log(r) - 1.0;
  return static_cast<std::size_t>(std::max(0.0, std::ceil(bound)));
}

// ---------------------------------------------------------------------------
// Diagonality

enum class DiagonalNorm { L1, SquaredL2 };

struct DiagonalityRatio {
  double value = 0.0;
  bool infinite = false;  // off-diagonal mass is zero
};

inline DiagonalityRatio diagonality_ratio(const Matrix& m, DiagonalNorm norm) {
  require(m.rows() == m.cols(), ErrorKind::Shape, "diagonality_ratio: non-square " + shape_str(m));
  double diag = 0.0, off = 0.0;
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) {
      const double v = norm == DiagonalNorm::L1 ? std::abs(m(i, j)) : m(i, j) * m(i, j);
      (i == j ? diag : off) += v;
    }
  }
  if (off == 0.0) return {std::numeric_limits<double>::infinity(), true};
  return {diag / off, false};
}

}  // namespace sdl
