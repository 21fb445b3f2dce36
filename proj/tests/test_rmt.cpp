#include <gtest/gtest.h>

#include <complex>

#include "sdl/network.hpp"
#include "sdl/rmt.hpp"

using namespace sdl;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
  Matrix m(r, c);
  for (double& v : m.values()) v = scale * rng.normal();
  return m;
}

// Midpoint-rule integral of the MP density over its support.
double midpoint_mass(double c, std::size_t n) {
  const MpSupport s = mp_support(c);
  const double h = (s.upper - s.lower) / static_cast<double>(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += mp_density(s.lower + (static_cast<double>(i) + 0.5) * h, c);
  return total * h;
}

}  // namespace

// ---------------------------------------------------------------------------
// Marchenko–Pastur

TEST(MarchenkoPastur, QuarterRatioSupport) {
  const MpSupport s = mp_support(0.25);
  EXPECT_DOUBLE_EQ(s.lower, 0.25);
  EXPECT_DOUBLE_EQ(s.upper, 2.25);
  EXPECT_DOUBLE_EQ(s.upper / s.lower, 9.0);
  EXPECT_EQ(mp_density(0.1, 0.25), 0.0);
  EXPECT_EQ(mp_density(3.0, 0.25), 0.0);
  EXPECT_GT(mp_density(1.0, 0.25), 0.0);
}

TEST(MarchenkoPastur, EndpointIdentityOnGrid) {
  for (double c = 0.01; c < 1.0; c += 0.01) {
    const MpSupport s = mp_support(c);
    const double want = std::pow((1 + std::sqrt(c)) / (1 - std::sqrt(c)), 2);
    EXPECT_NEAR(s.upper / s.lower, want, 1e-9 * want) << c;
  }
}

TEST(MarchenkoPastur, ContinuousMassIsMinOfOneAndInverseC) {
  for (double c : {0.1, 0.25, 0.5, 2.0, 4.0}) {
    const double want = std::min(1.0, 1.0 / c);
    EXPECT_NEAR(midpoint_mass(c, 2'000'000), want, 1e-6) << c;
    EXPECT_NEAR(mp_cdf(mp_support(c).upper + 1.0, c), 1.0, 1e-9) << c;
    EXPECT_NEAR(mp_cdf(0.0, c), mp_point_mass(c), 1e-12) << c;
  }
}

TEST(MarchenkoPastur, QuantileInvertsCdf) {
  for (double c : {0.25, 0.7}) {
    for (double u : {0.01, 0.3, 0.5, 0.9, 0.999}) EXPECT_NEAR(mp_cdf(mp_quantile(u, c), c), u, 1e-9);
  }
  EXPECT_EQ(mp_quantile(0.2, 2.0), 0.0);  // inside the atom at zero
  EXPECT_THROW(mp_quantile(1.5, 0.5), Error);
}

TEST(EsdKs, InverseCdfSamplesAreClose) {
  // Tabulate the CDF independently (trapezoid on a fine x grid) and invert by interpolation.
  const double c = 0.25;
  const MpSupport s = mp_support(c);
  const std::size_t grid = 200000;
  Vector xs(grid + 1), cdf(grid + 1, 0.0);
  for (std::size_t i = 0; i <= grid; ++i) xs[i] = s.lower + (s.upper - s.lower) * static_cast<double>(i) / grid;
  for (std::size_t i = 1; i <= grid; ++i)
    cdf[i] = cdf[i - 1] + 0.5 * (xs[i] - xs[i - 1]) * (mp_density(xs[i - 1], c) + mp_density(xs[i], c));
  for (double& v : cdf) v /= cdf.back();
  Rng rng(1);
  const std::size_t n = 100000;
  Vector eigs(n);
  for (double& e : eigs) {
    const double u = rng.uniform();
    const auto it = std::lower_bound(cdf.begin(), cdf.end(), u);
    const std::size_t j = std::clamp<std::size_t>(static_cast<std::size_t>(it - cdf.begin()), 1, grid);
    const double t = (u - cdf[j - 1]) / std::max(cdf[j] - cdf[j - 1], 1e-300);
    e = xs[j - 1] + t * (xs[j] - xs[j - 1]);
  }
  EXPECT_LT(esd_and_ks(eigs, c), 0.01);
}

TEST(EsdKs, SingleEigenvalueAtMedian) {
  const double med = mp_quantile(0.5, 0.25);
  EXPECT_NEAR(esd_and_ks(Vector{med}, 0.25), 0.5, 1e-8);
  EXPECT_THROW(esd_and_ks(Vector{}, 0.25), Error);
}

TEST(EsdKs, GaussianSampleCovariance) {
  Rng rng(2);
  const std::size_t p = 512, n = 4096;
  const Matrix x = random_matrix(p, n, rng);
  Matrix w = gram_rows(x);
  for (double& v : w.values()) v /= static_cast<double>(n);
  EXPECT_LT(esd_and_ks(symmetric_eigenvalues(w), static_cast<double>(p) / n), 0.05);
}

// ---------------------------------------------------------------------------
// Spectral reports

TEST(SpectralReport, DiagonalExample) {
  const SpectralReport r = spectral_report(Matrix::diagonal(Vector{4, 1, 0, 0}), 1e-3);
  EXPECT_DOUBLE_EQ(r.near_zero_rate, 0.5);
  EXPECT_DOUBLE_EQ(*r.extremal_nonzero_ratio, 4.0);
  EXPECT_DOUBLE_EQ(r.trace, 5.0);
  EXPECT_EQ(r.eigenvalues, (Vector{4, 1, 0, 0}));
  EXPECT_GE(*r.majority_ratio, 1.0);
}

TEST(SpectralReport, XavierKeyAtInitialization) {
  NetworkSpec s;
  s.input_dim = 4;
  s.hidden_width = 256;
  s.mlp_width = 1024;
  s.num_blocks = 1;
  s.num_classes = 2;
  Rng rng(3);
  const Parameters p = init_params(s, InitScheme::XavierGaussian, rng);
  const SpectralReport r = spectral_report(gram_rows(p.blocks[0].key), 1e-3);
  EXPECT_DOUBLE_EQ(r.near_zero_rate, 0.75);
  EXPECT_LE(*r.extremal_nonzero_ratio, 9.0 * 1.35);
  EXPECT_GE(*r.extremal_nonzero_ratio, 1.0);
}

TEST(SpectralReport, LogUniformMajorityRatio) {
  const std::size_t m = 1000;
  Vector eigs(m);
  for (std::size_t i = 0; i < m; ++i) eigs[i] = std::pow(10.0, 2.0 * static_cast<double>(i) / (m - 1));
  const SpectralReport r = spectral_report_from_eigenvalues(eigs, 1e-3, 0.7);
  const double want = std::pow(100.0, 0.7);
  EXPECT_NEAR(*r.majority_ratio, want, 0.1 * want);
  EXPECT_DOUBLE_EQ(*r.extremal_nonzero_ratio, 100.0);
}

TEST(SpectralReport, AllNearZeroFlagsMissingRatios) {
  const SpectralReport r = spectral_report(Matrix::diagonal(Vector{1e-5, 0, 0}), 1e-3);
  EXPECT_DOUBLE_EQ(r.near_zero_rate, 1.0);
  EXPECT_FALSE(r.majority_ratio.has_value());
  EXPECT_FALSE(r.extremal_nonzero_ratio.has_value());
  EXPECT_THROW(spectral_report_from_eigenvalues(Vector{1.0}, 1e-3, 0.0), Error);
}

TEST(SpectralReport, RankLaw) {
  Rng rng(4);
  for (auto [n, d] : {std::pair<std::size_t, std::size_t>{60, 20}, {200, 150}, {700, 100}}) {
    const Matrix k = random_matrix(n, d, rng);
    const Vector e = symmetric_eigenvalues(gram_rows(k));
    EXPECT_EQ(count_below_relative(e, 1e-10), n - d) << n << "x" << d;
  }
}

// ---------------------------------------------------------------------------
// Anisotropy

TEST(Anisotropy, IsotropicCase) {
  const AnisotropyStats st = anisotropy_from_traces(6, 6.0, 6.0, 1.0);
  EXPECT_DOUBLE_EQ(st.a, 1.0);
  EXPECT_DOUBLE_EQ(st.beta_hat, 0.0);
  // Streaming the basis vectors gives S = I/p and T = I.
  UpdateStreamAccumulator acc(6);
  acc.add_batch(Matrix::identity(6));
  const AnisotropyStats streamed = anisotropy_stats(acc);
  EXPECT_DOUBLE_EQ(streamed.a, 6.0);
  EXPECT_DOUBLE_EQ(streamed.expected_u_norm2, 6.0);
  EXPECT_NEAR(streamed.beta_hat, 0.0, 1e-7);
}

TEST(Anisotropy, RankOneCase) {
  const std::size_t p = 5;
  const AnisotropyStats st = anisotropy_from_traces(p, 2.0, 4.0, 2.0);
  EXPECT_DOUBLE_EQ(st.a, 0.5);
  EXPECT_DOUBLE_EQ(st.expected_u_norm2, 1.0);  // T = diag(1, 0, …)
  EXPECT_DOUBLE_EQ(st.beta_hat, std::sqrt(5.0 * 4.0));
  EXPECT_LE(st.beta_over_p, 1.0);
}

TEST(Anisotropy, ZeroCovarianceAndEmptyAreErrors) {
  UpdateStreamAccumulator acc(3);
  EXPECT_THROW(anisotropy_stats(acc), Error);
  acc.add_batch(Matrix(2, 3));
  EXPECT_THROW(anisotropy_stats(acc), Error);
  EXPECT_THROW(UpdateStreamAccumulator(0), Error);
  EXPECT_THROW(acc.add_batch(Matrix(1, 4)), Error);
}

TEST(Anisotropy, StreamedMatchesTwoPassOracle) {
  Rng rng(5);
  const std::size_t p = 12;
  for (double decay : {1.0, 0.9}) {
    UpdateStreamAccumulator acc(p, decay);
    std::vector<Matrix> batches;
    for (std::size_t t = 0; t < 9; ++t) {
      batches.push_back(random_matrix(1 + t % 4, p, rng, 1.0 + 0.3 * static_cast<double>(t)));
      acc.add_batch(batches.back());
    }
    // Two-pass oracle: batch t carries weight decay^(T-1-t).
    Matrix s(p, p);
    double w = 0.0;
    for (std::size_t t = 0; t < batches.size(); ++t) {
      const double wt = std::pow(decay, static_cast<double>(batches.size() - 1 - t));
      for (std::size_t r = 0; r < batches[t].rows(); ++r) add_outer(s, wt, batches[t].row(r), batches[t].row(r));
      w += wt * static_cast<double>(batches[t].rows());
    }
    for (double& v : s.values()) v /= w;
    const Matrix got = acc.covariance();
    for (std::size_t i = 0; i < s.size(); ++i) EXPECT_NEAR(got.values()[i], s.values()[i], 1e-10 * (1 + std::abs(s.values()[i])));
    double tr = 0.0, tr2 = 0.0;
    for (std::size_t i = 0; i < p; ++i) tr += s(i, i);
    for (double v : s.values()) tr2 += v * v;
    EXPECT_NEAR(acc.trace_s(), tr, 1e-10 * tr);
    EXPECT_NEAR(acc.trace_s2(), tr2, 1e-10 * tr2);
    const AnisotropyStats a = anisotropy_stats(acc);
    EXPECT_NEAR(a.a, tr / tr2, 1e-10 * a.a);
    // β̂ against an explicit T − I.
    double dev = 0.0;
    for (std::size_t i = 0; i < p; ++i)
      for (std::size_t j = 0; j < p; ++j) {
        const double tij = a.a * s(i, j) - (i == j ? 1.0 : 0.0);
        dev += tij * tij;
      }
    EXPECT_NEAR(a.beta_hat, std::sqrt(p * dev), 1e-8 * (1 + a.beta_hat));
    EXPECT_EQ(acc.columns(), 1u + 2 + 3 + 4 + 1 + 2 + 3 + 4 + 1);
    EXPECT_EQ(acc.steps(), 9u);
  }
}

TEST(Anisotropy, ScaleInvarianceOfT) {
  Rng rng(6);
  const std::size_t p = 8;
  UpdateStreamAccumulator a(p), b(p);
  for (int t = 0; t < 5; ++t) {
    Matrix m = random_matrix(4, p, rng);
    a.add_batch(m);
    for (double& v : m.values()) v *= 7.0;
    b.add_batch(m);
  }
  const AnisotropyStats sa = anisotropy_stats(a), sb = anisotropy_stats(b);
  EXPECT_NEAR(sb.a, sa.a / 49.0, 1e-12 * sa.a);
  EXPECT_NEAR(sb.expected_u_norm2, sa.expected_u_norm2, 1e-10 * sa.expected_u_norm2);
  EXPECT_NEAR(sb.beta_hat, sa.beta_hat, 1e-8 * sa.beta_hat);
}

// ---------------------------------------------------------------------------
// Concentration bounds

namespace {
BoundInputs paper_setting(std::size_t p) {
  BoundInputs in;
  in.p = p;
  in.b = 32;
  in.T = 50042;
  in.c = 4.8e-4;
  in.alpha = 0.05 * static_cast<double>(p);
  in.beta = 1.0 * static_cast<double>(p);
  in.v0 = 1e-3;
  in.v = 1e-3;
  return in;
}
}  // namespace

TEST(ConcentrationBounds, QuotedRatioAndMargin) {
  EXPECT_NEAR(768.0 / (32.0 * 50042.0), 4.8e-4, 0.01e-4);
  // The margin depends on p only through 1/p in τ; it exceeds 0.061 for large p
  // and is 0.0607 at p = 768.
  EXPECT_GE(concentration_bounds(paper_setting(3072)).v0_condition_margin, 0.061);
  EXPECT_NEAR(concentration_bounds(paper_setting(768)).v0_condition_margin, 0.0607, 5e-4);
  EXPECT_TRUE(concentration_bounds(paper_setting(768)).v0_at_least_2c);  // 1e-3 ≥ 2·4.8e-4
}

TEST(ConcentrationBounds, AlphaToZeroDrivesImBoundToZero) {
  BoundInputs in = paper_setting(768);
  double prev = concentration_bounds(in).im_bound;
  for (double alpha : {10.0, 1.0, 1e-2, 1e-4}) {
    in.alpha = alpha;
    const double cur = concentration_bounds(in).im_bound;
    EXPECT_LT(cur, prev);
    prev = cur;
  }
  in.alpha = 0.0;
  EXPECT_EQ(concentration_bounds(in).im_bound, 0.0);
}

TEST(ConcentrationBounds, MonotoneInAlphaAndBeta) {
  BoundInputs in = paper_setting(256);
  in.v = 0.01;
  ConcentrationBounds prev = concentration_bounds(in);
  for (double k = 1.1; k < 4; k += 0.3) {
    BoundInputs a = in, b = in;
    a.alpha *= k;
    b.beta *= k;
    const ConcentrationBounds ca = concentration_bounds(a), cb = concentration_bounds(b);
    EXPECT_GE(ca.im_bound, prev.im_bound);
    EXPECT_GE(ca.re_bound, prev.re_bound);
    EXPECT_GE(cb.im_bound, prev.im_bound);
    EXPECT_GE(cb.re_bound, prev.re_bound);
  }
}

TEST(ConcentrationBounds, RejectsInvalidInputs) {
  BoundInputs in = paper_setting(64);
  in.c = 1.5;
  EXPECT_THROW(concentration_bounds(in), Error);
  in.c = 0.5;
  in.v = 1e-4;  // below v0
  EXPECT_THROW(concentration_bounds(in), Error);
}

// ---------------------------------------------------------------------------
// Stieltjes transform

TEST(Stieltjes, HandCases) {
  const Stieltjes z = stieltjes_at(Vector{0.0}, 1.0);
  EXPECT_DOUBLE_EQ(z.re, 0.0);
  EXPECT_DOUBLE_EQ(z.im, 1.0);
  const Stieltjes one = stieltjes_at(Vector{1.0}, 1.0);
  EXPECT_DOUBLE_EQ(one.re, 0.5);
  EXPECT_DOUBLE_EQ(one.im, 0.5);
  EXPECT_THROW(stieltjes_at(Vector{1.0}, 0.0), Error);
}

TEST(Stieltjes, MatchesComplexArithmeticOracle) {
  Rng rng(7);
  Vector eigs(300);
  for (double& e : eigs) e = std::abs(rng.normal()) * 3.0;
  eigs[0] = 0.0;
  for (double v : {1e-3, 0.1, 2.0}) {
    std::complex<double> s = 0.0;
    for (double l : eigs) s += 1.0 / std::complex<double>(l, -v);
    s /= static_cast<double>(eigs.size());
    const Stieltjes got = stieltjes_at(eigs, v);
    EXPECT_NEAR(got.re, s.real(), 1e-12 * std::max(1.0, std::abs(s.real())));
    EXPECT_NEAR(got.im, s.imag(), 1e-12 * std::max(1.0, std::abs(s.imag())));
    EXPECT_GT(got.im, 0.0);
  }
}

TEST(Stieltjes, ConcentrationLhsDefinitions) {
  const Vector eigs{0.5, 2.0};
  const ConcentrationLhs lhs = concentration_lhs(eigs, 0.1, 1.25);
  double im = 0.0, re = 0.0;
  for (double l : eigs) {
    im += 1.0 / ((l / std::sqrt(0.1)) * (l / std::sqrt(0.1)) + 0.1);
    re += 1.0 / (l + 0.01 / l);
  }
  EXPECT_NEAR(lhs.im_lhs, 1.25 * 1.25 / 0.1 * im / 2.0, 1e-12);
  EXPECT_NEAR(lhs.re_lhs, 1.25 * re / 2.0, 1e-12);
}

// ---------------------------------------------------------------------------
// Effective window

TEST(EffectiveWindow, QuotedValues) {
  EXPECT_EQ(effective_window(1e-3, 0.1, 1e-3), 161172u);
  EXPECT_EQ(effective_window(1e-3, 0.3, 1e-3), 50057u);
}

TEST(EffectiveWindow, SmallestIntegerSatisfyingInequality) {
  for (double w : {0.01, 0.1, 0.5}) {
    const double r = 1.0 - 1e-2 * w;
    const double bound = std::log(1e-3 * (1 - r)) / std::log(r) - 1.0;
    const auto k = static_cast<double>(effective_window(1e-2, w, 1e-3));
    EXPECT_GE(k, bound);
    EXPECT_LT(k - 1.0, bound);
  }
}

TEST(EffectiveWindow, MonotoneInWeightDecayAndErrors) {
  std::size_t prev = std::numeric_limits<std::size_t>::max();
  for (double w : {0.05, 0.1, 0.2, 0.3, 0.6}) {
    const std::size_t k = effective_window(1e-3, w, 1e-3);
    EXPECT_LT(k, prev);
    prev = k;
  }
  EXPECT_THROW(effective_window(1.0, 1.0, 1e-3), Error);
  EXPECT_THROW(effective_window(1e-3, 0.0, 1e-3), Error);
  EXPECT_THROW(effective_window(1e-3, 0.1, 1.0), Error);
}

// ---------------------------------------------------------------------------
// Diagonality

TEST(Diagonality, HandCases) {
  EXPECT_TRUE(diagonality_ratio(Matrix::identity(3), DiagonalNorm::L1).infinite);
  const DiagonalityRatio ones = diagonality_ratio(Matrix::from_rows({{1, 1}, {1, 1}}), DiagonalNorm::SquaredL2);
  EXPECT_FALSE(ones.infinite);
  EXPECT_DOUBLE_EQ(ones.value, 1.0);
  EXPECT_THROW(diagonality_ratio(Matrix(2, 3), DiagonalNorm::L1), Error);
}

TEST(Diagonality, MatchesLoopOracle) {
  Rng rng(8);
  const Matrix m = random_matrix(9, 9, rng);
  double d1 = 0, o1 = 0, d2 = 0, o2 = 0;
  for (std::size_t i = 0; i < 9; ++i)
    for (std::size_t j = 0; j < 9; ++j) {
      const double v = m(i, j);
      if (i == j) d1 += std::abs(v), d2 += v * v;
      else o1 += std::abs(v), o2 += v * v;
    }
  EXPECT_NEAR(diagonality_ratio(m, DiagonalNorm::L1).value, d1 / o1, 1e-12);
  EXPECT_NEAR(diagonality_ratio(m, DiagonalNorm::SquaredL2).value, d2 / o2, 1e-12);
}
