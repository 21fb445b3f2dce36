#pragma once

// Dense double-precision linear algebra, a reproducible RNG, and a symmetric
// eigenvalue solver. Everything here is deliberately small: matrices are
// row-major std::vector<double> buffers and vectors are plain std::vector.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sdl/error.hpp"

namespace sdl {

using Vector = std::vector<double>;

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    Matrix m(r, c);
    std::size_t i = 0;
    for (const auto& row : rows) {
      require(row.size() == c, ErrorKind::Shape, "from_rows: ragged initializer");
      std::copy(row.begin(), row.end(), m.data_.begin() + static_cast<std::ptrdiff_t>(i * c));
      ++i;
    }
    return m;
  }

  static Matrix diagonal(std::span<const double> diag) {
    Matrix m(diag.size(), diag.size());
    for (std::size_t i = 0; i < diag.size(); ++i) m(i, i) = diag[i];
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t i, std::size_t j) noexcept { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const noexcept { return data_[i * cols_ + j]; }

  std::span<double> row(std::size_t i) noexcept { return {data_.data() + i * cols_, cols_}; }
  std::span<const double> row(std::size_t i) const noexcept { return {data_.data() + i * cols_, cols_}; }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }

  Vector column(std::size_t j) const {
    Vector out(rows_);
    for (std::size_t i = 0; i < rows_; ++i) out[i] = (*this)(i, j);
    return out;
  }

  void set_column(std::size_t j, std::span<const double> v) {
    require(v.size() == rows_, ErrorKind::Shape, "set_column: length mismatch");
    for (std::size_t i = 0; i < rows_; ++i) (*this)(i, j) = v[i];
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline std::string shape_str(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

inline bool all_finite(std::span<const double> xs) {
  return std::all_of(xs.begin(), xs.end(), [](double x) { return std::isfinite(x); });
}

// ---------------------------------------------------------------------------
// Vector helpers

inline double dot(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), ErrorKind::Shape, "dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double squared_norm(std::span<const double> a) {
  double s = 0.0;
  for (double x : a) s += x * x;
  return s;
}

inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  require(x.size() == y.size(), ErrorKind::Shape, "axpy: length mismatch");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

// ---------------------------------------------------------------------------
// Matrix arithmetic

// Standard product. The k-loop runs in increasing order for every output
// entry, so results are independent of blocking or thread count.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows())
    fail(ErrorKind::Shape, "matmul: " + shape_str(a) + " * " + shape_str(b));
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto ci = c.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      auto bk = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) ci[j] += aik * bk[j];
    }
  }
  return c;
}

inline Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

// m x
inline Vector matvec(const Matrix& m, std::span<const double> x) {
  require(m.cols() == x.size(), ErrorKind::Shape, "matvec: " + shape_str(m) + " * vector of length " + std::to_string(x.size()));
  Vector y(m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto r = m.row(i);
    double s = 0.0;
    for (std::size_t j = 0; j < r.size(); ++j) s += r[j] * x[j];
    y[i] = s;
  }
  return y;
}

// mᵀ x
inline Vector matvec_transposed(const Matrix& m, std::span<const double> x) {
  require(m.rows() == x.size(), ErrorKind::Shape, "matvec_transposed: " + shape_str(m) + "ᵀ * vector of length " + std::to_string(x.size()));
  Vector y(m.cols(), 0.0);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const double xi = x[i];
    if (xi == 0.0) continue;
    auto r = m.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) y[j] += xi * r[j];
  }
  return y;
}

// m += scale · u vᵀ
inline void add_outer(Matrix& m, double scale, std::span<const double> u, std::span<const double> v) {
  require(m.rows() == u.size() && m.cols() == v.size(), ErrorKind::Shape, "add_outer: shape mismatch");
  for (std::size_t i = 0; i < u.size(); ++i) {
    const double su = scale * u[i];
    if (su == 0.0) continue;
    auto r = m.row(i);
    for (std::size_t j = 0; j < v.size(); ++j) r[j] += su * v[j];
  }
}

// m mᵀ, exploiting symmetry.
inline Matrix gram_rows(const Matrix& m) {
  Matrix g(m.rows(), m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      const double s = dot(m.row(i), m.row(j));
      g(i, j) = s;
      g(j, i) = s;
    }
  }
  return g;
}

inline double trace(const Matrix& m) {
  require(m.rows() == m.cols(), ErrorKind::Shape, "trace: non-square " + shape_str(m));
  double s = 0.0;
  for (std::size_t i = 0; i < m.rows(); ++i) s += m(i, i);
  return s;
}

inline double frobenius_norm(const Matrix& m) { return std::sqrt(squared_norm(m.values())); }

inline double max_abs(std::span<const double> xs) {
  double m = 0.0;
  for (double x : xs) m = std::max(m, std::abs(x));
  return m;
}

// sqrt of the sum of squares of every entry in every tensor.
inline double global_l2_norm(std::span<const std::span<const double>> tensors) {
  double s = 0.0;
  for (auto t : tensors) s += squared_norm(t);
  return std::sqrt(s);
}

inline double global_l2_norm(std::initializer_list<std::span<const double>> tensors) {
  return global_l2_norm(std::span<const std::span<const double>>(tensors.begin(), tensors.size()));
}

// ---------------------------------------------------------------------------
// Symmetric eigenvalues

namespace detail {

inline constexpr std::size_t kJacobiMaxDim = 512;

inline Vector jacobi_eigenvalues(Matrix a) {
  const std::size_t n = a.rows();
  const double scale = squared_norm(a.values());
  constexpr int kMaxSweeps = 100;
  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    // Off-diagonal Frobenius norm below 1e-14·‖A‖ bounds every eigenvalue error by the same.
    if (off <= 1e-28 * scale || off == 0.0) {
      Vector out(n);
      for (std::size_t i = 0; i < n; ++i) out[i] = a(i, i);
      return out;
    }
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double app = a(p, p);
        const double aqq = a(q, q);
        const double theta = (aqq - app) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k);
          const double aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        a(p, q) = 0.0;
        a(q, p) = 0.0;
      }
    }
  }
  fail(ErrorKind::Numeric, "jacobi eigensolver did not converge after " + std::to_string(kMaxSweeps) + " sweeps");
}

// Householder reduction to tridiagonal form using the lower triangle.
// diag receives the diagonal, sub[i] the entry coupling i-1 and i (sub[0] = 0).
inline void tridiagonalize(Matrix a, Vector& diag, Vector& sub) {
  const std::size_t n = a.rows();
  diag.assign(n, 0.0);
  sub.assign(n, 0.0);
  for (std::size_t i = n - 1; i > 0; --i) {
    const std::size_t l = i - 1;
    if (l > 0) {
      double scale = 0.0;
      for (std::size_t k = 0; k <= l; ++k) scale += std::abs(a(i, k));
      if (scale == 0.0) {
        sub[i] = a(i, l);
        continue;
      }
      double h = 0.0;
      for (std::size_t k = 0; k <= l; ++k) {
        a(i, k) /= scale;
        h += a(i, k) * a(i, k);
      }
      double f = a(i, l);
      double g = f >= 0.0 ? -std::sqrt(h) : std::sqrt(h);
      sub[i] = scale * g;
      h -= f * g;
      a(i, l) = f - g;
      f = 0.0;
      for (std::size_t j = 0; j <= l; ++j) {
        g = 0.0;
        for (std::size_t k = 0; k <= j; ++k) g += a(j, k) * a(i, k);
        for (std::size_t k = j + 1; k <= l; ++k) g += a(k, j) * a(i, k);
        sub[j] = g / h;
        f += sub[j] * a(i, j);
      }
      const double hh = f / (h + h);
      for (std::size_t j = 0; j <= l; ++j) {
        f = a(i, j);
        g = sub[j] - hh * f;
        sub[j] = g;
        for (std::size_t k = 0; k <= j; ++k) a(j, k) -= f * sub[k] + g * a(i, k);
      }
    } else {
      sub[i] = a(i, l);
    }
  }
  sub[0] = 0.0;
  for (std::size_t i = 0; i < n; ++i) diag[i] = a(i, i);
}

// Implicit QL with Wilkinson shifts on a symmetric tridiagonal matrix.
inline void tridiagonal_ql(Vector& d, Vector sub) {
  const std::size_t n = d.size();
  if (n < 2) return;
  Vector e(n, 0.0);
  for (std::size_t i = 1; i < n; ++i) e[i - 1] = sub[i];
  constexpr int kMaxIter = 60;
  for (std::size_t l = 0; l < n; ++l) {
    int iter = 0;
    while (true) {
      std::size_t m = l;
      for (; m + 1 < n; ++m) {
        const double dd = std::abs(d[m]) + std::abs(d[m + 1]);
        if (std::abs(e[m]) <= std::numeric_limits<double>::epsilon() * dd) break;
      }
      if (m == l) break;
      if (++iter > kMaxIter)
        fail(ErrorKind::Numeric, "tridiagonal QL did not converge after " + std::to_string(kMaxIter) +
                                     " iterations at index " + std::to_string(l));
      double g = (d[l + 1] - d[l]) / (2.0 * e[l]);
      double r = std::hypot(g, 1.0);
      g = d[m] - d[l] + e[l] / (g + std::copysign(r, g));
      double s = 1.0, c = 1.0, p = 0.0;
      bool underflow = false;
      for (std::size_t i = m; i-- > l;) {
        double f = s * e[i];
        const double b = c * e[i];
        r = std::hypot(f, g);
        e[i + 1] = r;
        if (r == 0.0) {
          d[i + 1] -= p;
          e[m] = 0.0;
          underflow = true;
          break;
        }
        s = f / r;
        c = g / r;
        g = d[i + 1] - p;
        r = (d[i] - g) * s + 2.0 * c * b;
        p = s * r;
        d[i + 1] = g + p;
        g = c * r - b;
      }
      if (underflow) continue;
      d[l] -= p;
      e[l] = g;
      e[m] = 0.0;
    }
  }
}

}  // namespace detail

// Eigenvalues of a symmetric matrix in descending order. Inputs are checked
// for symmetry (1e-9 relative to the largest entry) and symmetrized by
// (M + Mᵀ)/2 before solving. Cyclic Jacobi up to 512 dimensions, Householder
// tridiagonalization followed by implicit QL above that.
inline Vector symmetric_eigenvalues(const Matrix& m) {
  if (m.rows() != m.cols()) fail(ErrorKind::Shape, "symmetric_eigenvalues: non-square " + shape_str(m));
  const std::size_t n = m.rows();
  if (n == 0) return {};
  require(all_finite(m.values()), ErrorKind::Numeric, "symmetric_eigenvalues: non-finite entry");
  const double tol = 1e-9 * std::max(max_abs(m.values()), std::numeric_limits<double>::min());
  Matrix sym(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      if (std::abs(m(i, j) - m(j, i)) > tol)
        fail(ErrorKind::InvalidArgument, "symmetric_eigenvalues: asymmetric at (" + std::to_string(i) + "," +
                                             std::to_string(j) + ")");
      const double v = 0.5 * (m(i, j) + m(j, i));
      sym(i, j) = v;
      sym(j, i) = v;
    }
  }
  Vector eig;
  if (n <= detail::kJacobiMaxDim) {
    eig = detail::jacobi_eigenvalues(std::move(sym));
  } else {
    Vector sub;
    detail::tridiagonalize(std::move(sym), eig, sub);
    detail::tridiagonal_ql(eig, std::move(sub));
  }
  std::sort(eig.begin(), eig.end(), std::greater<>());
  return eig;
}

// ---------------------------------------------------------------------------
// Rng

// Reproducible random stream: std::mt19937_64 (bit-exact across standard
// libraries) seeded through splitmix64. Distributions are implemented here
// rather than with <random> distributions, whose outputs are
// implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(splitmix64(seed)) {}

  std::uint64_t seed() const noexcept { return seed_; }

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal by Box-Muller; the second variate is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  double rademacher() { return (engine_() >> 63) ? 1.0 : -1.0; }

  // Uniform integer in [0, n), unbiased by rejection.
  std::size_t below(std::size_t n) {
    require(n > 0, ErrorKind::InvalidArgument, "Rng::below: n must be positive");
    const std::uint64_t bound = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % bound;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return static_cast<std::size_t>(x % bound);
  }

  // Independent child stream; depends only on (seed, stream id).
  Rng split(std::uint64_t stream) const { return Rng(splitmix64(seed_ ^ splitmix64(stream + 0x632BE59BD9B4E019ULL))); }

  static std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace sdl
