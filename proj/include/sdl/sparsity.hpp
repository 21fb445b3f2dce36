#pragma once

// Sparsity measurements over recorded traces.
//
// "Nonzero" means exactly nonzero: ReLU-family activations produce bit-exact
// zeros. Band metrics for the Weird activation use a tolerance on the value
// axis instead. Layer averages weight every layer equally.

#include <cmath>
#include <optional>
#include <utility>

#include "sdl/backprop.hpp"
#include "sdl/network.hpp"

namespace sdl {

namespace detail {
inline double nonzero_fraction(const Matrix& m) {
  if (m.size() == 0) return 0.0;
  std::size_t nz = 0;
  for (double v : m.values())
    if (v != 0.0) ++nz;
  return static_cast<double>(nz) / static_cast<double>(m.size());
}

inline double mean_row_norm2(const Matrix& m) {
  if (m.rows() == 0) return 0.0;
  double s = 0.0;
  for (std::size_t r = 0; r < m.rows(); ++r) s += squared_norm(m.row(r));
  return s / static_cast<double>(m.rows());
}
}  // namespace detail

// Fraction of activation entries that are nonzero, per layer.
inline Vector activation_sparsity(const ForwardTrace& trace) {
  Vector out;
  for (const auto& b : trace.blocks) out.push_back(detail::nonzero_fraction(b.activation));
  return out;
}

// Fraction of activation-derivative entries that are nonzero, per layer.
inline Vector gradient_sparsity(const ForwardTrace& trace) {
  Vector out;
  for (const auto& b : trace.blocks) out.push_back(detail::nonzero_fraction(b.derivative));
  return out;
}

// Batch mean of ‖η‖₂² per layer.
inline Vector effective_gradient_norms(const GradientTrace& gt) {
  Vector out;
  for (const auto& b : gt.blocks) out.push_back(detail::mean_row_norm2(b.eta));
  return out;
}

struct EtaGammaIdentity {
  double eta_norm2;               // mean ‖η‖²
  double mean_g2_given_active;    // E[g² | γ = 1]
  double mean_active_count;       // E‖γ‖₀
  double product() const { return mean_g2_given_active * mean_active_count; }
};

// For 0/1 derivatives (ReLU): mean ‖η‖² = E[g² | γ = 1]·E‖γ‖₀ with the
// expectation taken uniformly over active entries of the layer.
inline EtaGammaIdentity eta_gamma_identity(const Matrix& g_key, const Matrix& gamma) {
  require(g_key.rows() == gamma.rows() && g_key.cols() == gamma.cols(), ErrorKind::Shape,
          "eta_gamma_identity: shape mismatch");
  const double N = static_cast<double>(std::max<std::size_t>(g_key.rows(), 1));
  double eta2 = 0.0, active_g2 = 0.0;
  std::size_t active = 0;
  for (std::size_t i = 0; i < g_key.size(); ++i) {
    const double g = g_key.values()[i];
    const double e = g * gamma.values()[i];
    eta2 += e * e;
    if (gamma.values()[i] != 0.0) {
      active_g2 += g * g;
      ++active;
    }
  }
  return {eta2 / N, active > 0 ? active_g2 / static_cast<double>(active) : 0.0, static_cast<double>(active) / N};
}

// Fraction of (z, α) pairs inside [Δx − w, Δx + w] × [Δy − tol, Δy + tol], per layer.
inline Vector weird_band_fraction(const ForwardTrace& trace, const ActivationKind& kind, double tol = 1e-6) {
  const auto* w = std::get_if<Weird>(&kind);
  if (!w) fail(ErrorKind::InvalidArgument, "weird_band_fraction: activation is " + activation_name(kind) + ", not weird");
  Vector out;
  for (const auto& b : trace.blocks) {
    std::size_t inside = 0;
    const auto z = b.pre_activation.values();
    const auto a = b.activation.values();
    for (std::size_t i = 0; i < z.size(); ++i) {
      if (z[i] >= w->dx - w->w_half && z[i] <= w->dx + w->w_half && std::abs(a[i] - w->dy) <= tol) ++inside;
    }
    out.push_back(z.empty() ? 0.0 : static_cast<double>(inside) / static_cast<double>(z.size()));
  }
  return out;
}

struct AlignmentStats {
  double mean_g2_all = 0.0;
  std::optional<double> mean_g2_given_active;  // missing when no entry is active
  std::optional<double> log10_ratio;
};

// Compares E[g_K²] over all entries with E[g_K² | γ ≠ 0], per layer.
inline std::vector<AlignmentStats> alignment_stats(const GradientTrace& gt) {
  std::vector<AlignmentStats> out;
  for (const auto& b : gt.blocks) {
    AlignmentStats st;
    double all = 0.0, act = 0.0;
    std::size_t n_act = 0;
    const auto g = b.g_key.values();
    const auto gamma = b.gamma.values();
    for (std::size_t i = 0; i < g.size(); ++i) {
      all += g[i] * g[i];
      if (gamma[i] != 0.0) {
        act += g[i] * g[i];
        ++n_act;
      }
    }
    st.mean_g2_all = g.empty() ? 0.0 : all / static_cast<double>(g.size());
    if (n_act > 0) {
      st.mean_g2_given_active = act / static_cast<double>(n_act);
      if (st.mean_g2_all > 0.0 && *st.mean_g2_given_active > 0.0)
        st.log10_ratio = std::log10(*st.mean_g2_given_active / st.mean_g2_all);
    }
    out.push_back(st);
  }
  return out;
}

struct LayerSparsity {
  double nonzero_fraction_activation = 0.0;
  double nonzero_fraction_gamma = 0.0;
  double alpha_norm2 = 0.0;
  double gamma_norm2 = 0.0;
  double eta_norm2 = 0.0;
  double g_key_norm2 = 0.0;
  double g_value_norm2 = 0.0;
};

struct SparsityReport {
  std::vector<LayerSparsity> layers;
  double average_nonzero_fraction = 0.0;  // activation, uniform over layers
};

inline SparsityReport sparsity_report(const ForwardTrace& trace, const GradientTrace* gt) {
  SparsityReport r;
  for (std::size_t l = 0; l < trace.blocks.size(); ++l) {
    const auto& b = trace.blocks[l];
    LayerSparsity ls;
    ls.nonzero_fraction_activation = detail::nonzero_fraction(b.activation);
    ls.nonzero_fraction_gamma = detail::nonzero_fraction(b.derivative);
    ls.alpha_norm2 = detail::mean_row_norm2(b.activation);
    ls.gamma_norm2 = detail::mean_row_norm2(b.derivative);
    if (gt) {
      ls.eta_norm2 = detail::mean_row_norm2(gt->blocks[l].eta);
      ls.g_key_norm2 = detail::mean_row_norm2(gt->blocks[l].g_key);
      ls.g_value_norm2 = detail::mean_row_norm2(gt->blocks[l].g_value);
    }
    r.average_nonzero_fraction += ls.nonzero_fraction_activation;
    r.layers.push_back(ls);
  }
  if (!r.layers.empty()) r.average_nonzero_fraction /= static_cast<double>(r.layers.size());
  return r;
}

// Step-weighted trapezoidal mean of a sampled curve (step, value), steps
// strictly increasing. A single sample returns its value.
inline double integrate_training_sparsity(std::span<const std::pair<double, double>> samples) {
  if (samples.empty()) fail(ErrorKind::InvalidArgument, "integrate_training_sparsity: no train records");
  if (samples.size() == 1) return samples[0].second;
  double area = 0.0;
  for (std::size_t i = 1; i < samples.size(); ++i) {
    const double dt = samples[i].first - samples[i - 1].first;
    require(dt > 0.0, ErrorKind::InvalidArgument, "integrate_training_sparsity: steps must increase");
    area += 0.5 * dt * (samples[i].second + samples[i - 1].second);
  }
  return area / (samples.back().first - samples.front().first);
}

}  // namespace sdl
