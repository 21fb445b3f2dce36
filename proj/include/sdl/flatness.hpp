#pragma once

// Terms of the flatness → implicit adversarial robustness → sparsity chain
// for single-token MLPs, plus a Hutchinson estimate of the Hessian trace
// used as an independent flatness measurement.
//
// Per sample and block l (u = x^{l-1} + d^l):
//   term1 = ηᵀ K Kᵀ η = ‖∂CE/∂d‖²           (counted in the chain only for DB-MLPs)
//   term2 = ‖u‖² ‖η‖²   = ‖∂CE/∂K‖²
//   term3 = ‖g_V‖² ‖α‖² = ‖∂CE/∂V‖²
// and the chain reads E‖∇_θ CE‖² ≥ Σ_l E[term1 + term2 + term3].

#include <cmath>
#include <functional>

#include "sdl/backprop.hpp"
#include "sdl/network.hpp"

namespace sdl {

struct LayerBoundTerms {
  double term1 = 0.0;
  double term2 = 0.0;
  double term2_ln_d = 0.0;  // d · E‖η‖²
  double term2_ln_c = 0.0;  // (√d − c)² · E‖η‖²
  double term3 = 0.0;
  double eta_norm2 = 0.0;
};

struct BoundTerms {
  std::vector<LayerBoundTerms> layers;
  double chain_total = 0.0;      // Σ_l (term1·[zeroth bias] + term2 + term3)
  double grad_norm_proxy = 0.0;  // E‖∇_θ CE‖²
  double slack() const { return grad_norm_proxy - chain_total; }
};

inline BoundTerms bound_terms(const Parameters& params, const ForwardTrace& tr, const GradientTrace& gt, double c_zb) {
  const NetworkSpec& spec = params.spec;
  const std::size_t N = tr.batch;
  const double inv_n = N ? 1.0 / static_cast<double>(N) : 0.0;
  const double d = static_cast<double>(spec.hidden_width);
  BoundTerms bt;
  for (std::size_t l = 0; l < spec.num_blocks; ++l) {
    LayerBoundTerms lt;
    const auto& fb = tr.blocks[l];
    const auto& gb = gt.blocks[l];
    for (std::size_t s = 0; s < N; ++s) {
      const double eta2 = squared_norm(gb.eta.row(s));
      lt.term1 += squared_norm(gb.g_block_input.row(s));
      lt.term2 += squared_norm(fb.shifted_input.row(s)) * eta2;
      lt.term3 += squared_norm(gb.g_value.row(s)) * squared_norm(fb.activation.row(s));
      lt.eta_norm2 += eta2;
    }
    lt.term1 *= inv_n;
    lt.term2 *= inv_n;
    lt.term3 *= inv_n;
    lt.eta_norm2 *= inv_n;
    lt.term2_ln_d = d * lt.eta_norm2;
    const double root = std::sqrt(d) - c_zb;
    lt.term2_ln_c = root * root * lt.eta_norm2;
    bt.chain_total += (spec.use_zeroth_bias ? lt.term1 : 0.0) + lt.term2 + lt.term3;
    bt.layers.push_back(lt);
  }
  for (double v : gt.per_sample_grad_norm2) bt.grad_norm_proxy += v;
  bt.grad_norm_proxy *= inv_n;
  return bt;
}

inline BoundTerms bound_chain(const Parameters& params, const Matrix& batch, const Labels& labels, double c_zb) {
  const ForwardResult fr = forward(params, batch, true);
  const GradientTrace gt = backward(params, fr.trace, labels);
  return bound_terms(params, *fr.trace, gt, c_zb);
}

// Mean over samples of ‖∇_θ CE_s‖₂².
inline double samplewise_grad_norm_sum(const Parameters& params, const Matrix& batch, const Labels& labels) {
  const ForwardResult fr = forward(params, batch, true);
  const GradientTrace gt = backward(params, fr.trace, labels);
  double s = 0.0;
  for (double v : gt.per_sample_grad_norm2) s += v;
  return gt.per_sample_grad_norm2.empty() ? 0.0 : s / static_cast<double>(gt.per_sample_grad_norm2.size());
}

// Gradient of the mean loss, flattened in for_each_tensor order.
inline Vector loss_gradient(const Parameters& params, const Matrix& batch, const Labels& labels) {
  const ForwardResult fr = forward(params, batch, true);
  return flatten(backward(params, fr.trace, labels).grads);
}

struct TraceEstimate {
  double mean = 0.0;
  double standard_error = 0.0;
};

// Hutchinson estimator (1/probes)·Σ vᵀHv with Rademacher probes v, where
// Hv comes from central differences of the gradient with step
// eps_scale·(1 + ‖θ‖∞).
inline TraceEstimate hutchinson_trace(const std::function<Vector(std::span<const double>)>& gradient,
                                      std::span<const double> theta, std::size_t probes, Rng& rng,
                                      double eps_scale = 1e-4) {
  require(probes >= 1, ErrorKind::InvalidArgument, "hutchinson_trace: probes must be >= 1");
  const std::size_t dim = theta.size();
  const double eps = eps_scale * (1.0 + max_abs(theta));
  Vector plus(dim), minus(dim), v(dim);
  Vector samples;
  samples.reserve(probes);
  for (std::size_t k = 0; k < probes; ++k) {
    for (std::size_t i = 0; i < dim; ++i) {
      v[i] = rng.rademacher();
      plus[i] = theta[i] + eps * v[i];
      minus[i] = theta[i] - eps * v[i];
    }
    const Vector gp = gradient(plus);
    const Vector gm = gradient(minus);
    double q = 0.0;
    for (std::size_t i = 0; i < dim; ++i) q += v[i] * (gp[i] - gm[i]);
    samples.push_back(q / (2.0 * eps));
  }
  TraceEstimate est;
  for (double q : samples) est.mean += q;
  est.mean /= static_cast<double>(probes);
  if (probes > 1) {
    double var = 0.0;
    for (double q : samples) var += (q - est.mean) * (q - est.mean);
    var /= static_cast<double>(probes - 1);
    est.standard_error = std::sqrt(var / static_cast<double>(probes));
  }
  return est;
}

// Hessian trace of the mean cross entropy of (batch, labels) at params.
inline TraceEstimate hutchinson_hessian_trace(const Parameters& params, const Matrix& batch, const Labels& labels,
                                              std::size_t probes, Rng& rng) {
  Parameters work = params;
  auto grad = [&](std::span<const double> theta) {
    assign_flat(work, theta);
    return loss_gradient(work, batch, labels);
  };
  const Vector theta = flatten(params);
  return hutchinson_trace(grad, theta, probes, rng);
}

struct AdversarialIdentity {
  double lhs = 0.0;  // ‖∂CE/∂x^{l-1}‖² from backprop
  double rhs = 0.0;  // ηᵀ (K Kᵀ) η with K Kᵀ formed explicitly
  double abs_diff = 0.0;
};

// One entry per block for a single sample.
inline std::vector<AdversarialIdentity> check_adversarial_identity(const Parameters& params,
                                                                    std::span<const double> sample, std::size_t label) {
  require(params.spec.use_zeroth_bias, ErrorKind::InvalidArgument, "check_adversarial_identity: needs zeroth biases");
  Matrix batch(params.spec.input_dim, 1);
  batch.set_column(0, sample);
  const ForwardResult fr = forward(params, batch, true);
  const GradientTrace gt = backward(params, fr.trace, Labels{label});
  std::vector<AdversarialIdentity> out;
  for (std::size_t l = 0; l < params.spec.num_blocks; ++l) {
    AdversarialIdentity id;
    id.lhs = squared_norm(gt.blocks[l].g_block_input.row(0));
    const Matrix kkt = gram_rows(params.blocks[l].key);
    const auto eta = gt.blocks[l].eta.row(0);
    id.rhs = dot(eta, matvec(kkt, eta));
    id.abs_diff = std::abs(id.lhs - id.rhs);
    out.push_back(id);
  }
  return out;
}

struct MagicVarianceCheck {
  double loss_variance_over_sigma2 = 0.0;
  double standard_error = 0.0;              // of loss_variance_over_sigma2
  double weight_grad_norm2 = 0.0;    // Σ_W ‖∂CE/∂W‖² over noised weight matrices
};

// Loss variance under after-multiplication noise of scale σ‖x‖ on every
// linear layer, divided by σ². To first order it equals Σ_W ‖∂CE/∂W‖² for
// one sample, which is what a noise-duplicated model's flatness term sees.
inline MagicVarianceCheck magic_loss_variance(const Parameters& params, std::span<const double> sample,
                                              std::size_t label, double sigma, std::size_t draws, Rng& rng) {
  require(sigma > 0.0 && draws >= 2, ErrorKind::InvalidArgument, "magic_loss_variance: needs sigma > 0 and draws >= 2");
  Matrix batch(params.spec.input_dim, 1);
  batch.set_column(0, sample);
  const ForwardResult fr = forward(params, batch, true);
  const GradientTrace gt = backward(params, fr.trace, Labels{label});
  MagicVarianceCheck out;
  out.weight_grad_norm2 = squared_norm(gt.grads.input_weight.values()) + squared_norm(gt.grads.classifier_weight.values());
  for (const auto& b : gt.grads.blocks) out.weight_grad_norm2 += squared_norm(b.key.values()) + squared_norm(b.value.values());

  NoiseOptions noise{sigma, 0.0, &rng};
  Vector losses(draws);
  for (std::size_t k = 0; k < draws; ++k) {
    const ForwardResult noisy = forward(params, batch, false, noise);
    losses[k] = cross_entropy(noisy.logits.column(0), label);
  }
  double mean = 0.0;
  for (double v : losses) mean += v;
  mean /= static_cast<double>(draws);
  double m2 = 0.0, m4 = 0.0;
  for (double v : losses) {
    const double c = (v - mean) * (v - mean);
    m2 += c;
    m4 += c * c;
  }
  const double var = m2 / static_cast<double>(draws - 1);
  m4 /= static_cast<double>(draws);
  const double var_of_var = std::max(m4 - var * var, 0.0) / static_cast<double>(draws);
  out.loss_variance_over_sigma2 = var / (sigma * sigma);
  out.standard_error = std::sqrt(var_of_var) / (sigma * sigma);
  return out;
}

}  // namespace sdl
