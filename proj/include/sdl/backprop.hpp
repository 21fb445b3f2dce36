#pragma once

// Exact backpropagation of mean cross entropy through a recorded forward pass.
//
// Per-sample quantities are gradients of that sample's own loss CE_s; the
// parameter gradients are the batch mean. For block l and sample s:
//   g_V = ∂CE_s/∂o          (block output before the skip connection)
//   g_K = Vᵀ g_V = ∂CE_s/∂α
//   η   = g_K ⊙ γ           (gradient w.r.t. pre-activations)
//   ∂CE_s/∂K = η (x + d)ᵀ,  ∂CE_s/∂V = g_V αᵀ,  ∂CE_s/∂d = Kᵀ η = ∂CE_s/∂x^{l-1}

#include <optional>

#include "sdl/network.hpp"

namespace sdl {

struct BlockGradTrace {
  Matrix g_value;        // g_V, samples × d
  Matrix g_key;          // g_K, samples × n
  Matrix gamma;          // γ copied from the forward trace
  Matrix eta;            // η = g_K ⊙ γ
  Matrix g_block_input;  // Kᵀ η = ∂CE_s/∂(x^{l-1} + d^l) = ∂CE_s/∂x^{l-1}
};

struct GradientTrace {
  std::vector<BlockGradTrace> blocks;
  Parameters grads;             // batch-mean parameter gradients
  Vector per_sample_loss;       // CE_s
  Vector per_sample_grad_norm2; // ‖∇_θ CE_s‖₂² over every parameter
  double loss = 0.0;            // mean CE
  double accuracy = 0.0;
};

inline GradientTrace backward(const Parameters& params, const std::optional<ForwardTrace>& maybe_trace,
                              const Labels& labels) {
  if (!maybe_trace) fail(ErrorKind::InvalidArgument, "backward: forward trace was not recorded");
  const ForwardTrace& tr = *maybe_trace;
  const NetworkSpec& spec = params.spec;
  const std::size_t N = tr.batch;
  const std::size_t d = spec.hidden_width, n = spec.mlp_width, L = spec.num_blocks, C = spec.num_classes;
  require(labels.size() == N, ErrorKind::Shape, "backward: label count mismatch");
  require(tr.blocks.size() == L && tr.logits.cols() == C && tr.input.cols() == spec.input_dim, ErrorKind::Shape,
          "backward: trace does not match parameters");

  GradientTrace gt;
  gt.grads = zero_parameters(spec);
  gt.blocks.resize(L);
  for (std::size_t l = 0; l < L; ++l) {
    auto& b = gt.blocks[l];
    b.g_value = Matrix(N, d);
    b.g_key = Matrix(N, n);
    b.gamma = tr.blocks[l].derivative;
    b.eta = Matrix(N, n);
    b.g_block_input = Matrix(N, d);
  }
  gt.per_sample_loss.assign(N, 0.0);
  gt.per_sample_grad_norm2.assign(N, 0.0);

  Parameters& G = gt.grads;
  std::size_t correct = 0;
  Vector g_x(d);
  for (std::size_t s = 0; s < N; ++s) {
    const std::size_t y = labels[s];
    require(y < C, ErrorKind::InvalidArgument, "backward: label out of range");
    auto logits = tr.logits.row(s);
    gt.per_sample_loss[s] = cross_entropy(logits, y);
    std::size_t argmax = 0;
    for (std::size_t c = 1; c < C; ++c)
      if (logits[c] > logits[argmax]) argmax = c;
    if (argmax == y) ++correct;

    double norm2 = 0.0;
    Vector g_logits(tr.probs.row(s).begin(), tr.probs.row(s).end());
    g_logits[y] -= 1.0;
    auto x_last = L > 0 ? tr.blocks[L - 1].output.row(s) : tr.input_projection.row(s);
    add_outer(G.classifier_weight, 1.0, g_logits, x_last);
    axpy(1.0, g_logits, G.classifier_bias);
    norm2 += squared_norm(g_logits) * (squared_norm(x_last) + 1.0);
    g_x = matvec_transposed(params.classifier_weight, g_logits);

    for (std::size_t l = L; l-- > 0;) {
      const BlockParams& bp = params.blocks[l];
      const BlockTrace& bt = tr.blocks[l];
      BlockGradTrace& bg = gt.blocks[l];
      BlockParams& gb = G.blocks[l];

      auto g_v = bg.g_value.row(s);
      std::copy(g_x.begin(), g_x.end(), g_v.begin());
      auto alpha = bt.activation.row(s);
      add_outer(gb.value, 1.0, g_v, alpha);
      axpy(1.0, g_v, gb.value_bias);
      norm2 += squared_norm(g_v) * (squared_norm(alpha) + 1.0);

      const Vector g_k = matvec_transposed(bp.value, g_v);
      std::copy(g_k.begin(), g_k.end(), bg.g_key.row(s).begin());
      auto gamma = bt.derivative.row(s);
      auto eta = bg.eta.row(s);
      for (std::size_t i = 0; i < n; ++i) eta[i] = g_k[i] * gamma[i];

      auto u = bt.shifted_input.row(s);
      add_outer(gb.key, 1.0, eta, u);
      axpy(1.0, eta, gb.key_bias);
      const double eta2 = squared_norm(eta);
      norm2 += eta2 * (squared_norm(u) + 1.0);

      const Vector g_u = matvec_transposed(bp.key, eta);
      std::copy(g_u.begin(), g_u.end(), bg.g_block_input.row(s).begin());
      if (spec.use_zeroth_bias) {
        axpy(1.0, g_u, gb.zeroth_bias);
        norm2 += squared_norm(g_u);
      }

      Vector g_in(d);
      if (spec.use_layernorm) {
        auto xhat = bt.ln_normalized.row(s);
        Vector g_xhat(d);
        double mean_g = 0.0, mean_gx = 0.0;
        double scale_norm2 = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
          const double gs = g_u[i] * xhat[i];
          gb.ln_scale[i] += gs;
          scale_norm2 += gs * gs;
          g_xhat[i] = g_u[i] * bp.ln_scale[i];
          mean_g += g_xhat[i];
          mean_gx += g_xhat[i] * xhat[i];
        }
        norm2 += scale_norm2;
        mean_g /= static_cast<double>(d);
        mean_gx /= static_cast<double>(d);
        const double inv = bt.ln_inv_std[s];
        for (std::size_t i = 0; i < d; ++i) g_in[i] = inv * (g_xhat[i] - mean_g - xhat[i] * mean_gx);
      } else {
        g_in = g_u;
      }
      if (spec.use_skip) {
        for (std::size_t i = 0; i < d; ++i) g_x[i] += g_in[i];
      } else {
        g_x = std::move(g_in);
      }
    }

    auto in = tr.input.row(s);
    add_outer(G.input_weight, 1.0, g_x, in);
    axpy(1.0, g_x, G.input_bias);
    norm2 += squared_norm(g_x) * (squared_norm(in) + 1.0);
    gt.per_sample_grad_norm2[s] = norm2;
  }

  const double inv_n = N > 0 ? 1.0 / static_cast<double>(N) : 0.0;
  for_each_tensor(G, [&](const auto& t) {
    for (double& v : t.values) v *= inv_n;
  });
  double loss = 0.0;
  for (double v : gt.per_sample_loss) loss += v;
  gt.loss = loss * inv_n;
  gt.accuracy = static_cast<double>(correct) * inv_n;
  return gt;
}

}  // namespace sdl
