#pragma once

// Plain SGD with decoupled weight decay, global-norm clipping, learning-rate
// schedules, and the post-step clamps applied to LayerNorm scales and zeroth
// biases.

#include <cmath>
#include <numbers>
#include <string>

#include "sdl/network.hpp"

namespace sdl {

enum class ScheduleKind { Constant, CosineAnneal, InverseSqrt };

struct Schedule {
  ScheduleKind kind = ScheduleKind::Constant;
  std::size_t warmup = 0;  // InverseSqrt only

  // Multiplier on the base learning rate at 0-based step `step` of `total`.
  double factor(std::size_t step, std::size_t total) const {
    switch (kind) {
      case ScheduleKind::Constant:
        return 1.0;
      case ScheduleKind::CosineAnneal:
        if (total == 0) return 1.0;
        return 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total)));
      case ScheduleKind::InverseSqrt: {
        const double t = static_cast<double>(step + 1);
        const double w = static_cast<double>(std::max<std::size_t>(warmup, 1));
        return std::min(t / w, std::sqrt(w / t));
      }
    }
    return 1.0;
  }
};

inline Schedule parse_schedule(const std::string& s, std::size_t warmup) {
  if (s == "constant") return {ScheduleKind::Constant, 0};
  if (s == "cosine") return {ScheduleKind::CosineAnneal, 0};
  if (s == "inverse_sqrt") return {ScheduleKind::InverseSqrt, warmup};
  fail(ErrorKind::InvalidArgument, "unknown schedule '" + s + "'");
}

inline std::string schedule_name(const Schedule& s) {
  switch (s.kind) {
    case ScheduleKind::Constant: return "constant";
    case ScheduleKind::CosineAnneal: return "cosine";
    case ScheduleKind::InverseSqrt: return "inverse_sqrt";
  }
  return "";
}

// θ ← (1 − lr·w)·θ − lr·g for weights and biases; θ ← θ − lr·g for
// LayerNorm scales and zeroth biases. `lr` is the already-scheduled rate.
inline void sgd_step(Parameters& params, const Parameters& grads, double lr, double weight_decay) {
  require(params.spec == grads.spec, ErrorKind::Shape, "sgd_step: gradient shapes do not match parameters");
  std::vector<std::span<const double>> gspans = tensor_spans(grads);
  std::size_t idx = 0;
  const double shrink = 1.0 - lr * weight_decay;
  for_each_tensor(params, [&](const auto& t) {
    auto g = gspans[idx++];
    const double keep = decays(t.role) ? shrink : 1.0;
    for (std::size_t i = 0; i < t.values.size(); ++i) t.values[i] = keep * t.values[i] - lr * g[i];
  });
}

// Rescales every gradient by max_norm/‖g‖ when the global norm exceeds max_norm.
// Returns the norm before clipping.
inline double clip_gradients(Parameters& grads, double max_norm) {
  require(max_norm > 0.0, ErrorKind::InvalidArgument, "clip_gradients: max_norm must be > 0");
  const double norm = global_l2_norm(grads);
  if (norm > max_norm) {
    const double scale = max_norm / norm;
    for_each_tensor(grads, [&](const auto& t) {
      for (double& v : t.values) v *= scale;
    });
  }
  return norm;
}

// LayerNorm scale ← max(scale, 1).
inline void restrict_layernorm(Parameters& params) {
  require(params.spec.use_layernorm, ErrorKind::InvalidArgument, "restrict_layernorm: network has no LayerNorm");
  for (auto& b : params.blocks)
    for (double& w : b.ln_scale) w = std::max(w, 1.0);
}

// d_j ← clamp(d_j, −c·|scale_j|, c·|scale_j|).
inline void restrict_zeroth_biases(Parameters& params, double c_factor) {
  require(params.spec.use_zeroth_bias && params.spec.use_layernorm, ErrorKind::InvalidArgument,
          "restrict_zeroth_biases: needs zeroth biases after LayerNorm");
  require(c_factor > 0.0, ErrorKind::InvalidArgument, "restrict_zeroth_biases: c_factor must be > 0");
  for (auto& b : params.blocks) {
    for (std::size_t j = 0; j < b.zeroth_bias.size(); ++j) {
      const double s = c_factor * std::abs(b.ln_scale[j]);
      b.zeroth_bias[j] = std::clamp(b.zeroth_bias[j], -s, s);
    }
  }
}

// Finetuning variant: keeps signs (zeros count as positive) and lifts
// |scale| to at least min(t / T_uplift, 1).
inline void uplift_layernorm(Parameters& params, std::size_t t_uplift, std::size_t t) {
  require(params.spec.use_layernorm, ErrorKind::InvalidArgument, "uplift_layernorm: network has no LayerNorm");
  require(t_uplift >= 1, ErrorKind::InvalidArgument, "uplift_layernorm: T_uplift must be >= 1");
  const double floor = std::min(static_cast<double>(t) / static_cast<double>(t_uplift), 1.0);
  auto sign = [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); };
  for (auto& b : params.blocks) {
    for (double& w : b.ln_scale) {
      const double s = sign(sign(w) + 0.1);
      w = s * std::max(std::abs(w), floor);
    }
  }
}

}  // namespace sdl
