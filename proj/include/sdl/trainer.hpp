#pragma once

// The SGD training loop: sample → forward(record) → backward → clip → SGD →
// post-step clamps, with metrics logging and streamed update covariances.

#include <functional>
#include <optional>

#include "sdl/backprop.hpp"
#include "sdl/flatness.hpp"
#include "sdl/ingest.hpp"
#include "sdl/metrics.hpp"
#include "sdl/optim.hpp"
#include "sdl/rmt.hpp"
#include "sdl/sparsity.hpp"

namespace sdl {

struct Algo1Config {
  bool enabled = false;
  double c_factor = 0.1;
};

struct Algo2Config {
  bool enabled = false;
  std::size_t t_uplift = 1000;
};

struct MagicConfig {
  bool enabled = false;
  double sigma = 0.0;
  double adaptive_rho = 0.0;  // > 0 selects σ² = ρ·mean|W| per matrix
};

struct TrainConfig {
  double lr = 1e-3;
  double weight_decay = 0.0;
  std::optional<double> clip_global_norm;
  std::size_t batch_size = 32;
  std::size_t steps = 0;
  Schedule schedule;
  std::uint64_t seed = 0;
  InitScheme init = InitScheme::KaimingGaussian;
  Algo1Config algo1;
  Algo2Config algo2;
  MagicConfig magic;
  bool sample_with_replacement = false;
  std::size_t log_every = 20;
  bool log_bounds = true;
  bool accumulate = true;         // stream u and η columns into accumulators
  bool accumulate_decay = false;  // weight older steps by r = 1 − lr·w
  std::size_t test_every = 0;     // 0: evaluate the test set once, after training
  std::size_t test_samples = 0;   // 0: whole test set

  void validate() const {
    require(lr > 0.0, ErrorKind::InvalidArgument, "lr must be > 0");
    require(weight_decay >= 0.0, ErrorKind::InvalidArgument, "weight_decay must be >= 0");
    require(lr * weight_decay < 1.0, ErrorKind::InvalidArgument, "lr * weight_decay must be < 1");
    require(!clip_global_norm || *clip_global_norm > 0.0, ErrorKind::InvalidArgument, "clip must be > 0");
    require(batch_size >= 1, ErrorKind::InvalidArgument, "batch_size must be >= 1");
    require(log_every >= 1, ErrorKind::InvalidArgument, "log_every must be >= 1");
    require(!algo1.enabled || algo1.c_factor > 0.0, ErrorKind::InvalidArgument, "algo1 c_factor must be > 0");
    require(!algo2.enabled || algo2.t_uplift >= 1, ErrorKind::InvalidArgument, "algo2 T_uplift must be >= 1");
    require(!(algo1.enabled && algo2.enabled), ErrorKind::InvalidArgument, "algo1 and algo2 are mutually exclusive");
    require(!magic.enabled || (magic.sigma >= 0.0 && magic.adaptive_rho >= 0.0), ErrorKind::InvalidArgument,
            "magic sigma/rho must be >= 0");
  }
};

// Passed to the observer after every step.
struct StepEvent {
  std::size_t step;
  double lr;                      // scheduled rate used in this step
  double clip_scale;              // factor applied to gradients (1 when not clipped)
  const Parameters* before;       // parameters before the step (set only when keep_before)
  const Parameters& after;        // parameters after the step and clamps
  const ForwardTrace& trace;
  const GradientTrace& gradients; // unclipped batch gradients
  const std::vector<std::size_t>& indices;
};

struct StepObserver {
  std::function<void(const StepEvent&)> on_step;
  bool keep_before = false;  // copy parameters before each step into StepEvent::before
};

struct TrainResult {
  Parameters initial;
  Parameters params;
  MetricsLog log;
  std::vector<UpdateStreamAccumulator> x_streams;    // per block, p = d
  std::vector<UpdateStreamAccumulator> eta_streams;  // per block, p = n
};

// Per-layer sparsity (plus weird band and alignment) of a recorded pass.
inline std::vector<LayerMetrics> layer_metrics(const NetworkSpec& spec, const ForwardTrace& tr, const GradientTrace* gt) {
  const SparsityReport rep = sparsity_report(tr, gt);
  std::vector<LayerMetrics> out(rep.layers.size());
  std::optional<Vector> band;
  if (std::holds_alternative<Weird>(spec.activation)) band = weird_band_fraction(tr, spec.activation);
  std::optional<std::vector<AlignmentStats>> align;
  if (gt) align = alignment_stats(*gt);
  for (std::size_t l = 0; l < out.size(); ++l) {
    out[l].sparsity = rep.layers[l];
    if (band) out[l].weird_band = (*band)[l];
    if (align) out[l].alignment_log10 = (*align)[l].log10_ratio;
  }
  return out;
}

// Post-step clamp invariants of Algorithms 1–2 (true when neither is enabled).
inline bool clamps_hold(const Parameters& p, const TrainConfig& cfg, std::size_t t) {
  if (cfg.algo1.enabled) {
    for (const auto& b : p.blocks) {
      for (std::size_t j = 0; j < b.ln_scale.size(); ++j) {
        if (b.ln_scale[j] < 1.0) return false;
        if (!b.zeroth_bias.empty() && std::abs(b.zeroth_bias[j]) > cfg.algo1.c_factor * std::abs(b.ln_scale[j]))
          return false;
      }
    }
  }
  if (cfg.algo2.enabled) {
    const double floor = std::min(static_cast<double>(t) / static_cast<double>(cfg.algo2.t_uplift), 1.0);
    for (const auto& b : p.blocks)
      for (double w : b.ln_scale)
        if (std::abs(w) < floor) return false;
  }
  return true;
}

// Loss, accuracy and activation sparsity on (up to max_samples of) a dataset,
// evaluated in chunks of 256 samples.
inline MetricsRecord evaluate(const Parameters& params, const Dataset& ds, std::size_t max_samples = 0) {
  const std::size_t n = max_samples == 0 ? ds.size() : std::min(max_samples, ds.size());
  require(n >= 1, ErrorKind::InvalidArgument, "evaluate: empty dataset");
  MetricsRecord rec;
  rec.split = "test";
  const std::size_t L = params.spec.num_blocks;
  std::vector<LayerMetrics> acc(L);
  double correct = 0.0, loss = 0.0;
  constexpr std::size_t kChunk = 256;
  for (std::size_t start = 0; start < n; start += kChunk) {
    const std::size_t end = std::min(start + kChunk, n);
    std::vector<std::size_t> idx(end - start);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = start + i;
    auto [batch, labels] = ds.gather(idx);
    const ForwardResult fr = forward(params, batch, true);
    const auto lm = layer_metrics(params.spec, *fr.trace, nullptr);
    const double w = static_cast<double>(idx.size());
    for (std::size_t l = 0; l < L; ++l) {
      auto& a = acc[l];
      a.sparsity.nonzero_fraction_activation += w * lm[l].sparsity.nonzero_fraction_activation;
      a.sparsity.nonzero_fraction_gamma += w * lm[l].sparsity.nonzero_fraction_gamma;
      a.sparsity.alpha_norm2 += w * lm[l].sparsity.alpha_norm2;
      a.sparsity.gamma_norm2 += w * lm[l].sparsity.gamma_norm2;
      if (lm[l].weird_band) a.weird_band = a.weird_band.value_or(0.0) + w * *lm[l].weird_band;
    }
    for (std::size_t s = 0; s < idx.size(); ++s) {
      auto row = fr.trace->logits.row(s);
      loss += cross_entropy(row, labels[s]);
      if (static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()) == labels[s]) correct += 1.0;
    }
  }
  const double inv = 1.0 / static_cast<double>(n);
  for (auto& a : acc) {
    a.sparsity.nonzero_fraction_activation *= inv;
    a.sparsity.nonzero_fraction_gamma *= inv;
    a.sparsity.alpha_norm2 *= inv;
    a.sparsity.gamma_norm2 *= inv;
    if (a.weird_band) *a.weird_band *= inv;
    rec.avg_nonzero += a.sparsity.nonzero_fraction_activation;
  }
  rec.avg_nonzero /= static_cast<double>(L);
  rec.layers = std::move(acc);
  rec.loss = loss * inv;
  rec.accuracy = correct * inv;
  return rec;
}

inline TrainResult train_loop(const NetworkSpec& spec, const TrainConfig& cfg, const Dataset& train,
                              const Dataset* test = nullptr, const StepObserver& observer = {},
                              const Parameters* initial = nullptr) {
  spec.validate();
  cfg.validate();
  train.validate();
  require(train.input_dim() == spec.input_dim, ErrorKind::Shape, "train_loop: dataset input_dim does not match network");
  require(train.num_classes <= spec.num_classes, ErrorKind::Shape, "train_loop: dataset has more classes than network");
  if (test) {
    test->validate();
    require(test->input_dim() == spec.input_dim, ErrorKind::Shape, "train_loop: test input_dim does not match network");
  }

  const Rng root(cfg.seed);
  Rng init_rng = root.split(0);
  Rng noise_rng = root.split(2);
  TrainResult res;
  if (initial) {
    require(initial->spec == spec, ErrorKind::Shape, "train_loop: initial parameters do not match spec");
    res.params = *initial;
  } else {
    res.params = init_params(spec, cfg.init, init_rng);
  }
  res.initial = res.params;
  const double decay = cfg.accumulate_decay ? 1.0 - cfg.lr * cfg.weight_decay : 1.0;
  if (cfg.accumulate) {
    for (std::size_t l = 0; l < spec.num_blocks; ++l) {
      res.x_streams.emplace_back(spec.hidden_width, decay);
      res.eta_streams.emplace_back(spec.mlp_width, decay);
    }
  }

  BatchSampler sampler(train.size(), cfg.batch_size, cfg.sample_with_replacement, root.split(1));
  NoiseOptions noise;
  if (cfg.magic.enabled) noise = NoiseOptions{cfg.magic.sigma, cfg.magic.adaptive_rho, &noise_rng};
  const double c_zb = cfg.algo1.enabled ? cfg.algo1.c_factor : 0.0;

  auto test_record = [&](std::size_t step, std::size_t epoch) {
    MetricsRecord r = evaluate(res.params, *test, cfg.test_samples);
    r.step = step;
    r.epoch = epoch;
    res.log.append(std::move(r));
  };

  Parameters before;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const std::size_t epoch = sampler.epoch();
    const double lr = cfg.lr * cfg.schedule.factor(step, cfg.steps);
    if (test && cfg.test_every > 0 && step % cfg.test_every == 0) test_record(step, epoch);

    const std::vector<std::size_t> idx = sampler.next();
    auto [batch, labels] = train.gather(idx);
    const ForwardResult fr = forward(res.params, batch, true, noise);
    const ForwardTrace& tr = *fr.trace;
    GradientTrace gt = backward(res.params, fr.trace, labels);

    const bool log_now = step % cfg.log_every == 0 || step + 1 == cfg.steps;
    MetricsRecord rec;
    if (log_now) {
      rec.step = step;
      rec.epoch = epoch;
      rec.lr = lr;
      rec.loss = gt.loss;
      rec.accuracy = gt.accuracy;
      rec.layers = layer_metrics(spec, tr, &gt);
      for (const auto& l : rec.layers) rec.avg_nonzero += l.sparsity.nonzero_fraction_activation;
      rec.avg_nonzero /= static_cast<double>(spec.num_blocks);
      if (cfg.log_bounds) rec.bounds = bound_terms(res.params, tr, gt, c_zb);
    }

    if (cfg.accumulate) {
      for (std::size_t l = 0; l < spec.num_blocks; ++l) {
        res.x_streams[l].add_batch(tr.blocks[l].shifted_input);
        res.eta_streams[l].add_batch(gt.blocks[l].eta);
      }
    }

    if (observer.on_step && observer.keep_before) before = res.params;
    Parameters grads = gt.grads;
    double clip_scale = 1.0;
    const double gnorm = global_l2_norm(grads);
    if (cfg.clip_global_norm) {
      clip_gradients(grads, *cfg.clip_global_norm);
      if (gnorm > *cfg.clip_global_norm) clip_scale = *cfg.clip_global_norm / gnorm;
    }
    sgd_step(res.params, grads, lr, cfg.weight_decay);
    if (cfg.algo1.enabled) {
      restrict_layernorm(res.params);
      if (spec.use_zeroth_bias) restrict_zeroth_biases(res.params, cfg.algo1.c_factor);
    }
    if (cfg.algo2.enabled) uplift_layernorm(res.params, cfg.algo2.t_uplift, step + 1);
    for (const auto& t : tensor_spans(res.params))
      if (!all_finite(t)) fail(ErrorKind::Numeric, "train_loop: non-finite parameters after step " + std::to_string(step));

    if (log_now) {
      rec.grad_norm = gnorm;
      if (cfg.accumulate) {
        std::vector<LayerAnisotropy> an;
        for (std::size_t l = 0; l < spec.num_blocks; ++l) {
          LayerAnisotropy a;
          a.columns = res.x_streams[l].columns();
          if (res.x_streams[l].trace_s2() > 0.0) a.x = anisotropy_stats(res.x_streams[l]);
          if (res.eta_streams[l].trace_s2() > 0.0) a.eta = anisotropy_stats(res.eta_streams[l]);
          an.push_back(a);
        }
        rec.anisotropy = std::move(an);
      }
      if (cfg.algo1.enabled || cfg.algo2.enabled) rec.clamps_ok = clamps_hold(res.params, cfg, step + 1);
      res.log.append(std::move(rec));
    }

    if (observer.on_step) {
      observer.on_step(StepEvent{step, lr, clip_scale, observer.keep_before ? &before : nullptr, res.params, tr, gt, idx});
    }
  }
  if (test && cfg.steps > 0) test_record(cfg.steps, sampler.epoch());
  return res;
}

}  // namespace sdl
