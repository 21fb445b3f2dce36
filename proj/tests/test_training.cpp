#include <gtest/gtest.h>

#include "sdl/backprop.hpp"
#include "sdl/optim.hpp"
#include "sdl/trainer.hpp"

using namespace sdl;

namespace {

NetworkSpec db_spec(ActivationKind act = Relu{}, std::size_t d = 16, std::size_t n = 32) {
  NetworkSpec s;
  s.input_dim = 5;
  s.hidden_width = d;
  s.mlp_width = n;
  s.num_blocks = 2;
  s.num_classes = 3;
  s.activation = act;
  s.use_zeroth_bias = true;
  s.use_layernorm = true;
  return s;
}

void randomize(Parameters& p, Rng& rng, double scale = 0.3) {
  for_each_tensor(p, [&](const auto& t) {
    for (double& v : t.values) v = (t.role == TensorRole::LayerNormScale ? 1.0 : 0.0) + scale * rng.normal();
  });
}

Matrix random_batch(std::size_t dim, std::size_t n, Rng& rng) {
  Matrix m(dim, n);
  for (double& v : m.values()) v = rng.normal();
  return m;
}

Labels random_labels(std::size_t n, std::size_t classes, Rng& rng) {
  Labels y(n);
  for (auto& v : y) v = rng.below(classes);
  return y;
}

GradientTrace run_backward(const Parameters& p, const Matrix& batch, const Labels& y) {
  return backward(p, forward(p, batch, true).trace, y);
}

// Fourth-order central differences of the mean loss for every parameter.
Vector finite_difference_gradient(const Parameters& p, const Matrix& batch, const Labels& y, double eps) {
  Parameters work = p;
  Vector theta = flatten(p);
  Vector g(theta.size());
  auto at = [&](std::size_t i, double keep, double offset) {
    theta[i] = keep + offset;
    assign_flat(work, theta);
    return mean_loss(work, batch, y);
  };
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double keep = theta[i];
    const double f2 = at(i, keep, 2 * eps), f1 = at(i, keep, eps);
    const double m1 = at(i, keep, -eps), m2 = at(i, keep, -2 * eps);
    theta[i] = keep;
    g[i] = (-f2 + 8 * f1 - 8 * m1 + m2) / (12.0 * eps);
  }
  return g;
}

Parameters make_grads(const NetworkSpec& s, double value) {
  Parameters g = zero_parameters(s);
  for_each_tensor(g, [&](const auto& t) {
    for (double& v : t.values) v = value;
  });
  return g;
}

Parameters filled(const NetworkSpec& s, double value) { return make_grads(s, value); }

}  // namespace

// ---------------------------------------------------------------------------
// backward

// (activation, FD step). Piecewise-linear activations use a small step so no
// perturbation crosses a kink; squared ReLU is curved and uses a larger step
// so that rounding noise stays below the tolerance.
using FdCase = std::pair<std::string, double>;
class BackwardFiniteDifference : public ::testing::TestWithParam<FdCase> {};

TEST_P(BackwardFiniteDifference, EveryParameterMatches) {
  const auto& [act, step] = GetParam();
  const NetworkSpec s = db_spec(parse_activation(act));
  Rng rng(11);
  Parameters p = init_params(s, InitScheme::KaimingGaussian, rng);
  randomize(p, rng);
  const Matrix batch = random_batch(s.input_dim, 4, rng);
  const Labels y = random_labels(4, s.num_classes, rng);
  const Vector g = flatten(run_backward(p, batch, y).grads);
  const Vector fd = finite_difference_gradient(p, batch, y, step);
  ASSERT_EQ(g.size(), fd.size());
  double worst = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    // Relative error with a floor that keeps rounding noise of exactly-zero
    // gradients from dominating.
    const double denom = std::max({std::abs(g[i]), std::abs(fd[i]), 1e-4});
    worst = std::max(worst, std::abs(g[i] - fd[i]) / denom);
  }
  EXPECT_LT(worst, 1e-6) << act;
}

INSTANTIATE_TEST_SUITE_P(Activations, BackwardFiniteDifference,
                         ::testing::Values(FdCase{"relu", 1e-5}, FdCase{"jrelu", 1e-5}, FdCase{"squared_relu", 1e-3},
                                           FdCase{"weird:0.4:0.1:0.2", 1e-5}, FdCase{"mix:relu:jrelu:0.3", 1e-5}));

TEST(Backward, PerfectFitGivesZeroGradients) {
  const NetworkSpec s = db_spec();
  Rng rng(12);
  Parameters p = init_params(s, InitScheme::KaimingGaussian, rng);
  p.classifier_bias[1] = 1000.0;
  const Matrix batch = random_batch(s.input_dim, 5, rng);
  const GradientTrace gt = run_backward(p, batch, Labels(5, 1));
  for (const auto& t : tensor_spans(gt.grads))
    for (double v : t) EXPECT_NEAR(v, 0.0, 1e-9);
  for (double v : gt.per_sample_loss) EXPECT_NEAR(v, 0.0, 1e-9);
}

TEST(Backward, EtaIsGkTimesGammaAndZerothBiasGradIsKtEta) {
  const NetworkSpec s = db_spec(JRelu{});
  Rng rng(13);
  Parameters p = init_params(s, InitScheme::KaimingGaussian, rng);
  randomize(p, rng);
  const Matrix batch = random_batch(s.input_dim, 6, rng);
  const ForwardResult fr = forward(p, batch, true);
  const GradientTrace gt = backward(p, fr.trace, random_labels(6, 3, rng));
  for (std::size_t l = 0; l < s.num_blocks; ++l) {
    const auto& b = gt.blocks[l];
    for (std::size_t i = 0; i < b.eta.size(); ++i) EXPECT_EQ(b.eta.values()[i], b.g_key.values()[i] * b.gamma.values()[i]);
    EXPECT_EQ(b.gamma, fr.trace->blocks[l].derivative);
    // ∂L/∂d = batch mean of Kᵀη, which is also the gradient w.r.t. the LayerNorm output.
    Vector mean(s.hidden_width, 0.0);
    for (std::size_t r = 0; r < 6; ++r) {
      const Vector kt_eta = matvec_transposed(p.blocks[l].key, b.eta.row(r));
      for (std::size_t i = 0; i < mean.size(); ++i) {
        EXPECT_NEAR(b.g_block_input(r, i), kt_eta[i], 1e-12);
        mean[i] += kt_eta[i] / 6.0;
      }
    }
    for (std::size_t i = 0; i < mean.size(); ++i) EXPECT_NEAR(gt.grads.blocks[l].zeroth_bias[i], mean[i], 1e-12);
  }
}

TEST(Backward, GradientWrtLayerNormOutputEqualsZerothBiasGradient) {
  // Without a zeroth bias, perturbing the LayerNorm output is not a parameter,
  // so compare against a twin network whose zeroth bias is the perturbation.
  NetworkSpec s = db_spec(SquaredRelu{});
  Rng rng(14);
  Parameters p = init_params(s, InitScheme::KaimingGaussian, rng);
  randomize(p, rng);
  for (auto& b : p.blocks) std::fill(b.zeroth_bias.begin(), b.zeroth_bias.end(), 0.0);
  const Matrix batch = random_batch(s.input_dim, 1, rng);
  const Labels y{2};
  const GradientTrace gt = run_backward(p, batch, y);
  const double eps = 1e-6;
  for (std::size_t l = 0; l < s.num_blocks; ++l) {
    for (std::size_t i = 0; i < s.hidden_width; ++i) {
      Parameters pp = p, pm = p;
      pp.blocks[l].zeroth_bias[i] += eps;
      pm.blocks[l].zeroth_bias[i] -= eps;
      const double fd = (mean_loss(pp, batch, y) - mean_loss(pm, batch, y)) / (2 * eps);
      EXPECT_NEAR(gt.blocks[l].g_block_input(0, i), fd, 1e-7);
      EXPECT_EQ(gt.blocks[l].g_block_input(0, i), gt.grads.blocks[l].zeroth_bias[i]);
    }
  }
}

TEST(Backward, PerSampleGradNormMatchesSingleSampleBackward) {
  const NetworkSpec s = db_spec();
  Rng rng(15);
  Parameters p = init_params(s, InitScheme::KaimingGaussian, rng);
  randomize(p, rng);
  const Matrix batch = random_batch(s.input_dim, 5, rng);
  const Labels y = random_labels(5, 3, rng);
  const GradientTrace gt = run_backward(p, batch, y);
  for (std::size_t k = 0; k < 5; ++k) {
    Matrix one(s.input_dim, 1);
    one.set_column(0, batch.column(k));
    const double n = global_l2_norm(run_backward(p, one, Labels{y[k]}).grads);
    EXPECT_NEAR(gt.per_sample_grad_norm2[k], n * n, 1e-12 * n * n);
  }
}

TEST(Backward, AdversarialIdentityPerSample) {
  const NetworkSpec s = db_spec(JRelu{});
  Rng rng(16);
  Parameters p = init_params(s, InitScheme::KaimingGaussian, rng);
  randomize(p, rng);
  const Matrix batch = random_batch(s.input_dim, 8, rng);
  const GradientTrace gt = run_backward(p, batch, random_labels(8, 3, rng));
  for (std::size_t l = 0; l < s.num_blocks; ++l) {
    const Matrix kkt = gram_rows(p.blocks[l].key);
    for (std::size_t r = 0; r < 8; ++r) {
      const auto eta = gt.blocks[l].eta.row(r);
      EXPECT_NEAR(squared_norm(gt.blocks[l].g_block_input.row(r)), dot(eta, matvec(kkt, eta)), 1e-10);
    }
  }
}

TEST(Backward, MissingTraceIsStructuredError) {
  const NetworkSpec s = db_spec();
  Rng rng(17);
  const Parameters p = init_params(s, InitScheme::KaimingGaussian, rng);
  try {
    backward(p, std::nullopt, Labels{0});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::InvalidArgument);
  }
}

// ---------------------------------------------------------------------------
// sgd_step, clipping, schedules

TEST(SgdStep, ZeroGradientZeroDecayIsIdentity) {
  const NetworkSpec s = db_spec();
  Rng rng(18);
  Parameters p = init_params(s, InitScheme::KaimingGaussian, rng);
  const Parameters before = p;
  sgd_step(p, zero_parameters(s), 0.1, 0.0);
  EXPECT_EQ(p, before);
}

TEST(SgdStep, HandExample) {
  const NetworkSpec s = db_spec();
  Parameters p = filled(s, 1.0);
  sgd_step(p, make_grads(s, 0.25), 1.0, 0.0);
  for (const auto& t : tensor_spans(p))
    for (double v : t) EXPECT_EQ(v, 0.75);
}

TEST(SgdStep, DecayFactorAndExclusions) {
  const NetworkSpec s = db_spec();
  Parameters p = filled(s, 1.0);
  for (int k = 0; k < 3; ++k) sgd_step(p, zero_parameters(s), 1e-3, 0.1);
  for_each_tensor(std::as_const(p), [&](const auto& t) {
    const bool excluded = t.role == TensorRole::LayerNormScale || t.role == TensorRole::ZerothBias;
    for (double v : t.values) {
      if (excluded) EXPECT_EQ(v, 1.0) << t.name;
      else EXPECT_DOUBLE_EQ(v, 0.9999 * 0.9999 * 0.9999) << t.name;
    }
  });
}

TEST(SgdStep, WeightDecayDifferentialLeavesScalesAndZerothBiases) {
  const NetworkSpec s = db_spec();
  Rng rng(19);
  Parameters p = init_params(s, InitScheme::KaimingGaussian, rng);
  randomize(p, rng);
  Parameters g = zero_parameters(s);
  randomize(g, rng);
  Parameters a = p, b = p;
  sgd_step(a, g, 0.01, 0.0);
  sgd_step(b, g, 0.01, 0.5);
  for (std::size_t l = 0; l < s.num_blocks; ++l) {
    EXPECT_EQ(a.blocks[l].ln_scale, b.blocks[l].ln_scale);
    EXPECT_EQ(a.blocks[l].zeroth_bias, b.blocks[l].zeroth_bias);
    EXPECT_NE(a.blocks[l].key, b.blocks[l].key);
  }
}

TEST(ClipGradients, Examples) {
  NetworkSpec s = db_spec();
  s.num_blocks = 1;
  Parameters g = zero_parameters(s);
  g.input_bias[0] = 0.3;
  g.classifier_bias[0] = 0.4;  // norm 0.5
  const Parameters small = g;
  EXPECT_DOUBLE_EQ(clip_gradients(g, 1.0), 0.5);
  EXPECT_EQ(g, small);
  g.input_bias[0] = 2.4;
  g.classifier_bias[0] = 3.2;  // norm 4
  EXPECT_DOUBLE_EQ(clip_gradients(g, 1.0), 4.0);
  EXPECT_DOUBLE_EQ(g.input_bias[0], 0.6);
  EXPECT_NEAR(global_l2_norm(g), 1.0, 1e-12);
  const Parameters once = g;
  clip_gradients(g, 1.0);
  EXPECT_EQ(g, once);
  EXPECT_THROW(clip_gradients(g, 0.0), Error);
}

TEST(Schedules, Factors) {
  EXPECT_EQ(parse_schedule("constant", 0).factor(7, 10), 1.0);
  const Schedule cos = parse_schedule("cosine", 0);
  EXPECT_DOUBLE_EQ(cos.factor(0, 10), 1.0);
  EXPECT_NEAR(cos.factor(5, 10), 0.5, 1e-15);
  const Schedule inv = parse_schedule("inverse_sqrt", 4);
  EXPECT_DOUBLE_EQ(inv.factor(0, 100), 0.25);
  EXPECT_DOUBLE_EQ(inv.factor(3, 100), 1.0);
  EXPECT_DOUBLE_EQ(inv.factor(15, 100), 0.5);
  EXPECT_THROW(parse_schedule("linear", 0), Error);
}

// ---------------------------------------------------------------------------
// Algorithms 1–2

TEST(RestrictLayerNorm, ClampExamples) {
  NetworkSpec s = db_spec();
  s.num_blocks = 1;
  s.hidden_width = 2;
  Parameters p = zero_parameters(s);
  p.blocks[0].ln_scale = {0.3, 1.7};
  restrict_layernorm(p);
  EXPECT_EQ(p.blocks[0].ln_scale, (Vector{1.0, 1.7}));
  const Parameters once = p;
  restrict_layernorm(p);
  EXPECT_EQ(p, once);
}

TEST(RestrictZerothBiases, ClampExamples) {
  NetworkSpec s = db_spec();
  s.num_blocks = 1;
  s.hidden_width = 2;
  Parameters p = zero_parameters(s);
  p.blocks[0].ln_scale = {2.0, 2.0};
  p.blocks[0].zeroth_bias = {0.5, -0.05};
  restrict_zeroth_biases(p, 0.1);
  EXPECT_DOUBLE_EQ(p.blocks[0].zeroth_bias[0], 0.2);
  EXPECT_EQ(p.blocks[0].zeroth_bias[1], -0.05);
  const Parameters once = p;
  restrict_zeroth_biases(p, 0.1);
  EXPECT_EQ(p, once);
  NetworkSpec no_ln = s;
  no_ln.use_layernorm = false;
  Parameters q = zero_parameters(no_ln);
  EXPECT_THROW(restrict_zeroth_biases(q, 0.1), Error);
}

TEST(UpliftLayerNorm, Examples) {
  NetworkSpec s = db_spec();
  s.num_blocks = 1;
  s.hidden_width = 3;
  Parameters p = zero_parameters(s);
  p.blocks[0].ln_scale = {0.0, -0.2, 1.3};
  Parameters half = p;
  uplift_layernorm(p, 100, 100);
  EXPECT_EQ(p.blocks[0].ln_scale[0], 1.0);
  EXPECT_EQ(p.blocks[0].ln_scale[2], 1.3);
  uplift_layernorm(half, 100, 50);
  EXPECT_EQ(half.blocks[0].ln_scale[1], -0.5);
  EXPECT_EQ(half.blocks[0].ln_scale[0], 0.5);
  EXPECT_EQ(half.blocks[0].ln_scale[2], 1.3);
}

// ---------------------------------------------------------------------------
// MAGIC

TEST(MagicPerturb, ZeroSigmaOrZeroInputIsIdentity) {
  Rng rng(20);
  const Vector z{1.0, -2.0, 3.0};
  EXPECT_EQ(magic_perturb(z, Vector{1.0, 2.0}, 0.0, rng), z);
  EXPECT_EQ(magic_perturb(z, Vector{0.0, 0.0}, 0.7, rng), z);
}

TEST(MagicPerturb, EmpiricalVarianceMatches) {
  Rng rng(21);
  const Vector z{0.5, -0.5};
  const Vector x{1.0, 2.0, -2.0};  // ‖x‖² = 9
  const double sigma = 0.3;
  const int draws = 100000;
  double s[2] = {0, 0}, s2[2] = {0, 0};
  for (int k = 0; k < draws; ++k) {
    const Vector e = magic_perturb(z, x, sigma, rng);
    for (int i = 0; i < 2; ++i) {
      s[i] += e[i] - z[i];
      s2[i] += (e[i] - z[i]) * (e[i] - z[i]);
    }
  }
  const double want = sigma * sigma * 9.0;
  for (int i = 0; i < 2; ++i) {
    const double var = s2[i] / draws - (s[i] / draws) * (s[i] / draws);
    EXPECT_GE(var, 0.97 * want);
    EXPECT_LE(var, 1.03 * want);
  }
}

TEST(MagicPerturb, AdaptiveSigma) {
  const Matrix w = Matrix::from_rows({{1, -1}, {3, -3}});
  EXPECT_DOUBLE_EQ(adaptive_sigma(w, 0.5), std::sqrt(0.5 * 2.0));
}

// ---------------------------------------------------------------------------
// train_loop

namespace {

Dataset blobs64(std::uint64_t seed = 3) {
  Rng rng(seed);
  return synthetic_blobs(4, 8, 16, 0.5, rng);
}

NetworkSpec blob_spec() {
  NetworkSpec s;
  s.input_dim = 8;
  s.hidden_width = 16;
  s.mlp_width = 32;
  s.num_blocks = 2;
  s.num_classes = 4;
  return s;
}

}  // namespace

TEST(TrainLoop, ZeroStepsKeepsInitialParameters) {
  TrainConfig cfg;
  cfg.steps = 0;
  cfg.seed = 5;
  const TrainResult r = train_loop(blob_spec(), cfg, blobs64());
  Rng init_rng = Rng(5).split(0);
  EXPECT_EQ(r.params, init_params(blob_spec(), cfg.init, init_rng));
  EXPECT_TRUE(r.log.empty());
}

TEST(TrainLoop, FixedSeedIsBitIdentical) {
  TrainConfig cfg;
  cfg.lr = 0.05;
  cfg.steps = 40;
  cfg.batch_size = 8;
  cfg.weight_decay = 0.01;
  cfg.log_every = 5;
  cfg.magic = {true, 0.01, 0.0};
  const Dataset ds = blobs64();
  const TrainResult a = train_loop(blob_spec(), cfg, ds, &ds);
  const TrainResult b = train_loop(blob_spec(), cfg, ds, &ds);
  EXPECT_EQ(a.log.to_jsonl(), b.log.to_jsonl());
  EXPECT_EQ(a.params, b.params);
  cfg.seed = 1;
  EXPECT_NE(train_loop(blob_spec(), cfg, ds).log.to_jsonl(), a.log.to_jsonl());
}

TEST(TrainLoop, MemorizesSixtyFourBlobSamples) {
  TrainConfig cfg;
  cfg.lr = 0.1;
  cfg.steps = 200;
  cfg.batch_size = 16;
  const Dataset ds = blobs64();
  const TrainResult r = train_loop(blob_spec(), cfg, ds);
  EXPECT_LT(mean_loss(r.params, ds.features, ds.labels), 0.05);
}

TEST(TrainLoop, KeyUpdateEqualsStreamedOuterProducts) {
  TrainConfig cfg;
  cfg.lr = 0.05;
  cfg.steps = 12;
  cfg.batch_size = 8;
  const Dataset ds = blobs64();
  double worst = 0.0;
  StepObserver obs;
  obs.keep_before = true;
  obs.on_step = [&](const StepEvent& ev) {
    const double b = static_cast<double>(ev.indices.size());
    for (std::size_t l = 0; l < ev.after.blocks.size(); ++l) {
      // Η Xᵀ from the streamed columns η^{l,s} and u^{l,s} = x^{l-1,s} + d^{l,s}.
      Matrix hx(ev.after.blocks[l].key.rows(), ev.after.blocks[l].key.cols());
      for (std::size_t s = 0; s < ev.indices.size(); ++s)
        add_outer(hx, 1.0, ev.gradients.blocks[l].eta.row(s), ev.trace.blocks[l].shifted_input.row(s));
      for (std::size_t i = 0; i < hx.size(); ++i) {
        const double delta = ev.after.blocks[l].key.values()[i] - ev.before->blocks[l].key.values()[i];
        worst = std::max(worst, std::abs(delta + ev.lr / b * hx.values()[i]));
      }
    }
  };
  train_loop(blob_spec(), cfg, ds, nullptr, obs);
  EXPECT_LT(worst, 1e-10);
}

TEST(TrainLoop, Algorithm1ClampsHoldAfterEveryStep) {
  TrainConfig cfg;
  cfg.lr = 0.2;
  cfg.steps = 60;
  cfg.batch_size = 8;
  cfg.algo1 = {true, 0.05};
  cfg.log_every = 7;
  const Dataset ds = blobs64();
  std::size_t checked = 0;
  StepObserver obs;
  obs.on_step = [&](const StepEvent& ev) {
    ++checked;
    EXPECT_TRUE(clamps_hold(ev.after, cfg, ev.step + 1)) << ev.step;
  };
  const TrainResult r = train_loop(blob_spec(), cfg, ds, nullptr, obs);
  EXPECT_EQ(checked, 60u);
  for (const auto& rec : r.log.records()) EXPECT_EQ(rec.clamps_ok, std::optional<bool>(true));
}

TEST(TrainLoop, Algorithm2UpliftFloorHolds) {
  TrainConfig cfg;
  cfg.lr = 0.2;
  cfg.steps = 30;
  cfg.batch_size = 8;
  cfg.algo2 = {true, 20};
  const Dataset ds = blobs64();
  StepObserver obs;
  obs.on_step = [&](const StepEvent& ev) { EXPECT_TRUE(clamps_hold(ev.after, cfg, ev.step + 1)); };
  train_loop(blob_spec(), cfg, ds, nullptr, obs);
}

TEST(TrainLoop, LogCadenceAndAccumulatorCounts) {
  TrainConfig cfg;
  cfg.steps = 45;
  cfg.batch_size = 10;  // 64 samples: batches of 10,...,10,4 per epoch
  cfg.log_every = 20;
  const Dataset ds = blobs64();
  const TrainResult r = train_loop(blob_spec(), cfg, ds, &ds);
  std::vector<std::size_t> steps;
  for (const auto* rec : r.log.split("train")) steps.push_back(rec->step);
  EXPECT_EQ(steps, (std::vector<std::size_t>{0, 20, 40, 44}));
  ASSERT_EQ(r.log.split("test").size(), 1u);
  EXPECT_EQ(r.log.split("test")[0]->step, 45u);
  // 45 batches: 6 full epochs of 7 batches (64 samples each) + 3 batches of 10.
  EXPECT_EQ(r.x_streams[0].columns(), 6u * 64u + 30u);
  EXPECT_EQ(r.eta_streams[1].steps(), 45u);
}

TEST(TrainLoop, WithReplacementSamplingRuns) {
  TrainConfig cfg;
  cfg.steps = 10;
  cfg.batch_size = 8;
  cfg.sample_with_replacement = true;
  const TrainResult r = train_loop(blob_spec(), cfg, blobs64());
  EXPECT_EQ(r.x_streams[0].columns(), 80u);
}

TEST(TrainLoop, RejectsInvalidConfig) {
  TrainConfig cfg;
  cfg.lr = 0.0;
  EXPECT_THROW(train_loop(blob_spec(), cfg, blobs64()), Error);
  cfg.lr = 0.1;
  cfg.algo1 = {true, -1.0};
  EXPECT_THROW(train_loop(blob_spec(), cfg, blobs64()), Error);
}

TEST(MetricsLog, StepsStrictlyIncreasePerSplit) {
  MetricsLog log;
  MetricsRecord r;
  r.step = 3;
  log.append(r);
  r.split = "test";
  log.append(r);  // other split: fine
  r.split = "train";
  EXPECT_THROW(log.append(r), Error);
  r.step = 4;
  EXPECT_NO_THROW(log.append(r));
}
