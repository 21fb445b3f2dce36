#pragma once

// Tiny pure-MLP / DB-MLP networks.
//
// Layout of a network with L blocks, hidden width d and MLP width n:
//
//   x⁰ = W_in·input + b_in
//   block l:  skip = x
//             h    = LayerNorm(x; scale)          (if use_layernorm, no additive bias)
//             u    = h + zeroth_bias              (if use_zeroth_bias)
//             z    = K·u + b_K                    K is n×d
//             α    = σ(z),  γ = σ'(z)
//             o    = V·α + b_V                    V is d×n, strictly affine
//             x    = skip + o                     (if use_skip, else x = o)
//   logits = W_out·x^L + b_out
//
// Batches passed to forward() hold one sample per column. Recorded traces
// store one sample per row so that each sample's vector is contiguous.

#include <cmath>
#include <cstdio>
#include <limits>
#include <optional>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "sdl/error.hpp"
#include "sdl/numerics.hpp"

namespace sdl {

// ---------------------------------------------------------------------------
// Activations
//
// Derivatives at branch boundaries are taken from the right-hand branch,
// except that ReLU'(0) = 0 so that γ stays a 0/1 indicator of α > 0:
//   Relu         x ≤ 0 → (0, 0);            x > 0 → (x, 1)
//   JRelu        x < 0 → (0, 0);            x ≥ 0 → (½((x+1)² − 1), x + 1)
//   SquaredRelu  x ≤ 0 → (0, 0);            x > 0 → (x², 2x)
//   Weird        y = x − dx, three branches with a flat band on [−w_half, w_half),
//                then dy is added to the value only
//   Mix          t·b + (1 − t)·a for value and derivative

struct Relu {
  friend bool operator==(const Relu&, const Relu&) = default;
};
struct JRelu {
  friend bool operator==(const JRelu&, const JRelu&) = default;
};
struct SquaredRelu {
  friend bool operator==(const SquaredRelu&, const SquaredRelu&) = default;
};
struct Weird {
  double w_half = 1.5;
  double dx = 0.0;
  double dy = 0.0;
  friend bool operator==(const Weird&, const Weird&) = default;
};

using BasicActivation = std::variant<Relu, JRelu, SquaredRelu, Weird>;

// Linear blend of two non-mixed activations; nesting is limited to one level by type.
struct Mix {
  BasicActivation a;
  BasicActivation b;
  double t = 0.0;
  friend bool operator==(const Mix&, const Mix&) = default;
};

using ActivationKind = std::variant<Relu, JRelu, SquaredRelu, Weird, Mix>;

struct ActValue {
  double value;
  double derivative;
};

namespace detail {

inline ActValue eval_basic(const BasicActivation& kind, double x) {
  return std::visit(
      [x](const auto& k) -> ActValue {
        using K = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<K, Relu>) {
          return x > 0.0 ? ActValue{x, 1.0} : ActValue{0.0, 0.0};
        } else if constexpr (std::is_same_v<K, JRelu>) {
          if (x < 0.0) return {0.0, 0.0};
          return {0.5 * ((x + 1.0) * (x + 1.0) - 1.0), x + 1.0};
        } else if constexpr (std::is_same_v<K, SquaredRelu>) {
          return x > 0.0 ? ActValue{x * x, 2.0 * x} : ActValue{0.0, 0.0};
        } else {
          const double y = x - k.dx;
          const double w = k.w_half;
          if (y < -w) {
            const double s = y + w - 1.0;
            return {-0.5 * (s * s - 1.0) + k.dy, -s};
          }
          if (y < w) return {k.dy, 0.0};
          const double s = y - w + 1.0;
          return {0.5 * (s * s - 1.0) + k.dy, s};
        }
      },
      kind);
}

inline void validate_basic(const BasicActivation& kind) {
  if (const auto* w = std::get_if<Weird>(&kind)) {
    require(w->w_half > 0.0, ErrorKind::InvalidArgument, "Weird activation needs w_half > 0");
    require(std::isfinite(w->dx) && std::isfinite(w->dy), ErrorKind::InvalidArgument, "Weird shifts must be finite");
  }
}

inline std::string basic_name(const BasicActivation& kind) {
  return std::visit(
      [](const auto& k) -> std::string {
        using K = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<K, Relu>) return "relu";
        else if constexpr (std::is_same_v<K, JRelu>) return "jrelu";
        else if constexpr (std::is_same_v<K, SquaredRelu>) return "squared_relu";
        else {
          char buf[96];
          std::snprintf(buf, sizeof buf, "weird:%.17g:%.17g:%.17g", k.w_half, k.dx, k.dy);
          return buf;
        }
      },
      kind);
}

}  // namespace detail

inline ActValue act_eval(const ActivationKind& kind, double x) {
  if (const auto* mix = std::get_if<Mix>(&kind)) {
    const ActValue a = detail::eval_basic(mix->a, x);
    const ActValue b = detail::eval_basic(mix->b, x);
    return {mix->t * b.value + (1.0 - mix->t) * a.value, mix->t * b.derivative + (1.0 - mix->t) * a.derivative};
  }
  return std::visit(
      [x](const auto& k) -> ActValue {
        if constexpr (std::is_same_v<std::decay_t<decltype(k)>, Mix>) {
          return {0.0, 0.0};  // unreachable, handled above
        } else {
          return detail::eval_basic(BasicActivation{k}, x);
        }
      },
      kind);
}

inline void validate_activation(const ActivationKind& kind) {
  if (const auto* mix = std::get_if<Mix>(&kind)) {
    require(mix->t >= 0.0 && mix->t <= 1.0, ErrorKind::InvalidArgument, "Mix activation needs t in [0, 1]");
    detail::validate_basic(mix->a);
    detail::validate_basic(mix->b);
    return;
  }
  std::visit(
      [](const auto& k) {
        if constexpr (!std::is_same_v<std::decay_t<decltype(k)>, Mix>) detail::validate_basic(BasicActivation{k});
      },
      kind);
}

// Textual form used by config files and checkpoint headers:
//   relu | jrelu | squared_relu | weird:W_HALF:DX:DY | mix:A:B:T
// where A and B are non-mix forms with ':' replaced by ',' inside them
// (e.g. "mix:relu:jrelu:0.25", "mix:relu:weird,1.5,0,0:0.5").
inline std::string activation_name(const ActivationKind& kind) {
  if (const auto* mix = std::get_if<Mix>(&kind)) {
    auto inner = [](const BasicActivation& b) {
      std::string s = detail::basic_name(b);
      for (char& c : s)
        if (c == ':') c = ',';
      return s;
    };
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.17g", mix->t);
    return "mix:" + inner(mix->a) + ":" + inner(mix->b) + ":" + buf;
  }
  return std::visit(
      [](const auto& k) -> std::string {
        if constexpr (std::is_same_v<std::decay_t<decltype(k)>, Mix>) return "";
        else return detail::basic_name(BasicActivation{k});
      },
      kind);
}

namespace detail {

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

inline double parse_real(const std::string& s, const std::string& what) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    fail(ErrorKind::InvalidArgument, "cannot parse " + what + " from '" + s + "'");
  }
}

inline BasicActivation parse_basic(const std::vector<std::string>& parts, const std::string& text) {
  const std::string& tag = parts.at(0);
  if (tag == "relu" && parts.size() == 1) return Relu{};
  if (tag == "jrelu" && parts.size() == 1) return JRelu{};
  if (tag == "squared_relu" && parts.size() == 1) return SquaredRelu{};
  if (tag == "weird" && (parts.size() == 1 || parts.size() == 4)) {
    Weird w;
    if (parts.size() == 4) {
      w.w_half = parse_real(parts[1], "weird w_half");
      w.dx = parse_real(parts[2], "weird dx");
      w.dy = parse_real(parts[3], "weird dy");
    }
    return w;
  }
  fail(ErrorKind::InvalidArgument, "unknown activation '" + text + "'");
}

}  // namespace detail

inline ActivationKind parse_activation(const std::string& text) {
  const auto parts = detail::split(text, ':');
  ActivationKind out;
  if (parts.at(0) == "mix") {
    require(parts.size() == 4, ErrorKind::InvalidArgument, "mix activation needs mix:A:B:T, got '" + text + "'");
    Mix m;
    m.a = detail::parse_basic(detail::split(parts[1], ','), text);
    m.b = detail::parse_basic(detail::split(parts[2], ','), text);
    m.t = detail::parse_real(parts[3], "mix t");
    out = m;
  } else {
    out = std::visit([](const auto& k) -> ActivationKind { return k; }, detail::parse_basic(parts, text));
  }
  validate_activation(out);
  return out;
}

// ---------------------------------------------------------------------------
// LayerNorm without additive bias

inline constexpr double kLayerNormEps = 1e-5;

struct LayerNormResult {
  Vector output;      // scale ⊙ normalized
  Vector normalized;  // (x − mean) / sqrt(var + eps)
  double inv_std = 0.0;
};

// Population variance, eps = 1e-5. Never adds a bias term.
inline LayerNormResult layernorm_full(std::span<const double> x, std::span<const double> scale) {
  require(x.size() == scale.size() && !x.empty(), ErrorKind::Shape, "layernorm: dimension mismatch");
  const double n = static_cast<double>(x.size());
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= n;
  LayerNormResult r;
  r.inv_std = 1.0 / std::sqrt(var + kLayerNormEps);
  r.normalized.resize(x.size());
  r.output.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    r.normalized[i] = (x[i] - mean) * r.inv_std;
    r.output[i] = scale[i] * r.normalized[i];
  }
  return r;
}

inline Vector layernorm(std::span<const double> x, std::span<const double> scale) {
  return layernorm_full(x, scale).output;
}

// ---------------------------------------------------------------------------
// Architecture and parameters

struct NetworkSpec {
  std::size_t input_dim = 1;
  std::size_t hidden_width = 1;  // d
  std::size_t mlp_width = 1;     // n
  std::size_t num_blocks = 1;    // L
  std::size_t num_classes = 2;
  ActivationKind activation = Relu{};
  bool use_zeroth_bias = true;
  bool use_layernorm = true;
  bool use_skip = true;

  void validate() const {
    require(input_dim >= 1 && hidden_width >= 1 && mlp_width >= 1 && num_blocks >= 1 && num_classes >= 1,
            ErrorKind::InvalidArgument, "NetworkSpec: all counts must be >= 1");
    validate_activation(activation);
  }

  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

struct BlockParams {
  Matrix key;          // n×d
  Vector key_bias;     // n
  Matrix value;        // d×n
  Vector value_bias;   // d
  Vector zeroth_bias;  // d, empty unless use_zeroth_bias
  Vector ln_scale;     // d, empty unless use_layernorm

  friend bool operator==(const BlockParams&, const BlockParams&) = default;
};

struct Parameters {
  NetworkSpec spec;
  Matrix input_weight;  // d×input_dim
  Vector input_bias;    // d
  std::vector<BlockParams> blocks;
  Matrix classifier_weight;  // classes×d
  Vector classifier_bias;    // classes

  friend bool operator==(const Parameters&, const Parameters&) = default;
};

// Zero-valued parameters shaped by spec. Gradients use the same type.
inline Parameters zero_parameters(const NetworkSpec& spec) {
  spec.validate();
  Parameters p;
  p.spec = spec;
  const std::size_t d = spec.hidden_width, n = spec.mlp_width;
  p.input_weight = Matrix(d, spec.input_dim);
  p.input_bias.assign(d, 0.0);
  p.blocks.resize(spec.num_blocks);
  for (auto& b : p.blocks) {
    b.key = Matrix(n, d);
    b.key_bias.assign(n, 0.0);
    b.value = Matrix(d, n);
    b.value_bias.assign(d, 0.0);
    if (spec.use_zeroth_bias) b.zeroth_bias.assign(d, 0.0);
    if (spec.use_layernorm) b.ln_scale.assign(d, 0.0);
  }
  p.classifier_weight = Matrix(spec.num_classes, d);
  p.classifier_bias.assign(spec.num_classes, 0.0);
  return p;
}

enum class TensorRole { Weight, Bias, ZerothBias, LayerNormScale };

// Only weight matrices and ordinary biases are weight-decayed.
inline bool decays(TensorRole role) { return role == TensorRole::Weight || role == TensorRole::Bias; }

template <typename Values>
struct TensorView {
  std::string name;
  Values values;
  std::size_t rows;
  std::size_t cols;
  TensorRole role;
};

// Visits every tensor in a fixed order: input.weight, input.bias, then per
// block key, key_bias, value, value_bias, [zeroth_bias], [ln_scale], then
// classifier.weight, classifier.bias. Checkpoints and flattening use this order.
template <typename P, typename F>
  requires std::is_same_v<std::remove_const_t<P>, Parameters>
void for_each_tensor(P& p, F&& f) {
  using Values = std::conditional_t<std::is_const_v<P>, std::span<const double>, std::span<double>>;
  using View = TensorView<Values>;
  auto mat = [&](const std::string& name, auto& m, TensorRole role) {
    f(View{name, Values(m.values()), m.rows(), m.cols(), role});
  };
  auto vec = [&](const std::string& name, auto& v, TensorRole role) {
    f(View{name, Values(v), v.size(), 1, role});
  };
  mat("input.weight", p.input_weight, TensorRole::Weight);
  vec("input.bias", p.input_bias, TensorRole::Bias);
  for (std::size_t l = 0; l < p.blocks.size(); ++l) {
    auto& b = p.blocks[l];
    const std::string pre = "block" + std::to_string(l) + ".";
    mat(pre + "key", b.key, TensorRole::Weight);
    vec(pre + "key_bias", b.key_bias, TensorRole::Bias);
    mat(pre + "value", b.value, TensorRole::Weight);
    vec(pre + "value_bias", b.value_bias, TensorRole::Bias);
    if (!b.zeroth_bias.empty()) vec(pre + "zeroth_bias", b.zeroth_bias, TensorRole::ZerothBias);
    if (!b.ln_scale.empty()) vec(pre + "ln_scale", b.ln_scale, TensorRole::LayerNormScale);
  }
  mat("classifier.weight", p.classifier_weight, TensorRole::Weight);
  vec("classifier.bias", p.classifier_bias, TensorRole::Bias);
}

inline std::size_t parameter_count(const Parameters& p) {
  std::size_t n = 0;
  for_each_tensor(p, [&](const auto& t) { n += t.values.size(); });
  return n;
}

inline Vector flatten(const Parameters& p) {
  Vector out;
  out.reserve(parameter_count(p));
  for_each_tensor(p, [&](const auto& t) { out.insert(out.end(), t.values.begin(), t.values.end()); });
  return out;
}

inline void assign_flat(Parameters& p, std::span<const double> flat) {
  require(flat.size() == parameter_count(p), ErrorKind::Shape, "assign_flat: length mismatch");
  std::size_t off = 0;
  for_each_tensor(p, [&](const auto& t) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), t.values.size(), t.values.begin());
    off += t.values.size();
  });
}

inline std::vector<std::span<const double>> tensor_spans(const Parameters& p) {
  std::vector<std::span<const double>> out;
  for_each_tensor(p, [&](const auto& t) { out.push_back(t.values); });
  return out;
}

inline double global_l2_norm(const Parameters& p) {
  const auto spans = tensor_spans(p);
  return global_l2_norm(std::span<const std::span<const double>>(spans));
}

// ---------------------------------------------------------------------------
// Initialization
//
// Every weight matrix W (fan_out×fan_in) gets i.i.d. centered entries of
// variance p′/(fan_in + fan_out): p′ = 2 for Xavier, 4 for Kaiming in
// fan-average mode. For a key matrix this makes each row's variance sum
// p = p′d/(n + d). Biases and zeroth biases start at 0, LayerNorm scales at 1.

enum class InitScheme { XavierGaussian, KaimingGaussian, XavierUniform, KaimingUniform };

inline InitScheme parse_init_scheme(const std::string& s) {
  if (s == "xavier_gaussian") return InitScheme::XavierGaussian;
  if (s == "kaiming_gaussian") return InitScheme::KaimingGaussian;
  if (s == "xavier_uniform") return InitScheme::XavierUniform;
  if (s == "kaiming_uniform") return InitScheme::KaimingUniform;
  fail(ErrorKind::InvalidArgument, "unknown init scheme '" + s + "'");
}

inline std::string init_scheme_name(InitScheme s) {
  switch (s) {
    case InitScheme::XavierGaussian: return "xavier_gaussian";
    case InitScheme::KaimingGaussian: return "kaiming_gaussian";
    case InitScheme::XavierUniform: return "xavier_uniform";
    case InitScheme::KaimingUniform: return "kaiming_uniform";
  }
  return "";
}

inline double init_gain(InitScheme s) {
  return (s == InitScheme::KaimingGaussian || s == InitScheme::KaimingUniform) ? 4.0 : 2.0;
}

inline void init_matrix(Matrix& w, InitScheme scheme, Rng& rng) {
  const double var = init_gain(scheme) / static_cast<double>(w.rows() + w.cols());
  const bool uniform = scheme == InitScheme::XavierUniform || scheme == InitScheme::KaimingUniform;
  const double bound = std::sqrt(3.0 * var);
  const double stddev = std::sqrt(var);
  for (double& v : w.values()) v = uniform ? rng.uniform(-bound, bound) : stddev * rng.normal();
}

inline Parameters init_params(const NetworkSpec& spec, InitScheme scheme, Rng& rng) {
  Parameters p = zero_parameters(spec);
  init_matrix(p.input_weight, scheme, rng);
  for (auto& b : p.blocks) {
    init_matrix(b.key, scheme, rng);
    init_matrix(b.value, scheme, rng);
    if (spec.use_layernorm) b.ln_scale.assign(spec.hidden_width, 1.0);
  }
  init_matrix(p.classifier_weight, scheme, rng);
  return p;
}

// ---------------------------------------------------------------------------
// Forward pass

// Rows are samples.
struct BlockTrace {
  Matrix block_input;     // x before LayerNorm (and skip source)
  Matrix ln_output;       // x^{l-1}: LayerNorm output, or block_input when LayerNorm is off
  Matrix ln_normalized;   // (x − mean)/std, empty when LayerNorm is off
  Vector ln_inv_std;      // per sample
  Matrix shifted_input;   // x^{l-1} + d^l
  Matrix pre_activation;  // z = K(x + d) + b_K
  Matrix activation;      // α
  Matrix derivative;      // γ
  Matrix block_output;    // V α + b_V, before the skip connection
  Matrix output;          // after the skip connection
};

struct ForwardTrace {
  std::size_t batch = 0;
  Matrix input;  // samples × input_dim
  Matrix input_projection;
  std::vector<BlockTrace> blocks;
  Matrix logits;  // samples × classes
  Matrix probs;   // samples × classes
};

// Adds Gaussian noise after matrix multiplication: z + e with
// e ~ N(0, σ²‖x‖² I) where x is the input of the product.
inline Vector magic_perturb(std::span<const double> z, std::span<const double> x, double sigma, Rng& rng) {
  require(sigma >= 0.0, ErrorKind::InvalidArgument, "magic_perturb: sigma must be >= 0");
  Vector out(z.begin(), z.end());
  const double scale = sigma * std::sqrt(squared_norm(x));
  if (scale == 0.0) return out;
  for (double& v : out) v += scale * rng.normal();
  return out;
}

// σ for one weight matrix under the adaptive rule σ² = ρ · mean|W|.
inline double adaptive_sigma(const Matrix& w, double rho) {
  double s = 0.0;
  for (double v : w.values()) s += std::abs(v);
  return std::sqrt(rho * s / static_cast<double>(w.size()));
}

struct NoiseOptions {
  double sigma = 0.0;        // fixed σ when adaptive_rho == 0
  double adaptive_rho = 0.0; // > 0 selects the adaptive rule per weight matrix
  Rng* rng = nullptr;

  bool enabled() const { return rng != nullptr && (sigma > 0.0 || adaptive_rho > 0.0); }
  double sigma_for(const Matrix& w) const { return adaptive_rho > 0.0 ? adaptive_sigma(w, adaptive_rho) : sigma; }
};

struct ForwardResult {
  Matrix logits;  // classes × samples
  std::optional<ForwardTrace> trace;
};

inline void softmax_inplace(std::span<double> v) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : v) m = std::max(m, x);
  double s = 0.0;
  for (double& x : v) {
    x = std::exp(x - m);
    s += x;
  }
  for (double& x : v) x /= s;
}

inline ForwardResult forward(const Parameters& params, const Matrix& batch, bool record,
                             const NoiseOptions& noise = {}) {
  const NetworkSpec& spec = params.spec;
  if (batch.rows() != spec.input_dim)
    fail(ErrorKind::Shape, "forward: batch has " + std::to_string(batch.rows()) + " rows, expected input_dim " +
                               std::to_string(spec.input_dim));
  const std::size_t N = batch.cols();
  const std::size_t d = spec.hidden_width, n = spec.mlp_width, L = spec.num_blocks, C = spec.num_classes;

  ForwardTrace tr;
  if (record) {
    tr.batch = N;
    tr.input = transpose(batch);
    tr.input_projection = Matrix(N, d);
    tr.blocks.resize(L);
    for (auto& b : tr.blocks) {
      b.block_input = Matrix(N, d);
      b.ln_output = Matrix(N, d);
      if (spec.use_layernorm) b.ln_normalized = Matrix(N, d);
      b.ln_inv_std.assign(N, 0.0);
      b.shifted_input = Matrix(N, d);
      b.pre_activation = Matrix(N, n);
      b.activation = Matrix(N, n);
      b.derivative = Matrix(N, n);
      b.block_output = Matrix(N, d);
      b.output = Matrix(N, d);
    }
    tr.logits = Matrix(N, C);
    tr.probs = Matrix(N, C);
  }
  auto put = [](Matrix& m, std::size_t s, std::span<const double> v) { std::copy(v.begin(), v.end(), m.row(s).begin()); };
  auto linear = [&](const Matrix& w, std::span<const double> b, std::span<const double> in) {
    Vector out = matvec(w, in);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
    if (noise.enabled()) out = magic_perturb(out, in, noise.sigma_for(w), *noise.rng);
    return out;
  };

  ForwardResult res;
  res.logits = Matrix(C, N);
  Vector in(spec.input_dim);
  for (std::size_t s = 0; s < N; ++s) {
    for (std::size_t i = 0; i < spec.input_dim; ++i) in[i] = batch(i, s);
    Vector x = linear(params.input_weight, params.input_bias, in);
    if (record) put(tr.input_projection, s, x);
    for (std::size_t l = 0; l < L; ++l) {
      const BlockParams& bp = params.blocks[l];
      Vector h;
      double inv_std = 0.0;
      Vector normalized;
      if (spec.use_layernorm) {
        LayerNormResult ln = layernorm_full(x, bp.ln_scale);
        h = std::move(ln.output);
        normalized = std::move(ln.normalized);
        inv_std = ln.inv_std;
      } else {
        h = x;
      }
      Vector u = h;
      if (spec.use_zeroth_bias)
        for (std::size_t i = 0; i < d; ++i) u[i] += bp.zeroth_bias[i];
      Vector z = linear(bp.key, bp.key_bias, u);
      Vector alpha(n), gamma(n);
      for (std::size_t i = 0; i < n; ++i) {
        const ActValue a = act_eval(spec.activation, z[i]);
        alpha[i] = a.value;
        gamma[i] = a.derivative;
      }
      Vector o = linear(bp.value, bp.value_bias, alpha);
      Vector next = o;
      if (spec.use_skip)
        for (std::size_t i = 0; i < d; ++i) next[i] += x[i];
      if (record) {
        BlockTrace& bt = tr.blocks[l];
        put(bt.block_input, s, x);
        put(bt.ln_output, s, h);
        if (spec.use_layernorm) put(bt.ln_normalized, s, normalized);
        bt.ln_inv_std[s] = inv_std;
        put(bt.shifted_input, s, u);
        put(bt.pre_activation, s, z);
        put(bt.activation, s, alpha);
        put(bt.derivative, s, gamma);
        put(bt.block_output, s, o);
        put(bt.output, s, next);
      }
      x = std::move(next);
    }
    Vector logits = linear(params.classifier_weight, params.classifier_bias, x);
    if (!all_finite(logits)) fail(ErrorKind::Numeric, "forward: non-finite logits for sample " + std::to_string(s));
    res.logits.set_column(s, logits);
    if (record) {
      put(tr.logits, s, logits);
      softmax_inplace(logits);
      put(tr.probs, s, logits);
    }
  }
  if (record) res.trace = std::move(tr);
  return res;
}

using Labels = std::vector<std::size_t>;

// −log softmax(logits)[label] via log-sum-exp.
inline double cross_entropy(std::span<const double> logits, std::size_t label) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : logits) m = std::max(m, x);
  double s = 0.0;
  for (double x : logits) s += std::exp(x - m);
  return m + std::log(s) - logits[label];
}

// Per-sample cross entropy for a batch of column samples.
inline Vector per_sample_loss(const Parameters& params, const Matrix& batch, const Labels& labels) {
  require(labels.size() == batch.cols(), ErrorKind::Shape, "per_sample_loss: label count mismatch");
  const ForwardResult fr = forward(params, batch, false);
  Vector out(labels.size());
  for (std::size_t s = 0; s < labels.size(); ++s) {
    require(labels[s] < params.spec.num_classes, ErrorKind::InvalidArgument, "label out of range");
    out[s] = cross_entropy(fr.logits.column(s), labels[s]);
  }
  return out;
}

inline double mean_loss(const Parameters& params, const Matrix& batch, const Labels& labels) {
  const Vector l = per_sample_loss(params, batch, labels);
  double s = 0.0;
  for (double v : l) s += v;
  return s / static_cast<double>(l.size());
}

}  // namespace sdl
