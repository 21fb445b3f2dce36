#pragma once

// Append-only metrics log and its JSON-Lines serialization.
//
// One record per log event. Field names (all keys always present unless
// marked optional, optional keys are omitted when absent):
//   step, split ("train" | "test"), epoch, lr, loss, accuracy,
//   avg_nonzero            layer-averaged activation nonzero fraction
//   grad_norm              global gradient norm before clipping (train)
//   layers[]               nonzero_activation, nonzero_gamma, alpha_norm2,
//                          gamma_norm2, eta_norm2, g_key_norm2, g_value_norm2,
//                          weird_band (optional), alignment_log10 (optional)
//   bounds (optional)      per-layer term1/term2/term2_ln_d/term2_ln_c/term3,
//                          chain_total, grad_norm_proxy, slack
//   anisotropy (optional)  per layer {x: {...}, eta: {...}} with a_over_p,
//                          trace_t_over_p, beta_over_p, columns
//   clamps_ok (optional)   post-step clamp invariants held at this step

#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"  // vendored nlohmann/json

#include "sdl/error.hpp"
#include "sdl/flatness.hpp"
#include "sdl/rmt.hpp"
#include "sdl/sparsity.hpp"

namespace sdl {

struct LayerMetrics {
  LayerSparsity sparsity;
  std::optional<double> weird_band;
  std::optional<double> alignment_log10;
};

struct LayerAnisotropy {
  AnisotropyStats x;    // streamed block inputs u = x + d
  AnisotropyStats eta;  // streamed pre-activation gradients η
  std::size_t columns = 0;
};

struct MetricsRecord {
  std::size_t step = 0;
  std::string split = "train";
  std::size_t epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  double accuracy = 0.0;
  double avg_nonzero = 0.0;
  std::optional<double> grad_norm;
  std::vector<LayerMetrics> layers;
  std::optional<BoundTerms> bounds;
  std::optional<std::vector<LayerAnisotropy>> anisotropy;
  std::optional<bool> clamps_ok;
};

namespace detail {
inline nlohmann::ordered_json anisotropy_json(const AnisotropyStats& s) {
  nlohmann::ordered_json j;
  j["a"] = s.a;
  j["a_over_p"] = s.a_over_p;
  j["trace_t_over_p"] = s.u_norm2_over_p;
  j["beta_over_p"] = s.beta_over_p;
  return j;
}
}  // namespace detail

inline nlohmann::ordered_json to_json(const MetricsRecord& r) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["split"] = r.split;
  j["epoch"] = r.epoch;
  j["lr"] = r.lr;
  j["loss"] = r.loss;
  j["accuracy"] = r.accuracy;
  j["avg_nonzero"] = r.avg_nonzero;
  if (r.grad_norm) j["grad_norm"] = *r.grad_norm;
  auto layers = nlohmann::ordered_json::array();
  for (const auto& l : r.layers) {
    nlohmann::ordered_json lj;
    lj["nonzero_activation"] = l.sparsity.nonzero_fraction_activation;
    lj["nonzero_gamma"] = l.sparsity.nonzero_fraction_gamma;
    lj["alpha_norm2"] = l.sparsity.alpha_norm2;
    lj["gamma_norm2"] = l.sparsity.gamma_norm2;
    lj["eta_norm2"] = l.sparsity.eta_norm2;
    lj["g_key_norm2"] = l.sparsity.g_key_norm2;
    lj["g_value_norm2"] = l.sparsity.g_value_norm2;
    if (l.weird_band) lj["weird_band"] = *l.weird_band;
    if (l.alignment_log10) lj["alignment_log10"] = *l.alignment_log10;
    layers.push_back(std::move(lj));
  }
  j["layers"] = std::move(layers);
  if (r.bounds) {
    nlohmann::ordered_json bj;
    auto bl = nlohmann::ordered_json::array();
    for (const auto& t : r.bounds->layers) {
      bl.push_back({{"term1", t.term1},
                    {"term2", t.term2},
                    {"term2_ln_d", t.term2_ln_d},
                    {"term2_ln_c", t.term2_ln_c},
                    {"term3", t.term3},
                    {"eta_norm2", t.eta_norm2}});
    }
    bj["layers"] = std::move(bl);
    bj["chain_total"] = r.bounds->chain_total;
    bj["grad_norm_proxy"] = r.bounds->grad_norm_proxy;
    bj["slack"] = r.bounds->slack();
    j["bounds"] = std::move(bj);
  }
  if (r.anisotropy) {
    auto al = nlohmann::ordered_json::array();
    for (const auto& a : *r.anisotropy) {
      nlohmann::ordered_json aj;
      aj["x"] = detail::anisotropy_json(a.x);
      aj["eta"] = detail::anisotropy_json(a.eta);
      aj["columns"] = a.columns;
      al.push_back(std::move(aj));
    }
    j["anisotropy"] = std::move(al);
  }
  if (r.clamps_ok) j["clamps_ok"] = *r.clamps_ok;
  return j;
}

class MetricsLog {
 public:
  void append(MetricsRecord r) {
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
      if (it->split == r.split) {
        require(r.step > it->step, ErrorKind::InvalidArgument,
                "MetricsLog: steps must strictly increase per split (" + r.split + " step " + std::to_string(r.step) + ")");
        break;
      }
    }
    records_.push_back(std::move(r));
  }

  const std::vector<MetricsRecord>& records() const { return records_; }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }

  std::vector<const MetricsRecord*> split(const std::string& name) const {
    std::vector<const MetricsRecord*> out;
    for (const auto& r : records_)
      if (r.split == name) out.push_back(&r);
    return out;
  }

  std::string to_jsonl() const {
    std::string out;
    for (const auto& r : records_) {
      out += to_json(r).dump();
      out += '\n';
    }
    return out;
  }

  void write_jsonl(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) fail(ErrorKind::Io, "cannot write " + path);
    f << to_jsonl();
    if (!f) fail(ErrorKind::Io, "write failed: " + path);
  }

 private:
  std::vector<MetricsRecord> records_;
};

// Step-weighted trapezoidal mean of the train records' layer-averaged nonzero fraction.
inline double integrate_training_sparsity(const MetricsLog& log) {
  std::vector<std::pair<double, double>> pts;
  for (const auto* r : log.split("train")) pts.emplace_back(static_cast<double>(r->step), r->avg_nonzero);
  return integrate_training_sparsity(std::span<const std::pair<double, double>>(pts));
}

}  // namespace sdl
