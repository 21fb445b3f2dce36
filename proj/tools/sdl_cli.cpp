// sdl — command-line front end.
//
//   sdl train          --config PATH [--out DIR] [--seed U64]
//   sdl spectrum       --checkpoint PATH [--layer N] [--threshold F] [--coverage F] [--out DIR]
//   sdl bounds         --input accumulators.json|metrics.jsonl [--v F] [--v0 F] [--tau F] [--lr F] [--wd F] [--batch N] [--out DIR]
//   sdl weird-validate --config PATH [--dx F] [--dy F] [--out DIR] [--seed U64]
//   sdl window         --lr F --wd F [--tau F]
//
// Exit codes: 0 ok, 2 usage, 3 data/IO error, 4 numeric failure.

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "sdl/sdl.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

std::string iso_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) sdl::fail(sdl::ErrorKind::Io, "cannot write " + path.string());
  f << text;
  if (!f) sdl::fail(sdl::ErrorKind::Io, "write failed: " + path.string());
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) sdl::fail(sdl::ErrorKind::Io, "cannot create directory " + dir.string() + ": " + ec.message());
}

std::string checkpoint_name(std::size_t step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "step_%06zu.sdl", step);
  return buf;
}

json spec_json(const sdl::RunConfig& rc) {
  const auto& t = rc.train;
  json j;
  j["network"] = sdl::spec_to_json(rc.spec);
  json tj;
  tj["lr"] = t.lr;
  tj["weight_decay"] = t.weight_decay;
  tj["clip"] = t.clip_global_norm ? json(*t.clip_global_norm) : json(nullptr);
  tj["batch_size"] = t.batch_size;
  tj["steps"] = t.steps;
  tj["schedule"] = sdl::schedule_name(t.schedule);
  tj["seed"] = t.seed;
  tj["init"] = sdl::init_scheme_name(t.init);
  tj["algo1"] = t.algo1.enabled;
  tj["algo1_c"] = t.algo1.c_factor;
  tj["algo2"] = t.algo2.enabled;
  tj["algo2_t_uplift"] = t.algo2.t_uplift;
  tj["magic"] = t.magic.enabled;
  tj["magic_sigma"] = t.magic.sigma;
  tj["magic_rho"] = t.magic.adaptive_rho;
  tj["with_replacement"] = t.sample_with_replacement;
  tj["log_every"] = t.log_every;
  j["train"] = tj;
  return j;
}

json accumulator_json(const sdl::UpdateStreamAccumulator& acc) {
  json j;
  j["p"] = acc.dimension();
  j["columns"] = acc.columns();
  j["steps"] = acc.steps();
  j["batch"] = acc.batch_size();
  j["weight"] = acc.weight();
  j["decay"] = acc.decay();
  j["trace_s"] = acc.trace_s();
  j["trace_s2"] = acc.trace_s2();
  j["max_norm2"] = acc.max_norm2();
  if (acc.columns() > 0 && acc.trace_s2() > 0.0) {
    const auto st = sdl::anisotropy_stats(acc);
    j["a"] = st.a;
    j["a_over_p"] = st.a_over_p;
    j["trace_t"] = st.expected_u_norm2;
    j["trace_t_over_p"] = st.u_norm2_over_p;
    j["beta"] = st.beta_hat;
    j["beta_over_p"] = st.beta_over_p;
  }
  return j;
}

// Trains per the config into out_dir; returns the result for callers that post-process.
sdl::TrainResult run_training(sdl::RunConfig rc, const fs::path& out_dir, bool quiet) {
  sdl::RunData data = sdl::load_run_data(rc);
  ensure_dir(out_dir);
  const fs::path ckpt_dir = out_dir / "checkpoints";
  ensure_dir(ckpt_dir);
  const std::string init_name = sdl::init_scheme_name(rc.train.init);

  sdl::StepObserver obs;
  if (rc.checkpoint_every > 0) {
    obs.on_step = [&](const sdl::StepEvent& ev) {
      const std::size_t done = ev.step + 1;
      if (done % rc.checkpoint_every == 0 && done != rc.train.steps)
        sdl::save_checkpoint((ckpt_dir / checkpoint_name(done)).string(), ev.after, {done, rc.train.seed, init_name});
    };
  }
  sdl::TrainResult res = sdl::train_loop(rc.spec, rc.train, data.train, data.test ? &*data.test : nullptr, obs);
  sdl::save_checkpoint((ckpt_dir / checkpoint_name(0)).string(), res.initial, {0, rc.train.seed, init_name});
  if (rc.train.steps > 0)
    sdl::save_checkpoint((ckpt_dir / checkpoint_name(rc.train.steps)).string(), res.params,
                         {rc.train.steps, rc.train.seed, init_name});
  res.log.write_jsonl((out_dir / "metrics.jsonl").string());

  // Final analysis on (up to) the first 256 training samples.
  const sdl::Dataset probe = sdl::take_prefix(data.train, 256);
  const sdl::ForwardResult fr = sdl::forward(res.params, probe.features, true);
  const sdl::GradientTrace gt = sdl::backward(res.params, fr.trace, probe.labels);
  const double c_zb = rc.train.algo1.enabled ? rc.train.algo1.c_factor : 0.0;
  const sdl::BoundTerms bt = sdl::bound_terms(res.params, *fr.trace, gt, c_zb);
  const auto lm = sdl::layer_metrics(rc.spec, *fr.trace, &gt);

  json summary;
  summary["timestamp"] = iso_timestamp();
  summary["config"] = spec_json(rc);
  summary["steps"] = rc.train.steps;
  summary["train_samples"] = data.train.size();
  summary["final_loss"] = gt.loss;
  summary["final_accuracy"] = gt.accuracy;
  json layers = json::array();
  double avg = 0.0;
  for (std::size_t l = 0; l < lm.size(); ++l) {
    json lj;
    lj["nonzero_activation"] = lm[l].sparsity.nonzero_fraction_activation;
    lj["nonzero_gamma"] = lm[l].sparsity.nonzero_fraction_gamma;
    lj["eta_norm2"] = lm[l].sparsity.eta_norm2;
    lj["term1"] = bt.layers[l].term1;
    lj["term2"] = bt.layers[l].term2;
    lj["term3"] = bt.layers[l].term3;
    if (lm[l].weird_band) lj["weird_band"] = *lm[l].weird_band;
    avg += lm[l].sparsity.nonzero_fraction_activation;
    layers.push_back(lj);
  }
  summary["final_layers"] = layers;
  summary["final_avg_nonzero"] = avg / static_cast<double>(lm.size());
  summary["bound_chain_total"] = bt.chain_total;
  summary["grad_norm_proxy"] = bt.grad_norm_proxy;
  if (!res.log.split("train").empty()) summary["integrated_train_sparsity"] = sdl::integrate_training_sparsity(res.log);
  if (auto tests = res.log.split("test"); !tests.empty()) {
    summary["test_loss"] = tests.back()->loss;
    summary["test_accuracy"] = tests.back()->accuracy;
    summary["test_avg_nonzero"] = tests.back()->avg_nonzero;
  }
  write_text(out_dir / "summary.json", summary.dump(2) + "\n");

  json acc;
  acc["lr"] = rc.train.lr;
  acc["weight_decay"] = rc.train.weight_decay;
  acc["batch_size"] = rc.train.batch_size;
  acc["steps"] = rc.train.steps;
  json al = json::array();
  for (std::size_t l = 0; l < res.x_streams.size(); ++l)
    al.push_back({{"layer", l}, {"x", accumulator_json(res.x_streams[l])}, {"eta", accumulator_json(res.eta_streams[l])}});
  acc["layers"] = al;
  write_text(out_dir / "accumulators.json", acc.dump(2) + "\n");

  if (!quiet)
    std::cout << "trained " << rc.train.steps << " steps; final batch loss " << gt.loss << ", accuracy " << gt.accuracy
              << ", avg nonzero " << avg / static_cast<double>(lm.size()) << "\n";
  return res;
}

int cmd_train(const std::string& config, const std::string& out, const std::optional<std::uint64_t>& seed) {
  sdl::RunConfig rc = sdl::load_run_config(config);
  if (seed) rc.train.seed = *seed;
  if (!out.empty()) rc.out_dir = out;
  if (rc.out_dir.empty()) sdl::fail(sdl::ErrorKind::InvalidArgument, "no output directory: pass --out or set out in the config");
  run_training(rc, rc.out_dir, false);
  std::cout << "wrote " << rc.out_dir << "\n";
  return 0;
}

int cmd_spectrum(const std::string& checkpoint, const std::optional<std::size_t>& layer, double threshold,
                 double coverage, const std::string& out) {
  const sdl::Checkpoint ck = sdl::load_checkpoint(checkpoint);
  const auto& blocks = ck.params.blocks;
  if (layer && *layer >= blocks.size())
    sdl::fail(sdl::ErrorKind::InvalidArgument, "--layer " + std::to_string(*layer) + " out of range (network has " +
                                                   std::to_string(blocks.size()) + " blocks)");
  const fs::path out_dir = out.empty() ? fs::path(".") : fs::path(out);
  ensure_dir(out_dir);
  json report;
  report["checkpoint"] = checkpoint;
  report["step"] = ck.meta.step;
  report["threshold"] = threshold;
  report["coverage"] = coverage;
  json layers = json::array();
  std::ostringstream csv;
  csv << "layer,step,log10_eig\n";
  csv << std::setprecision(17);
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    if (layer && l != *layer) continue;
    const sdl::Matrix kkt = sdl::gram_rows(blocks[l].key);
    const sdl::SpectralReport r = sdl::spectral_report(kkt, threshold, coverage);
    json lj;
    lj["layer"] = l;
    lj["n"] = kkt.rows();
    lj["near_zero_rate"] = r.near_zero_rate;
    lj["majority_ratio"] = r.majority_ratio ? json(*r.majority_ratio) : json(nullptr);
    lj["extremal_nonzero_ratio"] = r.extremal_nonzero_ratio ? json(*r.extremal_nonzero_ratio) : json(nullptr);
    lj["trace"] = r.trace;
    const auto dl1 = sdl::diagonality_ratio(kkt, sdl::DiagonalNorm::L1);
    const auto dl2 = sdl::diagonality_ratio(kkt, sdl::DiagonalNorm::SquaredL2);
    lj["diagonality_l1"] = dl1.infinite ? json("inf") : json(dl1.value);
    lj["diagonality_l2sq"] = dl2.infinite ? json("inf") : json(dl2.value);
    layers.push_back(lj);
    for (double e : r.eigenvalues)
      if (e > 0.0) csv << l << ',' << ck.meta.step << ',' << std::log10(e) << '\n';
    std::cout << "layer " << l << ": near_zero_rate " << r.near_zero_rate << ", extremal_nonzero_ratio "
              << (r.extremal_nonzero_ratio ? std::to_string(*r.extremal_nonzero_ratio) : "missing") << "\n";
  }
  report["layers"] = layers;
  write_text(out_dir / "spectrum.json", report.dump(2) + "\n");
  write_text(out_dir / "spectrum.csv", csv.str());
  return 0;
}

struct StreamInput {
  std::size_t layer;
  std::string stream;
  std::size_t p, columns, batch;
  double trace_t, beta;
};

std::vector<StreamInput> read_bound_inputs(const std::string& input, std::size_t batch_flag, double& lr, double& wd) {
  std::ifstream f(input);
  if (!f) sdl::fail(sdl::ErrorKind::Io, "cannot open " + input);
  std::vector<StreamInput> out;
  auto empty_error = [&] { sdl::fail(sdl::ErrorKind::Data, input + ": accumulator is empty (no streamed columns)"); };
  try {
    if (input.size() >= 6 && input.substr(input.size() - 6) == ".jsonl") {
      // Last train record carrying anisotropy; p from a / (a/p), columns as streamed.
      nlohmann::json last;
      std::string line;
      while (std::getline(f, line)) {
        if (line.empty()) continue;
        auto j = nlohmann::json::parse(line);
        if (j.value("split", "") == "train" && j.contains("anisotropy")) last = std::move(j);
      }
      if (last.is_null()) empty_error();
      std::size_t l = 0;
      for (const auto& a : last["anisotropy"]) {
        const std::size_t cols = a["columns"].get<std::size_t>();
        if (cols == 0) empty_error();
        for (const char* s : {"x", "eta"}) {
          const auto& st = a[s];
          const double a_over_p = st["a_over_p"].get<double>();
          if (a_over_p <= 0.0) empty_error();
          const auto p = static_cast<std::size_t>(std::llround(st["a"].get<double>() / a_over_p));
          const double tt = st["trace_t_over_p"].get<double>() * static_cast<double>(p);
          out.push_back({l, s, p, cols, batch_flag, tt, st["beta_over_p"].get<double>() * static_cast<double>(p)});
        }
        ++l;
      }
    } else {
      const auto j = nlohmann::json::parse(f);
      if (lr <= 0.0) lr = j.value("lr", 0.0);
      if (wd < 0.0) wd = j.value("weight_decay", 0.0);
      for (const auto& layer : j.at("layers")) {
        for (const char* s : {"x", "eta"}) {
          const auto& st = layer.at(s);
          if (st.at("columns").get<std::size_t>() == 0 || !st.contains("trace_t")) empty_error();
          out.push_back({layer.at("layer").get<std::size_t>(), s, st.at("p").get<std::size_t>(),
                         st.at("columns").get<std::size_t>(), st.at("batch").get<std::size_t>(),
                         st.at("trace_t").get<double>(), st.at("beta").get<double>()});
        }
      }
    }
  } catch (const nlohmann::json::exception& e) {
    sdl::fail(sdl::ErrorKind::Data, input + ": " + e.what());
  }
  if (out.empty()) empty_error();
  return out;
}

int cmd_bounds(const std::string& input, std::optional<double> v, double v0, double tau, double lr, double wd,
               std::size_t batch, const std::string& out) {
  auto streams = read_bound_inputs(input, batch, lr, wd);
  const bool windowed = lr > 0.0 && wd > 0.0;
  std::optional<std::size_t> window;
  if (windowed) window = sdl::effective_window(lr, wd, tau);
  const double vv = v.value_or(v0);

  const fs::path out_dir = out.empty() ? fs::path(".") : fs::path(out);
  ensure_dir(out_dir);
  std::ostringstream csv;
  csv << std::setprecision(10);
  csv << "layer,stream,p,b,T,c,alpha_over_p,beta_over_p,mean_nonzero_eig,v,v0,im_bound,re_bound,tau,v0_margin,v0_ge_2c\n";
  json rows = json::array();
  for (const auto& s : streams) {
    const std::size_t b = std::max<std::size_t>(s.batch, 1);
    std::size_t T = (s.columns + b - 1) / b;
    if (window) T = std::min(T, *window);
    const double bt = static_cast<double>(b) * static_cast<double>(T);
    const double c = static_cast<double>(s.p) / bt;
    json r;
    r["layer"] = s.layer;
    r["stream"] = s.stream;
    r["p"] = s.p;
    r["b"] = b;
    r["T"] = T;
    r["c"] = c;
    r["alpha_over_p"] = s.trace_t / static_cast<double>(s.p);
    r["beta_over_p"] = s.beta / static_cast<double>(s.p);
    const double mean_nz = s.trace_t / std::min(bt, static_cast<double>(s.p));
    r["mean_nonzero_eig"] = mean_nz;
    if (c > 1.0) {
      r["applicable"] = false;
      r["reason"] = "c = p/(bT) > 1";
      csv << s.layer << ',' << s.stream << ',' << s.p << ',' << b << ',' << T << ',' << c << ','
          << s.trace_t / static_cast<double>(s.p) << ',' << s.beta / static_cast<double>(s.p) << ',' << mean_nz << ','
          << vv << ',' << v0 << ",,,,,\n";
    } else {
      sdl::BoundInputs in{s.trace_t, s.beta, c, s.p, b, T, vv, v0, mean_nz};
      const auto cb = sdl::concentration_bounds(in);
      r["applicable"] = cb.v0_condition_margin >= 0.0;
      r["im_bound"] = cb.im_bound;
      r["re_bound"] = cb.re_bound;
      r["tau"] = cb.tau;
      r["v0_margin"] = cb.v0_condition_margin;
      r["v0_ge_2c"] = cb.v0_at_least_2c;
      csv << s.layer << ',' << s.stream << ',' << s.p << ',' << b << ',' << T << ',' << c << ','
          << s.trace_t / static_cast<double>(s.p) << ',' << s.beta / static_cast<double>(s.p) << ',' << mean_nz << ','
          << vv << ',' << v0 << ',' << cb.im_bound << ',' << cb.re_bound << ',' << cb.tau << ','
          << cb.v0_condition_margin << ',' << (cb.v0_at_least_2c ? 1 : 0) << '\n';
    }
    rows.push_back(r);
  }
  json j;
  j["input"] = input;
  j["v"] = vv;
  j["v0"] = v0;
  j["tau_threshold"] = tau;
  j["effective_window"] = window ? json(*window) : json(nullptr);
  j["rows"] = rows;
  write_text(out_dir / "bounds.json", j.dump(2) + "\n");
  write_text(out_dir / "bounds.csv", csv.str());
  std::cout << "wrote " << rows.size() << " bound rows to " << (out_dir / "bounds.csv").string() << "\n";
  return 0;
}

int cmd_weird_validate(const std::string& config, std::optional<double> dx, std::optional<double> dy,
                       const std::string& out, const std::optional<std::uint64_t>& seed) {
  sdl::RunConfig base = sdl::load_run_config(config);
  if (seed) base.train.seed = *seed;
  const auto* w = std::get_if<sdl::Weird>(&base.spec.activation);
  if (!w) sdl::fail(sdl::ErrorKind::InvalidArgument, "weird-validate: config activation must be weird:W:DX:DY");
  const double w_half = w->w_half;
  std::vector<std::pair<double, double>> combos;
  if (dx || dy) {
    combos.emplace_back(dx.value_or(w->dx), dy.value_or(w->dy));
  } else {
    for (double x : {1.6, -1.6})
      for (double y : {1.6, -1.6}) combos.emplace_back(x, y);
  }
  const fs::path out_dir = !out.empty() ? fs::path(out) : (!base.out_dir.empty() ? fs::path(base.out_dir) : fs::path("."));
  ensure_dir(out_dir);
  json results = json::array();
  for (auto [x, y] : combos) {
    sdl::RunConfig rc = base;
    rc.spec.activation = sdl::Weird{w_half, x, y};
    std::ostringstream name;
    name << "dx" << x << "_dy" << y;
    sdl::TrainResult res = run_training(rc, out_dir / name.str(), true);
    const auto train = res.log.split("train");
    json r;
    r["dx"] = x;
    r["dy"] = y;
    json per_layer = json::array();
    double min_band = 1.0, pooled = 0.0;
    for (const auto& l : train.back()->layers) {
      per_layer.push_back(*l.weird_band);
      min_band = std::min(min_band, *l.weird_band);
      pooled += *l.weird_band;
    }
    pooled /= static_cast<double>(train.back()->layers.size());  // layers share width n
    r["final_step"] = train.back()->step;
    r["final_band_fraction"] = per_layer;
    r["min_band_fraction"] = min_band;
    r["pooled_band_fraction"] = pooled;
    results.push_back(r);
    std::cout << "dx=" << x << " dy=" << y << ": band fraction pooled " << pooled << ", min layer " << min_band << "\n";
  }
  write_text(out_dir / "weird_validate.json", json{{"w_half", w_half}, {"results", results}}.dump(2) + "\n");
  return 0;
}

int cmd_window(double lr, double wd, double tau) {
  std::cout << sdl::effective_window(lr, wd, tau) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparsity / flatness / spectral-concentration laboratory for tiny MLPs"};
  app.require_subcommand(1);

  std::string config, out, checkpoint, input;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> layer;
  double threshold = 1e-3, coverage = 0.7, v0 = 1e-3, tau = 1e-3, lr = 0.0, wd = -1.0;
  std::optional<double> v, dx, dy;
  std::size_t batch = 32;

  auto* train = app.add_subcommand("train", "Train a network from a config file");
  train->add_option("--config", config, "Run configuration (key = value)")->required();
  train->add_option("--out", out, "Output directory (overrides config 'out')");
  train->add_option("--seed", seed, "Seed (overrides config 'seed')");

  auto* spectrum = app.add_subcommand("spectrum", "Spectra of K Kᵀ from a checkpoint");
  spectrum->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  spectrum->add_option("--layer", layer, "Only this block");
  spectrum->add_option("--threshold", threshold, "Near-zero eigenvalue threshold")->capture_default_str();
  spectrum->add_option("--coverage", coverage, "Majority interval coverage")->capture_default_str();
  spectrum->add_option("--out", out, "Output directory");

  auto* bounds = app.add_subcommand("bounds", "Concentration bounds from accumulators.json or metrics.jsonl");
  bounds->add_option("--input", input, "accumulators.json or metrics.jsonl")->required();
  bounds->add_option("--v", v, "Evaluation point v (default v0)");
  bounds->add_option("--v0", v0, "v0 of the feasibility condition")->capture_default_str();
  bounds->add_option("--tau", tau, "Effective-window threshold")->capture_default_str();
  bounds->add_option("--lr", lr, "Learning rate (default from accumulators.json)");
  bounds->add_option("--wd", wd, "Weight decay (default from accumulators.json)");
  bounds->add_option("--batch", batch, "Batch size for metrics.jsonl input")->capture_default_str();
  bounds->add_option("--out", out, "Output directory");

  auto* weird = app.add_subcommand("weird-validate", "Train with shifted Weird activations and report flat-band fractions");
  weird->add_option("--config", config, "Run configuration with a weird activation")->required();
  weird->add_option("--dx", dx, "Horizontal shift (default: all four ±1.6 combinations)");
  weird->add_option("--dy", dy, "Vertical shift");
  weird->add_option("--out", out, "Output directory");
  weird->add_option("--seed", seed, "Seed override");

  double wlr = 0.0, wwd = 0.0;
  auto* window = app.add_subcommand("window", "Effective window size under weight decay");
  window->add_option("--lr", wlr, "Learning rate")->required();
  window->add_option("--wd", wwd, "Weight decay")->required();
  window->add_option("--tau", tau, "Threshold")->capture_default_str();

  if (const char* threads = std::getenv("SDL_THREADS")) {
    // Accepted for interface compatibility; the implementation is single-threaded.
    (void)threads;
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    if (*train) return cmd_train(config, out, seed);
    if (*spectrum) return cmd_spectrum(checkpoint, layer, threshold, coverage, out);
    if (*bounds) return cmd_bounds(input, v, v0, tau, lr, wd, batch, out);
    if (*weird) return cmd_weird_validate(config, dx, dy, out, seed);
    if (*window) return cmd_window(wlr, wwd, tau);
  } catch (const sdl::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return sdl::exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 2;
}
