#pragma once

// Run configuration: flat `key = value` text, one entry per line, `#` starts
// a comment. Unknown keys, duplicate keys and malformed values are rejected
// before anything is written. Relative data paths resolve against the
// directory containing the config file.

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "sdl/ingest.hpp"
#include "sdl/network.hpp"
#include "sdl/trainer.hpp"

namespace sdl {

struct DataConfig {
  std::string source = "blobs";  // "blobs" | "idx"
  std::string train_images, train_labels, test_images, test_labels;
  std::size_t train_limit = 0;   // 0: all samples
  std::size_t blobs_classes = 4;
  std::size_t blobs_dim = 8;
  std::size_t blobs_per_class = 16;
  double blobs_spread = 0.3;
  std::uint64_t blobs_seed = 1;
};

struct RunConfig {
  NetworkSpec spec;
  TrainConfig train;
  DataConfig data;
  std::size_t epochs = 0;            // when > 0, steps = epochs · ceil(N / batch)
  std::size_t checkpoint_every = 0;  // 0: initial and final checkpoints only
  std::string out_dir;
};

inline const std::set<std::string>& config_keys() {
  static const std::set<std::string> keys = {
      "hidden_width", "mlp_width", "num_blocks", "num_classes", "activation", "zeroth_bias", "layernorm", "skip",
      "lr", "weight_decay", "clip", "batch_size", "steps", "epochs", "schedule", "warmup", "seed", "init",
      "algo1", "algo1_c", "algo2", "algo2_t_uplift", "magic", "magic_sigma", "magic_rho", "with_replacement",
      "log_every", "log_bounds", "accumulate", "accumulate_decay", "test_every", "test_samples",
      "data", "train_images", "train_labels", "test_images", "test_labels", "train_limit",
      "blobs_classes", "blobs_dim", "blobs_per_class", "blobs_spread", "blobs_seed",
      "checkpoint_every", "out"};
  return keys;
}

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::size_t parse_count(const std::string& s, const std::string& key) {
  std::size_t pos = 0;
  unsigned long long v = 0;
  try {
    if (!s.empty() && s[0] == '-') throw std::invalid_argument("negative");
    v = std::stoull(s, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != s.size()) fail(ErrorKind::InvalidArgument, "config: '" + key + "' expects a non-negative integer, got '" + s + "'");
  return static_cast<std::size_t>(v);
}

inline bool parse_bool(const std::string& s, const std::string& key) {
  if (s == "true" || s == "1" || s == "on" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "off" || s == "no") return false;
  fail(ErrorKind::InvalidArgument, "config: '" + key + "' expects true/false, got '" + s + "'");
}

}  // namespace detail

inline std::map<std::string, std::string> parse_key_values(std::istream& in) {
  std::map<std::string, std::string> kv;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      fail(ErrorKind::InvalidArgument, "config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (!config_keys().contains(key))
      fail(ErrorKind::InvalidArgument, "config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    if (!kv.emplace(key, value).second)
      fail(ErrorKind::InvalidArgument, "config line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
  }
  return kv;
}

// Builds and validates a RunConfig; `base_dir` resolves relative paths.
inline RunConfig run_config_from(const std::map<std::string, std::string>& kv, const std::filesystem::path& base_dir) {
  RunConfig rc;
  auto get = [&](const std::string& k) -> const std::string* {
    auto it = kv.find(k);
    return it == kv.end() ? nullptr : &it->second;
  };
  auto count = [&](const std::string& k, auto& dst) {
    if (auto v = get(k)) dst = static_cast<std::remove_reference_t<decltype(dst)>>(detail::parse_count(*v, k));
  };
  auto real = [&](const std::string& k, double& dst) {
    if (auto v = get(k)) dst = detail::parse_real(*v, k);
  };
  auto flag = [&](const std::string& k, bool& dst) {
    if (auto v = get(k)) dst = detail::parse_bool(*v, k);
  };
  auto path = [&](const std::string& k, std::string& dst) {
    if (auto v = get(k)) {
      std::filesystem::path p(*v);
      dst = (p.is_absolute() ? p : base_dir / p).lexically_normal().string();
    }
  };

  NetworkSpec& s = rc.spec;
  count("hidden_width", s.hidden_width);
  count("mlp_width", s.mlp_width);
  count("num_blocks", s.num_blocks);
  s.num_classes = 0;
  count("num_classes", s.num_classes);
  if (auto v = get("activation")) s.activation = parse_activation(*v);
  flag("zeroth_bias", s.use_zeroth_bias);
  flag("layernorm", s.use_layernorm);
  flag("skip", s.use_skip);

  TrainConfig& t = rc.train;
  real("lr", t.lr);
  real("weight_decay", t.weight_decay);
  if (auto v = get("clip"); v && *v != "none") {
    const double c = detail::parse_real(*v, "clip");
    if (c > 0.0) t.clip_global_norm = c;
  }
  count("batch_size", t.batch_size);
  count("steps", t.steps);
  count("epochs", rc.epochs);
  std::size_t warmup = 0;
  count("warmup", warmup);
  if (auto v = get("schedule")) t.schedule = parse_schedule(*v, warmup);
  if (auto v = get("seed")) t.seed = detail::parse_count(*v, "seed");
  if (auto v = get("init")) t.init = parse_init_scheme(*v);
  flag("algo1", t.algo1.enabled);
  real("algo1_c", t.algo1.c_factor);
  flag("algo2", t.algo2.enabled);
  count("algo2_t_uplift", t.algo2.t_uplift);
  flag("magic", t.magic.enabled);
  real("magic_sigma", t.magic.sigma);
  real("magic_rho", t.magic.adaptive_rho);
  flag("with_replacement", t.sample_with_replacement);
  count("log_every", t.log_every);
  flag("log_bounds", t.log_bounds);
  flag("accumulate", t.accumulate);
  flag("accumulate_decay", t.accumulate_decay);
  count("test_every", t.test_every);
  count("test_samples", t.test_samples);

  DataConfig& d = rc.data;
  if (auto v = get("data")) d.source = *v;
  require(d.source == "blobs" || d.source == "idx", ErrorKind::InvalidArgument,
          "config: 'data' must be blobs or idx, got '" + d.source + "'");
  path("train_images", d.train_images);
  path("train_labels", d.train_labels);
  path("test_images", d.test_images);
  path("test_labels", d.test_labels);
  count("train_limit", d.train_limit);
  count("blobs_classes", d.blobs_classes);
  count("blobs_dim", d.blobs_dim);
  count("blobs_per_class", d.blobs_per_class);
  real("blobs_spread", d.blobs_spread);
  if (auto v = get("blobs_seed")) d.blobs_seed = detail::parse_count(*v, "blobs_seed");
  if (d.source == "idx")
    require(!d.train_images.empty() && !d.train_labels.empty(), ErrorKind::InvalidArgument,
            "config: data = idx needs train_images and train_labels");
  require((d.test_images.empty()) == (d.test_labels.empty()), ErrorKind::InvalidArgument,
          "config: test_images and test_labels must be given together");

  count("checkpoint_every", rc.checkpoint_every);
  path("out", rc.out_dir);

  require(!(get("steps") && get("epochs")), ErrorKind::InvalidArgument, "config: give steps or epochs, not both");
  t.validate();
  validate_activation(s.activation);
  require(s.hidden_width >= 1 && s.mlp_width >= 1 && s.num_blocks >= 1, ErrorKind::InvalidArgument,
          "config: widths and num_blocks must be >= 1");
  require(!t.algo1.enabled || s.use_layernorm, ErrorKind::InvalidArgument, "config: algo1 needs layernorm = true");
  require(!t.algo2.enabled || s.use_layernorm, ErrorKind::InvalidArgument, "config: algo2 needs layernorm = true");
  return rc;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Io, "cannot open config " + path);
  const auto kv = parse_key_values(in);
  return run_config_from(kv, std::filesystem::absolute(path).parent_path());
}

struct RunData {
  Dataset train;
  std::optional<Dataset> test;
};

// Loads the configured data and completes the spec (input_dim, num_classes)
// and step count from it.
inline RunData load_run_data(RunConfig& rc) {
  RunData rd;
  const DataConfig& d = rc.data;
  if (d.source == "idx") {
    rd.train = load_idx(d.train_images, d.train_labels);
    if (!d.test_images.empty()) rd.test = load_idx(d.test_images, d.test_labels);
  } else {
    Rng rng(d.blobs_seed);
    rd.train = synthetic_blobs(d.blobs_classes, d.blobs_dim, d.blobs_per_class, d.blobs_spread, rng);
  }
  if (d.train_limit > 0) rd.train = take_prefix(rd.train, d.train_limit);
  rc.spec.input_dim = rd.train.input_dim();
  std::size_t classes = rd.train.num_classes;
  if (rd.test) classes = std::max(classes, rd.test->num_classes);
  if (rc.spec.num_classes == 0) rc.spec.num_classes = classes;
  require(rc.spec.num_classes >= classes, ErrorKind::Data, "config: num_classes is smaller than the data's label range");
  rd.train.num_classes = rc.spec.num_classes;
  if (rd.test) {
    require(rd.test->input_dim() == rc.spec.input_dim, ErrorKind::Data, "test set input_dim differs from train set");
    rd.test->num_classes = rc.spec.num_classes;
  }
  if (rc.epochs > 0) {
    const std::size_t per_epoch = (rd.train.size() + rc.train.batch_size - 1) / rc.train.batch_size;
    rc.train.steps = rc.epochs * per_epoch;
  }
  return rd;
}

}  // namespace sdl
