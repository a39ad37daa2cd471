#pragma once

// Run configuration.
//
// Grammar, one entry per line:
//
//   # comment
//   section.key = value
//
// Blank lines and text after '#' are ignored; whitespace around keys and
// values is trimmed. Every key must be one of the known keys listed in
// `default_entries()`; anything else is an error. Lists are comma-separated
// ("1,2,4"). Booleans are true/false.

#include <array>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "topodiff/data.hpp"
#include "topodiff/errors.hpp"
#include "topodiff/losses.hpp"
#include "topodiff/nets/denoiser.hpp"
#include "topodiff/schedule.hpp"
#include "topodiff/tensor/optim.hpp"

namespace topodiff::harness {

enum class TrainMode { Hybrid, Enhanced };

inline TrainMode parse_train_mode(const std::string& s) {
  if (s == "hybrid") return TrainMode::Hybrid;
  if (s == "enhanced") return TrainMode::Enhanced;
  throw ConfigError("train.mode must be 'hybrid' or 'enhanced', got '" + s + "'");
}

struct ScheduleConfig {
  ScheduleKind kind = ScheduleKind::Linear;
  long steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;

  NoiseSchedule build() const { return NoiseSchedule::build(kind, steps, beta_start, beta_end); }
};

struct TrainConfig {
  TrainMode mode = TrainMode::Hybrid;
  long epochs = 15;
  std::size_t batch_size = 16;
  double lr_min = 1e-6;
};

struct InferConfig {
  long aux_t = 1;
  double threshold = 0.5;
  std::size_t full_sample_count = 16;
  std::size_t batch_size = 32;
  std::string eval_split = "val";
};

struct DataConfig {
  std::string source = "synthetic";  // synthetic | manifest
  std::string manifest;
  std::size_t count = 625;
  SynthSpec synth;
  std::array<double, 3> split{0.8, 0.16, 0.04};
  std::uint64_t split_seed = 0;
};

struct AblateConfig {
  std::vector<std::string> variants{"aux-only", "acb-off", "hybrid", "enhanced", "k5", "k10", "k15"};
  std::vector<std::uint64_t> seeds{0, 1, 2};
};

struct RunConfig {
  std::uint64_t seed = 0;
  ScheduleConfig schedule;
  nets::ModelConfig model;
  LossWeights weights;
  TdcConfig tdc;
  AdamWHyper optim;
  TrainConfig train;
  InferConfig infer;
  DataConfig data;
  AblateConfig ablate;
};

// Ordered key -> default value table; also the list of legal keys.
inline const std::vector<std::pair<std::string, std::string>>& default_entries() {
  static const std::vector<std::pair<std::string, std::string>> table = {
      {"run.seed", "0"},
      {"schedule.kind", "linear"},
      {"schedule.steps", "1000"},
      {"schedule.beta_start", "0.0001"},
      {"schedule.beta_end", "0.02"},
      {"model.image_size", "32"},
      {"model.base_channels", "16"},
      {"model.channel_multipliers", "1,2,4"},
      {"model.attention_levels", "1,2"},
      {"model.time_embed_dim", "64"},
      {"model.attention_heads", "4"},
      {"model.norm_groups", "8"},
      {"model.use_acb", "true"},
      {"model.image_stem", "true"},
      {"model.encoder_patch", "8"},
      {"model.encoder_embed_dim", "64"},
      {"model.encoder_depth", "2"},
      {"model.encoder_heads", "4"},
      {"model.encoder_mlp_ratio", "2"},
      {"loss.alpha", "1"},
      {"loss.beta", "1"},
      {"loss.gamma_w", "1"},
      {"loss.lambda", "0.5"},
      {"loss.focal_gamma", "2"},
      {"loss.smooth", "1"},
      {"loss.tdc_k", "5"},
      {"loss.tdc_threshold", "soft"},
      {"loss.tdc_dims", "sum"},
      {"loss.tdc_samples", "4"},
      {"loss.tdc_grad", "true"},
      {"loss.tdc_w_max", "0.1"},
      {"loss.tdc_warmup", "0.2"},
      {"loss.tdc_ramp", "0.3"},
      {"optim.lr", "0.001"},
      {"optim.lr_min", "0.000001"},
      {"optim.beta1", "0.9"},
      {"optim.beta2", "0.999"},
      {"optim.eps", "1e-08"},
      {"optim.weight_decay", "0.01"},
      {"train.mode", "hybrid"},
      {"train.epochs", "15"},
      {"train.batch_size", "16"},
      {"infer.aux_t", "1"},
      {"infer.threshold", "0.5"},
      {"infer.full_sample_count", "16"},
      {"infer.batch_size", "32"},
      {"infer.eval_split", "val"},
      {"data.source", "synthetic"},
      {"data.manifest", ""},
      {"data.count", "625"},
      {"data.size", "32"},
      {"data.components_min", "1"},
      {"data.components_max", "1"},
      {"data.holes_min", "0"},
      {"data.holes_max", "0"},
      {"data.noise_sigma", "0.5"},
      {"data.contrast", "0.4"},
      {"data.seed", "0"},
      {"data.split", "0.8,0.16,0.04"},
      {"ablate.variants", "aux-only,acb-off,hybrid,enhanced,k5,k10,k15"},
      {"ablate.seeds", "0,1,2"},
  };
  return table;
}

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace detail

// Key/value view of a configuration, seeded with every default.
class ConfigMap {
 public:
  ConfigMap() {
    for (const auto& [k, v] : default_entries()) values_[k] = v;
  }

  void set(const std::string& key, const std::string& value) {
    if (!values_.count(key)) throw ConfigError("unknown configuration key '" + key + "'");
    values_[key] = value;
  }

  // "section.key=value"
  void apply_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not of the form section.key=value");
    set(detail::trim(assignment.substr(0, eq)), detail::trim(assignment.substr(eq + 1)));
  }

  void parse_text(const std::string& text, const std::string& origin) {
    std::istringstream is(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.resize(hash);
      line = detail::trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'section.key = value'");
      }
      const std::string key = detail::trim(line.substr(0, eq));
      if (!values_.count(key)) {
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": unknown configuration key '" + key + "'");
      }
      values_[key] = detail::trim(line.substr(eq + 1));
    }
  }

  void parse_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot read config file " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    parse_text(ss.str(), path);
  }

  const std::string& get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown configuration key '" + key + "'");
    return it->second;
  }

  // Canonical text form: every key in table order.
  std::string to_text() const {
    std::string out;
    for (const auto& [k, _] : default_entries()) out += k + " = " + values_.at(k) + "\n";
    return out;
  }

 private:
  std::map<std::string, std::string> values_;
};

namespace detail {

class Reader {
 public:
  explicit Reader(const ConfigMap& m) : m_(m) {}

  std::string str(const std::string& key) const { return m_.get(key); }

  double real(const std::string& key) const {
    const auto& v = m_.get(key);
    try {
      std::size_t used = 0;
      const double d = std::stod(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      return d;
    } catch (const std::exception&) {
      throw ConfigError(key + ": expected a number, got '" + v + "'");
    }
  }

  long integer(const std::string& key) const {
    const auto& v = m_.get(key);
    try {
      std::size_t used = 0;
      const long n = std::stol(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      return n;
    } catch (const std::exception&) {
      throw ConfigError(key + ": expected an integer, got '" + v + "'");
    }
  }

  std::size_t count(const std::string& key) const {
    const long n = integer(key);
    if (n < 0) throw ConfigError(key + " must be nonnegative, got " + std::to_string(n));
    return static_cast<std::size_t>(n);
  }

  std::size_t positive(const std::string& key) const {
    const long n = integer(key);
    if (n < 1) throw ConfigError(key + " must be >= 1, got " + std::to_string(n));
    return static_cast<std::size_t>(n);
  }

  std::uint64_t seed(const std::string& key) const {
    const auto& v = m_.get(key);
    try {
      std::size_t used = 0;
      const auto n = std::stoull(v, &used);
      if (used != v.size() || v.find('-') != std::string::npos) throw std::invalid_argument(v);
      return n;
    } catch (const std::exception&) {
      throw ConfigError(key + ": expected a nonnegative integer, got '" + v + "'");
    }
  }

  bool boolean(const std::string& key) const {
    const auto& v = m_.get(key);
    if (v == "true") return true;
    if (v == "false") return false;
    throw ConfigError(key + ": expected true or false, got '" + v + "'");
  }

  std::vector<std::size_t> counts(const std::string& key) const {
    std::vector<std::size_t> out;
    for (const auto& item : split_list(m_.get(key))) {
      try {
        std::size_t used = 0;
        const long n = std::stol(item, &used);
        if (used != item.size() || n < 0) throw std::invalid_argument(item);
        out.push_back(static_cast<std::size_t>(n));
      } catch (const std::exception&) {
        throw ConfigError(key + ": expected a list of nonnegative integers, got '" + m_.get(key) + "'");
      }
    }
    return out;
  }

 private:
  const ConfigMap& m_;
};

}  // namespace detail

inline RunConfig to_run_config(const ConfigMap& m) {
  detail::Reader r(m);
  RunConfig c;
  c.seed = r.seed("run.seed");

  c.schedule.kind = parse_schedule_kind(r.str("schedule.kind"));
  c.schedule.steps = r.integer("schedule.steps");
  c.schedule.beta_start = r.real("schedule.beta_start");
  c.schedule.beta_end = r.real("schedule.beta_end");

  auto& mc = c.model;
  mc.image_size = r.positive("model.image_size");
  mc.base_channels = r.positive("model.base_channels");
  mc.channel_multipliers = r.counts("model.channel_multipliers");
  mc.attention_levels = r.counts("model.attention_levels");
  mc.time_embed_dim = r.positive("model.time_embed_dim");
  mc.attention_heads = r.positive("model.attention_heads");
  mc.norm_groups = r.positive("model.norm_groups");
  mc.use_acb = r.boolean("model.use_acb");
  mc.image_stem = r.boolean("model.image_stem");
  mc.encoder.patch_size = r.positive("model.encoder_patch");
  mc.encoder.embed_dim = r.positive("model.encoder_embed_dim");
  mc.encoder.depth = r.count("model.encoder_depth");
  mc.encoder.heads = r.positive("model.encoder_heads");
  mc.encoder.mlp_ratio = r.positive("model.encoder_mlp_ratio");

  auto& w = c.weights;
  w.alpha = r.real("loss.alpha");
  w.beta = r.real("loss.beta");
  w.gamma_w = r.real("loss.gamma_w");
  w.lambda = r.real("loss.lambda");
  w.focal_gamma = r.real("loss.focal_gamma");
  w.smooth = r.real("loss.smooth");

  auto& t = c.tdc;
  t.k = r.integer("loss.tdc_k");
  t.threshold = parse_threshold_mode(r.str("loss.tdc_threshold"));
  const auto dims = r.str("loss.tdc_dims");
  if (dims == "sum") t.dims = {true, true};
  else if (dims == "dim0") t.dims = {true, false};
  else if (dims == "dim1") t.dims = {false, true};
  else throw ConfigError("loss.tdc_dims must be sum, dim0 or dim1, got '" + dims + "'");
  t.samples = r.positive("loss.tdc_samples");
  t.gradient = r.boolean("loss.tdc_grad");
  t.w_max = r.real("loss.tdc_w_max");
  t.warmup_fraction = r.real("loss.tdc_warmup");
  t.ramp_fraction = r.real("loss.tdc_ramp");

  c.optim.lr = r.real("optim.lr");
  c.train.lr_min = r.real("optim.lr_min");
  c.optim.beta1 = r.real("optim.beta1");
  c.optim.beta2 = r.real("optim.beta2");
  c.optim.eps = r.real("optim.eps");
  c.optim.weight_decay = r.real("optim.weight_decay");

  c.train.mode = parse_train_mode(r.str("train.mode"));
  c.train.epochs = static_cast<long>(r.positive("train.epochs"));
  c.train.batch_size = r.positive("train.batch_size");

  c.infer.aux_t = r.integer("infer.aux_t");
  c.infer.threshold = r.real("infer.threshold");
  c.infer.full_sample_count = r.positive("infer.full_sample_count");
  c.infer.batch_size = r.positive("infer.batch_size");
  c.infer.eval_split = r.str("infer.eval_split");

  auto& d = c.data;
  d.source = r.str("data.source");
  d.manifest = r.str("data.manifest");
  d.count = r.positive("data.count");
  d.synth.size = r.positive("data.size");
  d.synth.components = {static_cast<int>(r.integer("data.components_min")), static_cast<int>(r.integer("data.components_max"))};
  d.synth.holes = {static_cast<int>(r.integer("data.holes_min")), static_cast<int>(r.integer("data.holes_max"))};
  d.synth.noise_sigma = r.real("data.noise_sigma");
  d.synth.contrast = r.real("data.contrast");
  d.synth.seed = r.seed("data.seed");
  d.split_seed = d.synth.seed;
  const auto fr = detail::split_list(r.str("data.split"));
  if (fr.size() != 3) throw ConfigError("data.split needs three fractions (train,val,test)");
  for (std::size_t i = 0; i < 3; ++i) {
    try {
      d.split[i] = std::stod(fr[i]);
    } catch (const std::exception&) {
      throw ConfigError("data.split: '" + fr[i] + "' is not a number");
    }
  }
  if (std::abs(d.split[0] + d.split[1] + d.split[2] - 1.0) > 1e-9 || d.split[0] <= 0 || d.split[1] < 0 || d.split[2] < 0)
    throw ConfigError("data.split fractions must be nonnegative, sum to 1, and leave a nonempty training share");

  c.ablate.variants = detail::split_list(r.str("ablate.variants"));
  c.ablate.seeds.clear();
  for (auto n : r.counts("ablate.seeds")) c.ablate.seeds.push_back(n);
  if (c.ablate.variants.empty()) throw ConfigError("ablate.variants must name at least one variant");
  if (c.ablate.seeds.empty()) throw ConfigError("ablate.seeds must list at least one seed");

  // Cross-field validation.
  c.schedule.build();
  mc.validate();
  if (mc.image_size != d.synth.size) {
    throw ConfigError("model.image_size (" + std::to_string(mc.image_size) + ") must equal data.size (" +
                      std::to_string(d.synth.size) + ")");
  }
  w.validate();
  t.validate();
  if (!(c.optim.lr > 0)) throw ConfigError("optim.lr must be positive");
  if (c.train.lr_min < 0 || c.train.lr_min > c.optim.lr) throw ConfigError("optim.lr_min must lie in [0, optim.lr]");
  if (!(c.optim.beta1 >= 0 && c.optim.beta1 < 1)) throw ConfigError("optim.beta1 must lie in [0, 1)");
  if (!(c.optim.beta2 >= 0 && c.optim.beta2 < 1)) throw ConfigError("optim.beta2 must lie in [0, 1)");
  if (!(c.optim.eps > 0)) throw ConfigError("optim.eps must be positive");
  if (c.optim.weight_decay < 0) throw ConfigError("optim.weight_decay must be nonnegative");
  if (c.infer.aux_t < 1 || c.infer.aux_t > c.schedule.steps) {
    throw ConfigError("infer.aux_t must lie in [1, schedule.steps], got " + std::to_string(c.infer.aux_t));
  }
  if (!(c.infer.threshold > 0 && c.infer.threshold < 1)) throw ConfigError("infer.threshold must lie in (0, 1)");
  if (c.infer.eval_split != "val" && c.infer.eval_split != "test") {
    throw ConfigError("infer.eval_split must be 'val' or 'test'");
  }
  if (d.source != "synthetic" && d.source != "manifest") {
    throw ConfigError("data.source must be 'synthetic' or 'manifest', got '" + d.source + "'");
  }
  if (d.source == "manifest" && d.manifest.empty()) throw ConfigError("data.manifest is required when data.source = manifest");
  if (d.source == "synthetic") d.synth.validate();
  return c;
}

}  // namespace topodiff::harness
