#pragma once

// Run configuration in flat `section.key = value` form. Blank lines and
// lines starting with '#' are ignored. Every key has a default; unknown or
// repeated keys are errors.

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "iternet/adam.hpp"
#include "iternet/data.hpp"
#include "iternet/metrics.hpp"
#include "iternet/model.hpp"
#include "iternet/synth.hpp"

namespace iternet {

struct config_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class PredictMode { whole, patched };

struct ModelSection {
  std::size_t base_depth = 3;
  std::size_t base_channels = 8;
  std::size_t in_channels = 3;
  std::size_t iterations = 4;
  bool skip_connections = true;
  bool full_size_refinery = false;
  std::size_t max_iterations = 8;
  friend bool operator==(const ModelSection&, const ModelSection&) = default;
};

struct TrainSection {
  std::size_t steps = 2000;
  std::size_t batch_size = 4;
  std::size_t patch_size = 32;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  std::vector<double> loss_weights;  // empty: 1 for every output
  bool augment = true;
  double flip_horizontal = 0.5;
  double flip_vertical = 0.5;
  double rotation_min = -20.0;
  double rotation_max = 20.0;
  double translate = 0.0;
  bool affine = false;
  double scale_min = 0.9;
  double scale_max = 1.1;
  double brightness_min = 0.8;
  double brightness_max = 1.2;
  double gamma_min = 0.7;
  double gamma_max = 1.4;
  double channel_shift = 0.05;
  std::uint64_t seed = 1;
  std::string checkpoint = "model.ckpt";
  std::size_t checkpoint_interval = 500;  // 0: only at the end
  std::string loss_log = "loss_log.csv";
  friend bool operator==(const TrainSection&, const TrainSection&) = default;
};

struct PredictSection {
  PredictMode mode = PredictMode::patched;
  std::size_t patch_size = 128;
  std::size_t stride = 8;
  std::size_t batch_size = 1;
  friend bool operator==(const PredictSection&, const PredictSection&) = default;
};

struct EvalSection {
  double alpha = default_alpha;
  double theta_start = 0.0;
  double theta_stop = 255.0;
  double theta_step = 1.0;
  bool with_mask = true;
  bool mask_connectivity = false;
  double threshold = 0.5;
  friend bool operator==(const EvalSection&, const EvalSection&) = default;
};

struct DataSection {
  std::string corpus = "corpus";
  std::size_t count = 30;
  std::size_t train_count = 20;
  std::size_t height = 128;
  std::size_t width = 128;
  std::uint64_t seed = 7;
  double fov_threshold = 0.08;
  std::size_t min_curves = 5;
  std::size_t max_curves = 15;
  double noise_sigma = 0.025;
  friend bool operator==(const DataSection&, const DataSection&) = default;
};

struct RunConfig {
  ModelSection model;
  TrainSection train;
  PredictSection predict;
  EvalSection eval;
  DataSection data;
  friend bool operator==(const RunConfig&, const RunConfig&) = default;

  IterNetConfig model_config() const {
    return IterNetConfig::make(UNetConfig{model.base_depth, model.base_channels, model.in_channels},
                               model.iterations, model.skip_connections, model.full_size_refinery,
                               model.max_iterations);
  }

  AugmentConfig augment_config() const {
    if (!train.augment) return AugmentConfig::identity();
    AugmentConfig a;
    a.flip_horizontal = train.flip_horizontal;
    a.flip_vertical = train.flip_vertical;
    a.rotation_deg = {train.rotation_min, train.rotation_max};
    a.translate_frac = train.translate;
    a.affine = train.affine;
    a.scale = {train.scale_min, train.scale_max};
    a.brightness = {train.brightness_min, train.brightness_max};
    a.gamma = {train.gamma_min, train.gamma_max};
    a.channel_shift = train.channel_shift;
    a.seed = train.seed;
    return a;
  }

  OptimizerConfig optimizer() const {
    OptimizerConfig o;
    o.learning_rate = train.learning_rate;
    o.beta1 = train.beta1;
    o.beta2 = train.beta2;
    return o;
  }

  SynthConfig synth_config() const {
    SynthConfig s;
    s.min_curves = static_cast<int>(data.min_curves);
    s.max_curves = static_cast<int>(data.max_curves);
    s.noise_sigma = data.noise_sigma;
    return s;
  }

  EvalOptions eval_options() const {
    EvalOptions e;
    e.alpha = eval.alpha;
    e.with_mask = eval.with_mask;
    e.mask_connectivity = eval.mask_connectivity;
    e.threshold = eval.threshold;
    e.thetas = theta_grid();
    return e;
  }

  std::vector<double> theta_grid() const {
    std::vector<double> g;
    for (std::size_t k = 0;; ++k) {
      const double t = eval.theta_start + static_cast<double>(k) * eval.theta_step;
      if (t > eval.theta_stop + 1e-9) break;
      g.push_back(t);
    }
    return g;
  }

  std::vector<float> loss_weights() const {
    if (train.loss_weights.empty()) return default_loss_weights<float>(model_config());
    return {train.loss_weights.begin(), train.loss_weights.end()};
  }

  /// Cross-field checks; throws config_error.
  void validate() const {
    auto fail = [](const std::string& m) { throw config_error("config: " + m); };
    try {
      model_config().validate();
      augment_config().validate();
      optimizer().validate();
      synth_config().validate();
    } catch (const std::invalid_argument& e) {
      fail(e.what());
    }
    if (train.batch_size == 0) fail("train.batch_size must be >= 1");
    if (train.patch_size == 0 || train.patch_size % model_config().alignment() != 0) {
      fail("train.patch_size must be a positive multiple of " + std::to_string(model_config().alignment()));
    }
    if (!train.loss_weights.empty() && train.loss_weights.size() != model.iterations) {
      fail("train.loss_weights has " + std::to_string(train.loss_weights.size()) + " entries for " +
           std::to_string(model.iterations) + " outputs");
    }
    if (predict.patch_size == 0 || predict.patch_size % model_config().alignment() != 0) {
      fail("predict.patch_size must be a positive multiple of " + std::to_string(model_config().alignment()));
    }
    if (predict.stride == 0 || predict.stride > predict.patch_size) fail("predict.stride must be in [1, patch_size]");
    if (predict.batch_size == 0) fail("predict.batch_size must be >= 1");
    if (!(eval.alpha > 0.0)) fail("eval.alpha must be positive");
    if (!(eval.theta_step > 0.0) || eval.theta_stop < eval.theta_start) fail("eval theta grid is empty");
    if (data.train_count > data.count) fail("data.train_count exceeds data.count");
    if (data.height < 64 || data.width < 64) fail("data.height and data.width must be >= 64");
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::string format_value(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}
inline std::string format_value(bool v) { return v ? "true" : "false"; }
inline std::string format_value(std::size_t v) { return std::to_string(v); }
inline std::string format_value(const std::string& v) { return v; }
inline std::string format_value(PredictMode m) { return m == PredictMode::whole ? "whole" : "patched"; }
inline std::string format_value(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + format_value(v[i]);
  return out;
}

template <typename N>
N parse_number(const std::string& s) {
  N v{};
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw config_error("not a number: '" + s + "'");
  return v;
}

inline void parse_value(const std::string& s, double& out) { out = parse_number<double>(s); }
inline void parse_value(const std::string& s, std::size_t& out) { out = parse_number<std::size_t>(s); }
inline void parse_value(const std::string& s, bool& out) {
  if (s == "true" || s == "1" || s == "yes") out = true;
  else if (s == "false" || s == "0" || s == "no") out = false;
  else throw config_error("not a boolean: '" + s + "'");
}
inline void parse_value(const std::string& s, std::string& out) { out = s; }
inline void parse_value(const std::string& s, PredictMode& out) {
  if (s == "whole") out = PredictMode::whole;
  else if (s == "patched") out = PredictMode::patched;
  else throw config_error("mode must be 'whole' or 'patched', got '" + s + "'");
}
inline void parse_value(const std::string& s, std::vector<double>& out) {
  out.clear();
  if (s.empty()) return;
  std::size_t start = 0;
  while (true) {
    const auto comma = s.find(',', start);
    out.push_back(parse_number<double>(trim(s.substr(start, comma - start))));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
}

struct ConfigField {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <typename Access>
ConfigField field(std::string key, Access access) {
  return {std::move(key),
          [access](const RunConfig& c) { return format_value(access(const_cast<RunConfig&>(c))); },
          [access](RunConfig& c, const std::string& v) { parse_value(v, access(c)); }};
}

#define ITERNET_FIELD(section, name) \
  field(#section "." #name, [](RunConfig& c) -> auto& { return c.section.name; })

inline const std::vector<ConfigField>& config_fields() {
  static const std::vector<ConfigField> fields = {
      ITERNET_FIELD(model, base_depth),
      ITERNET_FIELD(model, base_channels),
      ITERNET_FIELD(model, in_channels),
      ITERNET_FIELD(model, iterations),
      ITERNET_FIELD(model, skip_connections),
      ITERNET_FIELD(model, full_size_refinery),
      ITERNET_FIELD(model, max_iterations),
      ITERNET_FIELD(train, steps),
      ITERNET_FIELD(train, batch_size),
      ITERNET_FIELD(train, patch_size),
      ITERNET_FIELD(train, learning_rate),
      ITERNET_FIELD(train, beta1),
      ITERNET_FIELD(train, beta2),
      ITERNET_FIELD(train, loss_weights),
      ITERNET_FIELD(train, augment),
      ITERNET_FIELD(train, flip_horizontal),
      ITERNET_FIELD(train, flip_vertical),
      ITERNET_FIELD(train, rotation_min),
      ITERNET_FIELD(train, rotation_max),
      ITERNET_FIELD(train, translate),
      ITERNET_FIELD(train, affine),
      ITERNET_FIELD(train, scale_min),
      ITERNET_FIELD(train, scale_max),
      ITERNET_FIELD(train, brightness_min),
      ITERNET_FIELD(train, brightness_max),
      ITERNET_FIELD(train, gamma_min),
      ITERNET_FIELD(train, gamma_max),
      ITERNET_FIELD(train, channel_shift),
      ITERNET_FIELD(train, seed),
      ITERNET_FIELD(train, checkpoint),
      ITERNET_FIELD(train, checkpoint_interval),
      ITERNET_FIELD(train, loss_log),
      ITERNET_FIELD(predict, mode),
      ITERNET_FIELD(predict, patch_size),
      ITERNET_FIELD(predict, stride),
      ITERNET_FIELD(predict, batch_size),
      ITERNET_FIELD(eval, alpha),
      ITERNET_FIELD(eval, theta_start),
      ITERNET_FIELD(eval, theta_stop),
      ITERNET_FIELD(eval, theta_step),
      ITERNET_FIELD(eval, with_mask),
      ITERNET_FIELD(eval, mask_connectivity),
      ITERNET_FIELD(eval, threshold),
      ITERNET_FIELD(data, corpus),
      ITERNET_FIELD(data, count),
      ITERNET_FIELD(data, train_count),
      ITERNET_FIELD(data, height),
      ITERNET_FIELD(data, width),
      ITERNET_FIELD(data, seed),
      ITERNET_FIELD(data, fov_threshold),
      ITERNET_FIELD(data, min_curves),
      ITERNET_FIELD(data, max_curves),
      ITERNET_FIELD(data, noise_sigma),
  };
  return fields;
}

#undef ITERNET_FIELD

}  // namespace detail

/// Applies `key = value` lines on top of `base` (defaults if omitted).
inline RunConfig parse_config(std::istream& in, RunConfig base = {}) {
  const auto& fields = detail::config_fields();
  std::vector<std::string> seen;
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    const std::string where = "config line " + std::to_string(lineno) + ": ";
    if (eq == std::string::npos) throw config_error(where + "expected 'section.key = value'");
    const std::string key = detail::trim(t.substr(0, eq));
    const std::string value = detail::trim(t.substr(eq + 1));
    const auto it = std::find_if(fields.begin(), fields.end(), [&](const auto& f) { return f.key == key; });
    if (it == fields.end()) throw config_error(where + "unknown key '" + key + "'");
    if (std::find(seen.begin(), seen.end(), key) != seen.end()) {
      throw config_error(where + "key '" + key + "' given twice");
    }
    seen.push_back(key);
    try {
      it->set(base, value);
    } catch (const config_error& e) {
      throw config_error(where + key + ": " + e.what());
    }
  }
  return base;
}

inline RunConfig parse_config_string(const std::string& text, RunConfig base = {}) {
  std::istringstream in(text);
  return parse_config(in, std::move(base));
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw config_error("cannot open config " + path.string());
  return parse_config(in);
}

/// Every key, in a fixed order.
inline std::string serialize_config(const RunConfig& c) {
  std::string out;
  for (const auto& f : detail::config_fields()) out += f.key + " = " + f.get(c) + "\n";
  return out;
}

}  // namespace iternet
