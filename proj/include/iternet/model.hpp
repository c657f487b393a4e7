#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "iternet/autodiff.hpp"
#include "iternet/checkpoint.hpp"
#include "iternet/param_store.hpp"
#include "iternet/tensor.hpp"

namespace iternet {

/// Encoder-decoder with `depth` levels; level l carries base_channels * 2^l
/// feature maps.
struct UNetConfig {
  std::size_t depth = 3;
  std::size_t base_channels = 8;
  std::size_t in_channels = 3;

  std::size_t channels_at(std::size_t level) const { return base_channels << level; }
  std::size_t alignment() const { return std::size_t{1} << (depth - 1); }

  void validate(const char* which) const {
    if (depth < 2) {
      throw std::invalid_argument(std::string(which) + " unet: depth must be >= 2");
    }
    if (base_channels < 1 || in_channels < 1) {
      throw std::invalid_argument(std::string(which) + " unet: channel counts must be >= 1");
    }
  }

  friend bool operator==(const UNetConfig&, const UNetConfig&) = default;
};

struct IterNetConfig {
  UNetConfig base;
  UNetConfig mini;
  /// Number of outputs: the base module plus iterations - 1 refinery passes.
  std::size_t iterations = 4;
  bool skip_connections = true;
  bool full_size_refinery = false;
  /// Output count the shared 1x1 reduction layer is sized for. Fixing it
  /// keeps the parameter layout independent of `iterations`.
  std::size_t max_iterations = 8;

  /// Derives the refinery from the base: one level shallower and half the
  /// channels, or an exact copy when full_size_refinery is set.
  static IterNetConfig make(const UNetConfig& base, std::size_t iterations,
                            bool skip_connections = true, bool full_size_refinery = false,
                            std::size_t max_iterations = 8) {
    IterNetConfig cfg;
    cfg.base = base;
    cfg.iterations = iterations;
    cfg.skip_connections = skip_connections;
    cfg.full_size_refinery = full_size_refinery;
    cfg.max_iterations = max_iterations;
    cfg.mini = derive_mini(base, full_size_refinery);
    return cfg;
  }

  static UNetConfig derive_mini(const UNetConfig& base, bool full_size) {
    UNetConfig mini = base;
    mini.in_channels = base.base_channels;
    if (!full_size) {
      mini.depth = base.depth > 2 ? base.depth - 1 : 2;
      mini.base_channels = base.base_channels > 1 ? base.base_channels / 2 : 1;
    }
    return mini;
  }

  /// Base depth 3 / 8 channels, refinery depth 2 / 4 channels, four outputs.
  static IterNetConfig toy() { return make(UNetConfig{3, 8, 3}, 4); }
  /// Base depth 4 / 32 channels.
  static IterNetConfig full_scale() { return make(UNetConfig{4, 32, 3}, 4); }

  bool has_refinery() const { return iterations > 1; }

  std::size_t alignment() const {
    return has_refinery() ? std::max(base.alignment(), mini.alignment()) : base.alignment();
  }

  /// Width of the concatenation fed to the shared 1x1 reduction:
  /// base first-layer feature, base feature, one slot per possible refinery
  /// predecessor.
  std::size_t reduce_in_channels() const {
    return 2 * base.base_channels + (max_iterations - 2) * mini.base_channels;
  }

  void validate() const {
    base.validate("base");
    if (iterations < 1) throw std::invalid_argument("iternet: iterations must be >= 1");
    if (!has_refinery()) return;
    mini.validate("mini");
    if (max_iterations < iterations || max_iterations < 2) {
      throw std::invalid_argument("iternet: max_iterations (" + std::to_string(max_iterations) +
                                  ") must be >= iterations (" + std::to_string(iterations) + ")");
    }
  }

  void validate_input(std::size_t h, std::size_t w) const {
    const std::size_t a = alignment();
    if (h == 0 || w == 0 || h % a != 0 || w % a != 0) {
      throw std::invalid_argument("iternet: input " + std::to_string(h) + "x" + std::to_string(w) +
                                  " must be divisible by " + std::to_string(a));
    }
  }

  friend bool operator==(const IterNetConfig&, const IterNetConfig&) = default;
};

using ParamLayout = std::vector<std::pair<std::string, Shape>>;

namespace detail {

inline void conv_layout(ParamLayout& out, const std::string& name, std::size_t o, std::size_t i,
                        std::size_t k) {
  out.emplace_back(name + ".w", Shape{o, i, k, k});
  out.emplace_back(name + ".b", Shape{o});
}

inline void unet_layout(ParamLayout& out, const std::string& prefix, const UNetConfig& cfg) {
  std::size_t in = cfg.in_channels;
  for (std::size_t l = 0; l < cfg.depth; ++l) {
    const std::size_t c = cfg.channels_at(l);
    const std::string p = prefix + ".enc" + std::to_string(l);
    conv_layout(out, p + ".conv1", c, in, 3);
    conv_layout(out, p + ".conv2", c, c, 3);
    in = c;
  }
  for (std::size_t l = cfg.depth - 1; l-- > 0;) {
    const std::size_t c = cfg.channels_at(l);
    const std::string p = prefix + ".dec" + std::to_string(l);
    conv_layout(out, prefix + ".up" + std::to_string(l), c, cfg.channels_at(l + 1), 3);
    conv_layout(out, p + ".conv1", c, 2 * c, 3);
    conv_layout(out, p + ".conv2", c, c, 3);
  }
  conv_layout(out, prefix + ".head", 1, cfg.base_channels, 1);
}

}  // namespace detail

/// Every parameter name and shape, in initialization order. Three groups:
/// `base.*`, `mini.*` (one copy for all refinery passes), and `reduce.*`.
inline ParamLayout iternet_layout(const IterNetConfig& cfg) {
  cfg.validate();
  ParamLayout out;
  detail::unet_layout(out, "base", cfg.base);
  if (cfg.has_refinery()) {
    detail::unet_layout(out, "mini", cfg.mini);
    detail::conv_layout(out, "reduce", cfg.mini.in_channels, cfg.reduce_in_channels(), 1);
  }
  return out;
}

/// Fresh parameters: He-uniform kernels, zero biases.
template <typename T = float>
ParamStore<T> build_iternet(const IterNetConfig& cfg, std::uint64_t seed) {
  ParamStore<T> store;
  std::mt19937_64 rng(seed);
  for (const auto& [name, shape] : iternet_layout(cfg)) {
    if (shape.size() == 4) {
      store.add(name, he_uniform<T>(shape, rng));
    } else {
      store.add(name, basic_tensor<T>(shape));
    }
  }
  return store;
}

template <typename T>
struct UNetOutputs {
  Var<T> first;        // encoder level-0 feature
  Var<T> second_last;  // decoder level-0 feature, input to the head
  Var<T> logits;
};

template <typename T>
struct ForwardResult {
  std::vector<Var<T>> outputs;  // Out_1 .. Out_N, probabilities
  std::vector<Var<T>> logits;
  std::vector<Var<T>> features;  // second-last feature of each module
};

/// Maps a refinery pass index (0-based) to the parameter prefix it reads.
using PrefixFn = std::function<std::string(std::size_t)>;

namespace detail {

template <typename T, typename Store>
Var<T> conv_relu(Tape<T>& tape, Store& store, const std::string& name, Var<T> x) {
  return relu(conv2d(x, tape.param(store, name + ".w"), tape.param(store, name + ".b"),
                     Padding::same));
}

template <typename T, typename Store>
UNetOutputs<T> unet_forward(Tape<T>& tape, Store& store, const std::string& prefix,
                            const UNetConfig& cfg, Var<T> x) {
  std::vector<Var<T>> skips;
  Var<T> h = x;
  for (std::size_t l = 0; l < cfg.depth; ++l) {
    if (l > 0) h = max_pool_2x2(h);
    const std::string p = prefix + ".enc" + std::to_string(l);
    h = conv_relu(tape, store, p + ".conv1", h);
    h = conv_relu(tape, store, p + ".conv2", h);
    skips.push_back(h);
  }
  for (std::size_t l = cfg.depth - 1; l-- > 0;) {
    const std::string up = prefix + ".up" + std::to_string(l);
    h = relu(upsample2x_conv(h, tape.param(store, up + ".w"), tape.param(store, up + ".b")));
    h = concat_channels(skips[l], h);
    const std::string p = prefix + ".dec" + std::to_string(l);
    h = conv_relu(tape, store, p + ".conv1", h);
    h = conv_relu(tape, store, p + ".conv2", h);
  }
  Var<T> logits = conv2d(h, tape.param(store, prefix + ".head.w"),
                         tape.param(store, prefix + ".head.b"), Padding::same);
  return {skips.front(), h, logits};
}

}  // namespace detail

/// Runs the base UNet and the refinery passes. Refinery pass k reads the
/// 1x1-reduced concatenation of the base first-layer feature and the
/// second-last features of all earlier modules; slots for modules that do
/// not exist yet are zero. With skip connections disabled only the direct
/// predecessor's slot is populated.
template <typename T, typename Store>
ForwardResult<T> iternet_forward(Tape<T>& tape, Store& store, const basic_tensor<T>& image,
                                 const IterNetConfig& cfg,
                                 const PrefixFn& mini_prefix = nullptr) {
  cfg.validate();
  const Shape& s = image.shape();
  detail::require_rank4(s, "iternet_forward", "image");
  if (s[1] != cfg.base.in_channels) {
    throw std::invalid_argument("iternet_forward: image has " + std::to_string(s[1]) +
                                " channels, model expects " +
                                std::to_string(cfg.base.in_channels));
  }
  cfg.validate_input(s[2], s[3]);

  ForwardResult<T> result;
  Var<T> x = tape.constant(image);
  UNetOutputs<T> base = detail::unet_forward(tape, store, "base", cfg.base, x);
  result.logits.push_back(base.logits);
  result.outputs.push_back(sigmoid(base.logits));
  result.features.push_back(base.second_last);

  if (cfg.has_refinery()) {
    const std::size_t n = s[0], h = s[2], w = s[3];
    auto zeros = [&](std::size_t c) { return tape.constant(basic_tensor<T>(Shape{n, c, h, w})); };
    const Var<T> zero_base = zeros(cfg.base.base_channels);
    const Var<T> zero_mini = zeros(cfg.mini.base_channels);
    const std::size_t mini_slots = cfg.max_iterations - 2;

    for (std::size_t k = 1; k < cfg.iterations; ++k) {
      // features[0] is the base feature, features[j] (j >= 1) the j-th pass.
      std::vector<Var<T>> slots;
      slots.push_back(cfg.skip_connections ? base.first : zero_base);
      const bool base_is_pred = (k == 1);
      slots.push_back(cfg.skip_connections || base_is_pred ? result.features[0] : zero_base);
      for (std::size_t j = 1; j <= mini_slots; ++j) {
        const bool present = j < k;
        const bool is_pred = (j == k - 1);
        slots.push_back(present && (cfg.skip_connections || is_pred) ? result.features[j]
                                                                     : zero_mini);
      }
      const std::string prefix = mini_prefix ? mini_prefix(k - 1) : std::string("mini");
      Var<T> joined = concat_channels(slots);
      Var<T> reduced = conv2d(joined, tape.param(store, "reduce.w"),
                              tape.param(store, "reduce.b"), Padding::same);
      UNetOutputs<T> mini = detail::unet_forward(tape, store, prefix, cfg.mini, reduced);
      result.logits.push_back(mini.logits);
      result.outputs.push_back(sigmoid(mini.logits));
      result.features.push_back(mini.second_last);
    }
  }
  return result;
}

template <typename T>
struct LossTerms {
  Var<T> total;
  std::vector<double> per_output;
};

/// Weighted sum of per-output sigmoid cross entropies against one gold map.
template <typename T>
LossTerms<T> iternet_loss(const ForwardResult<T>& result, const basic_tensor<T>& gold,
                          const std::vector<T>& weights, const basic_tensor<T>* mask = nullptr) {
  if (weights.size() != result.logits.size()) {
    throw std::invalid_argument("iternet_loss: " + std::to_string(weights.size()) +
                                " weights for " + std::to_string(result.logits.size()) +
                                " outputs");
  }
  for (T v : gold.values()) {
    if (v != T{0} && v != T{1}) throw std::invalid_argument("iternet_loss: gold must be binary");
  }
  LossTerms<T> terms;
  std::vector<Var<T>> parts;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    Var<T> li = sigmoid_cross_entropy(result.logits[i], gold, mask);
    terms.per_output.push_back(static_cast<double>(li.value()[0]));
    parts.push_back(scale(li, weights[i]));
  }
  Var<T> total = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) total = add(total, parts[i]);
  terms.total = total;
  return terms;
}

template <typename T>
std::vector<T> default_loss_weights(const IterNetConfig& cfg) {
  return std::vector<T>(cfg.iterations, T{1});
}

/// All output probability maps for a batch, evaluated from a read-only store.
template <typename T>
std::vector<basic_tensor<T>> predict_outputs(const ParamStore<T>& store, const IterNetConfig& cfg,
                                             const basic_tensor<T>& image) {
  Tape<T> tape;
  ForwardResult<T> r = iternet_forward(tape, store, image, cfg);
  std::vector<basic_tensor<T>> out;
  for (const auto& v : r.outputs) out.push_back(v.value());
  return out;
}

/// Out_N only.
template <typename T>
basic_tensor<T> predict(const ParamStore<T>& store, const IterNetConfig& cfg,
                        const basic_tensor<T>& image) {
  Tape<T> tape;
  ForwardResult<T> r = iternet_forward(tape, store, image, cfg);
  return r.outputs.back().value();
}

/// Confirms that a store has exactly the layout `cfg` requires.
template <typename T>
void check_layout(const ParamStore<T>& store, const IterNetConfig& cfg) {
  const ParamLayout layout = iternet_layout(cfg);
  std::set<std::string> expected;
  for (const auto& [name, shape] : layout) {
    expected.insert(name);
    if (!store.contains(name)) {
      throw checkpoint_error("checkpoint: missing parameter '" + name + "'");
    }
    if (store.value(name).shape() != shape) {
      throw checkpoint_error("checkpoint: parameter '" + name + "' has shape " +
                             shape_string(store.value(name).shape()) + ", config expects " +
                             shape_string(shape));
    }
  }
  for (const auto& name : store.names()) {
    if (!expected.count(name)) {
      throw checkpoint_error("checkpoint: unknown parameter '" + name + "' for this config");
    }
  }
}

inline void save_checkpoint(const ParamStore<float>& store, const std::string& path) {
  write_checkpoint_file(store, path);
}

inline ParamStore<float> load_checkpoint(const std::string& path, const IterNetConfig& cfg) {
  ParamStore<float> store = read_checkpoint_file(path);
  check_layout(store, cfg);
  return store;
}

}  // namespace iternet
