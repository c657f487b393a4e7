#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "iternet/tensor.hpp"

namespace iternet {

/// Image in [0,1] plus aligned binary gold standard and field-of-view mask.
struct Sample {
  Tensor image;  // [1,C,H,W]
  Tensor gold;   // [1,1,H,W]
  Tensor fov;    // [1,1,H,W]

  std::size_t height() const { return image.dim(2); }
  std::size_t width() const { return image.dim(3); }

  void validate() const {
    if (image.rank() != 4 || image.dim(0) != 1) {
      throw std::invalid_argument("sample: image must be [1,C,H,W], got " + shape_string(image.shape()));
    }
    const Shape plane{1, 1, image.dim(2), image.dim(3)};
    if (gold.shape() != plane || fov.shape() != plane) {
      throw std::invalid_argument("sample: gold " + shape_string(gold.shape()) + " and fov " +
                                  shape_string(fov.shape()) + " must be " + shape_string(plane));
    }
    auto binary = [](const Tensor& t) {
      return std::all_of(t.values().begin(), t.values().end(), [](float v) { return v == 0.0f || v == 1.0f; });
    };
    if (!binary(gold) || !binary(fov)) throw std::invalid_argument("sample: gold and fov must be binary");
  }
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

/// Independent seed for sub-stream `stream` of a run seeded with `seed`.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  return splitmix64(splitmix64(seed) ^ (stream * 0xD1B54A32D192ED03ull));
}

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  return lo + (hi - lo) * u;
}

// ---------------------------------------------------------------------------
// FoV mask

namespace detail {

inline Tensor morph3x3(const Tensor& m, bool dilate) {
  const std::size_t h = m.dim(2), w = m.dim(3);
  Tensor out(m.shape());
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      float acc = dilate ? 0.0f : 1.0f;
      // out-of-image neighbours are ignored
      for (std::size_t yy = y ? y - 1 : 0; yy <= std::min(h - 1, y + 1); ++yy)
        for (std::size_t xx = x ? x - 1 : 0; xx <= std::min(w - 1, x + 1); ++xx)
          acc = dilate ? std::max(acc, m.at(0, 0, yy, xx)) : std::min(acc, m.at(0, 0, yy, xx));
      out.at(0, 0, y, x) = acc;
    }
  return out;
}

}  // namespace detail

inline Tensor morph_close3x3(const Tensor& mask) {
  return detail::morph3x3(detail::morph3x3(mask, true), false);
}

inline constexpr float default_fov_threshold = 0.08f;

/// 1 where the channel-mean intensity exceeds `threshold`, then one 3x3 closing.
inline Tensor generate_fov_mask(const Tensor& image, float threshold = default_fov_threshold) {
  if (image.rank() != 4 || image.dim(0) != 1) {
    throw std::invalid_argument("generate_fov_mask: expected [1,C,H,W], got " + shape_string(image.shape()));
  }
  const std::size_t c = image.dim(1), h = image.dim(2), w = image.dim(3);
  Tensor mask(Shape{1, 1, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      float sum = 0.0f;
      for (std::size_t k = 0; k < c; ++k) sum += image.at(0, k, y, x);
      mask.at(0, 0, y, x) = sum / static_cast<float>(c) > threshold ? 1.0f : 0.0f;
    }
  return morph_close3x3(mask);
}

// ---------------------------------------------------------------------------
// Augmentation

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

struct AugmentConfig {
  double flip_horizontal = 0.5;  // probabilities
  double flip_vertical = 0.5;
  Range rotation_deg{-20.0, 20.0};  // positive turns (r,c) towards (c, H-1-r)
  double translate_frac = 0.0;      // max shift as a fraction of each side
  bool affine = false;              // enables isotropic scaling
  Range scale{0.9, 1.1};
  Range brightness{0.8, 1.2};
  Range gamma{0.7, 1.4};
  double channel_shift = 0.05;
  std::uint64_t seed = 0;

  static AugmentConfig identity() {
    AugmentConfig c;
    c.flip_horizontal = c.flip_vertical = 0.0;
    c.rotation_deg = {0.0, 0.0};
    c.scale = {1.0, 1.0};
    c.brightness = {1.0, 1.0};
    c.gamma = {1.0, 1.0};
    c.channel_shift = 0.0;
    return c;
  }

  void validate() const {
    auto prob = [](double p, const char* what) {
      if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument(std::string("augment: ") + what + " not in [0,1]");
    };
    auto range = [](Range r, const char* what) {
      if (!std::isfinite(r.lo) || !std::isfinite(r.hi) || r.lo > r.hi) {
        throw std::invalid_argument(std::string("augment: ") + what + " must be a finite interval lo <= hi");
      }
    };
    prob(flip_horizontal, "flip_horizontal");
    prob(flip_vertical, "flip_vertical");
    range(rotation_deg, "rotation");
    range(scale, "scale");
    range(brightness, "brightness");
    range(gamma, "gamma");
    if (!(translate_frac >= 0.0 && translate_frac < 1.0)) throw std::invalid_argument("augment: translate_frac not in [0,1)");
    if (!(channel_shift >= 0.0) || !std::isfinite(channel_shift)) throw std::invalid_argument("augment: bad channel_shift");
    if (affine && scale.lo <= 0.0) throw std::invalid_argument("augment: scale must be positive");
    if (brightness.lo < 0.0 || gamma.lo <= 0.0) throw std::invalid_argument("augment: brightness/gamma must be positive");
  }
};

/// Parameters drawn for one augmentation call.
struct AugmentDraw {
  bool flip_h = false;
  bool flip_v = false;
  double angle_deg = 0.0;
  double shift_row = 0.0;
  double shift_col = 0.0;
  double scale = 1.0;
  double brightness = 1.0;
  double gamma = 1.0;
  std::vector<double> channel_shift;
};

inline AugmentDraw draw_augment(const AugmentConfig& cfg, std::size_t channels, std::size_t h, std::size_t w,
                                std::mt19937_64& rng) {
  AugmentDraw d;
  d.flip_h = uniform(rng, 0.0, 1.0) < cfg.flip_horizontal;
  d.flip_v = uniform(rng, 0.0, 1.0) < cfg.flip_vertical;
  d.angle_deg = uniform(rng, cfg.rotation_deg.lo, cfg.rotation_deg.hi);
  d.shift_row = uniform(rng, -1.0, 1.0) * cfg.translate_frac * static_cast<double>(h);
  d.shift_col = uniform(rng, -1.0, 1.0) * cfg.translate_frac * static_cast<double>(w);
  const double s = uniform(rng, cfg.scale.lo, cfg.scale.hi);
  d.scale = cfg.affine ? s : 1.0;
  d.brightness = uniform(rng, cfg.brightness.lo, cfg.brightness.hi);
  d.gamma = uniform(rng, cfg.gamma.lo, cfg.gamma.hi);
  d.channel_shift.resize(channels);
  for (auto& v : d.channel_shift) v = uniform(rng, -cfg.channel_shift, cfg.channel_shift);
  return d;
}

namespace detail {

inline Tensor flip(const Tensor& t, bool horizontal, bool vertical) {
  if (!horizontal && !vertical) return t;
  const std::size_t c = t.dim(1), h = t.dim(2), w = t.dim(3);
  Tensor out(t.shape());
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        out.at(0, k, vertical ? h - 1 - y : y, horizontal ? w - 1 - x : x) = t.at(0, k, y, x);
  return out;
}

/// Inverse-maps every output pixel through rotation/scale/shift about the
/// image centre and samples bilinearly; outside the source reads 0.
inline Tensor warp(const Tensor& t, const AugmentDraw& d) {
  const std::size_t c = t.dim(1), h = t.dim(2), w = t.dim(3);
  double cs, sn;
  const double quarter = d.angle_deg / 90.0;
  if (quarter == std::round(quarter)) {
    // exact trig at multiples of 90 degrees keeps the permutation exact
    static constexpr double cos_q[] = {1, 0, -1, 0}, sin_q[] = {0, 1, 0, -1};
    const long q = ((static_cast<long>(quarter) % 4) + 4) % 4;
    cs = cos_q[q];
    sn = sin_q[q];
  } else {
    const double a = d.angle_deg * std::numbers::pi / 180.0;
    cs = std::cos(a);
    sn = std::sin(a);
  }
  const double cy = (static_cast<double>(h) - 1.0) / 2.0, cx = (static_cast<double>(w) - 1.0) / 2.0;
  Tensor out(t.shape());
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double dr = (static_cast<double>(y) - cy - d.shift_row) / d.scale;
      const double dc = (static_cast<double>(x) - cx - d.shift_col) / d.scale;
      const double sy = cy + cs * dr - sn * dc;
      const double sx = cx + sn * dr + cs * dc;
      const double fy = std::floor(sy), fx = std::floor(sx);
      const double ay = sy - fy, ax = sx - fx;
      const long y0 = static_cast<long>(fy), x0 = static_cast<long>(fx);
      for (std::size_t k = 0; k < c; ++k) {
        auto px = [&](long yy, long xx) -> double {
          if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(w)) return 0.0;
          return t.at(0, k, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx));
        };
        double v = px(y0, x0);
        if (ay != 0.0 || ax != 0.0) {
          v = (1 - ay) * ((1 - ax) * v + ax * px(y0, x0 + 1)) +
              ay * ((1 - ax) * px(y0 + 1, x0) + ax * px(y0 + 1, x0 + 1));
        }
        out.at(0, k, y, x) = static_cast<float>(v);
      }
    }
  return out;
}

inline void rebinarize(Tensor& t) {
  for (auto& v : t.values()) v = v >= 0.5f ? 1.0f : 0.0f;
}

}  // namespace detail

/// Applies one drawn augmentation. Geometry acts on all three planes,
/// photometric changes on the image only.
inline Sample apply_augment(const Sample& s, const AugmentDraw& d) {
  Sample out{detail::flip(s.image, d.flip_h, d.flip_v), detail::flip(s.gold, d.flip_h, d.flip_v),
             detail::flip(s.fov, d.flip_h, d.flip_v)};
  if (d.angle_deg != 0.0 || d.shift_row != 0.0 || d.shift_col != 0.0 || d.scale != 1.0) {
    out.image = detail::warp(out.image, d);
    out.gold = detail::warp(out.gold, d);
    out.fov = detail::warp(out.fov, d);
    detail::rebinarize(out.gold);
    detail::rebinarize(out.fov);
  }
  const std::size_t c = out.image.dim(1), plane = out.image.dim(2) * out.image.dim(3);
  for (std::size_t k = 0; k < c; ++k) {
    float* p = out.image.data() + k * plane;
    const float shift = d.channel_shift.empty() ? 0.0f : static_cast<float>(d.channel_shift[k]);
    for (std::size_t i = 0; i < plane; ++i) {
      float v = p[i];
      if (d.brightness != 1.0) v = std::clamp(v * static_cast<float>(d.brightness), 0.0f, 1.0f);
      if (d.gamma != 1.0) v = std::pow(v, static_cast<float>(d.gamma));
      if (shift != 0.0f) v += shift;
      p[i] = std::clamp(v, 0.0f, 1.0f);
    }
  }
  return out;
}

inline Sample augment(const Sample& s, const AugmentConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  return apply_augment(s, draw_augment(cfg, s.image.dim(1), s.height(), s.width(), rng));
}

// ---------------------------------------------------------------------------
// Patches

struct PatchAnchor {
  std::size_t row = 0;
  std::size_t col = 0;
  friend bool operator==(const PatchAnchor&, const PatchAnchor&) = default;
};

inline Sample crop_sample(const Sample& s, PatchAnchor a, std::size_t size) {
  return {crop(s.image, a.row, a.col, size, size), crop(s.gold, a.row, a.col, size, size),
          crop(s.fov, a.row, a.col, size, size)};
}

inline PatchAnchor draw_patch_anchor(std::size_t h, std::size_t w, std::size_t size, std::mt19937_64& rng) {
  if (size == 0 || h < size || w < size) {
    throw std::invalid_argument("training patch of size " + std::to_string(size) + " does not fit a " +
                                std::to_string(h) + "x" + std::to_string(w) + " image");
  }
  const auto r = std::uniform_int_distribution<std::size_t>(0, h - size)(rng);
  const auto c = std::uniform_int_distribution<std::size_t>(0, w - size)(rng);
  return {r, c};
}

/// Crop with a uniformly random top-left anchor shared by all three planes.
inline Sample sample_training_patch(const Sample& s, std::mt19937_64& rng, std::size_t size = 128) {
  return crop_sample(s, draw_patch_anchor(s.height(), s.width(), size, rng), size);
}

/// Anchors along one axis: multiples of stride, plus a final anchor clamped
/// so the last patch ends on the border.
inline std::vector<std::size_t> grid_axis_anchors(std::size_t length, std::size_t size, std::size_t stride) {
  if (stride < 1) throw std::invalid_argument("patch grid: stride must be >= 1");
  if (size == 0 || length < size) {
    throw std::invalid_argument("patch grid: patch size " + std::to_string(size) + " exceeds side " +
                                std::to_string(length));
  }
  if (stride > size) {
    throw std::invalid_argument("patch grid: stride " + std::to_string(stride) + " exceeds patch size " +
                                std::to_string(size) + " and would leave gaps");
  }
  std::vector<std::size_t> a;
  for (std::size_t p = 0; p + size <= length; p += stride) a.push_back(p);
  if (a.back() != length - size) a.push_back(length - size);
  return a;
}

/// Closed form of grid_axis_anchors(...).size(): ceil((length - size) / stride) + 1.
inline std::size_t grid_axis_count(std::size_t length, std::size_t size, std::size_t stride) {
  if (stride < 1) throw std::invalid_argument("patch grid: stride must be >= 1");
  if (size == 0 || length < size) throw std::invalid_argument("patch grid: patch larger than side");
  return (length - size + stride - 1) / stride + 1;
}

struct PatchGrid {
  std::size_t patch_size = 0;
  std::size_t stride = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<PatchAnchor> coords;  // row-major over the two axis lists
};

inline PatchGrid make_patch_grid(std::size_t h, std::size_t w, std::size_t size, std::size_t stride) {
  PatchGrid g{size, stride, h, w, {}};
  const auto rows = grid_axis_anchors(h, size, stride);
  const auto cols = grid_axis_anchors(w, size, stride);
  g.coords.reserve(rows.size() * cols.size());
  for (auto r : rows)
    for (auto c : cols) g.coords.push_back({r, c});
  return g;
}

/// Materialises every patch. Large grids should crop lazily from `coords`.
inline std::pair<PatchGrid, std::vector<Tensor>> extract_grid_patches(const Tensor& image, std::size_t size,
                                                                      std::size_t stride) {
  if (image.rank() != 4) throw std::invalid_argument("extract_grid_patches: expected rank 4");
  PatchGrid g = make_patch_grid(image.dim(2), image.dim(3), size, stride);
  std::vector<Tensor> patches;
  patches.reserve(g.coords.size());
  for (const auto& a : g.coords) patches.push_back(crop(image, a.row, a.col, size, size));
  return {std::move(g), std::move(patches)};
}

/// Running sum and coverage count for overlap averaging.
class PatchAccumulator {
 public:
  PatchAccumulator(std::size_t channels, std::size_t h, std::size_t w)
      : c_(channels), h_(h), w_(w), sum_(channels * h * w, 0.0), count_(h * w, 0) {}

  void add(PatchAnchor a, const Tensor& patch) {
    if (patch.rank() != 4 || patch.dim(0) != 1 || patch.dim(1) != c_ || a.row + patch.dim(2) > h_ ||
        a.col + patch.dim(3) > w_) {
      throw std::invalid_argument("stitch: patch " + shape_string(patch.shape()) + " at (" +
                                  std::to_string(a.row) + "," + std::to_string(a.col) + ") does not fit");
    }
    const std::size_t ph = patch.dim(2), pw = patch.dim(3);
    for (std::size_t y = 0; y < ph; ++y)
      for (std::size_t x = 0; x < pw; ++x) {
        const std::size_t pix = (a.row + y) * w_ + a.col + x;
        ++count_[pix];
        for (std::size_t k = 0; k < c_; ++k) sum_[k * h_ * w_ + pix] += patch.at(0, k, y, x);
      }
  }

  Tensor result() const {
    Tensor out(Shape{1, c_, h_, w_});
    for (std::size_t pix = 0; pix < h_ * w_; ++pix) {
      if (count_[pix] == 0) {
        throw std::logic_error("stitch: pixel (" + std::to_string(pix / w_) + "," + std::to_string(pix % w_) +
                               ") not covered by any patch");
      }
      for (std::size_t k = 0; k < c_; ++k)
        out[k * h_ * w_ + pix] = static_cast<float>(sum_[k * h_ * w_ + pix] / count_[pix]);
    }
    return out;
  }

 private:
  std::size_t c_, h_, w_;
  std::vector<double> sum_;
  std::vector<std::uint32_t> count_;
};

/// Averages overlapping patch outputs back into an h x w map.
inline Tensor stitch_patches(const PatchGrid& grid, const std::vector<Tensor>& outputs, std::size_t h, std::size_t w) {
  if (outputs.size() != grid.coords.size()) {
    throw std::invalid_argument("stitch: " + std::to_string(grid.coords.size()) + " anchors but " +
                                std::to_string(outputs.size()) + " patch outputs");
  }
  if (outputs.empty()) throw std::invalid_argument("stitch: empty grid");
  PatchAccumulator acc(outputs.front().dim(1), h, w);
  for (std::size_t i = 0; i < outputs.size(); ++i) acc.add(grid.coords[i], outputs[i]);
  return acc.result();
}

}  // namespace iternet
