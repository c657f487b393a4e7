#pragma once

// Procedural retina-like images for desk-scale experiments: smooth branching
// dark curves inside a circular field of view, uneven illumination, a bright
// disc where the main vessels start, and sensor noise.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "iternet/data.hpp"
#include "iternet/image_io.hpp"

namespace iternet {

struct SynthConfig {
  int min_curves = 5;
  int max_curves = 15;
  double min_width = 1.0;  // pixels
  double max_width = 4.0;
  double fov_radius = 0.46;  // fraction of the shorter side
  double disc_radius = 0.07;
  double contrast_lo = 0.30;  // fractional darkening at the vessel core
  double contrast_hi = 0.55;
  double noise_sigma = 0.025;

  void validate() const {
    if (min_curves < 1 || max_curves < min_curves) throw std::invalid_argument("synth: bad curve count range");
    if (!(min_width > 0.0 && max_width >= min_width)) throw std::invalid_argument("synth: bad width range");
    if (!(fov_radius > 0.0 && fov_radius <= 0.5)) throw std::invalid_argument("synth: fov_radius not in (0,0.5]");
    if (!(contrast_lo >= 0.0 && contrast_hi <= 1.0 && contrast_lo <= contrast_hi)) {
      throw std::invalid_argument("synth: bad contrast range");
    }
    if (!(noise_sigma >= 0.0)) throw std::invalid_argument("synth: negative noise");
  }
};

namespace detail {

struct Vec2 {
  double y = 0.0, x = 0.0;
};
inline Vec2 operator+(Vec2 a, Vec2 b) { return {a.y + b.y, a.x + b.x}; }
inline Vec2 operator-(Vec2 a, Vec2 b) { return {a.y - b.y, a.x - b.x}; }
inline Vec2 operator*(double s, Vec2 a) { return {s * a.y, s * a.x}; }
inline double norm(Vec2 a) { return std::hypot(a.y, a.x); }

struct Curve {
  std::array<Vec2, 4> p;  // cubic Bezier control points
  double width = 1.0;     // at t = 0; tapers to 70% at t = 1

  Vec2 at(double t) const {
    const double u = 1.0 - t;
    return (u * u * u) * p[0] + (3 * u * u * t) * p[1] + (3 * u * t * t) * p[2] + (t * t * t) * p[3];
  }
  Vec2 tangent(double t) const {
    const double u = 1.0 - t;
    return (3 * u * u) * (p[1] - p[0]) + (6 * u * t) * (p[2] - p[1]) + (3 * t * t) * (p[3] - p[2]);
  }
  double width_at(double t) const { return std::max(1.0, width * (1.0 - 0.3 * t)); }
};

/// Distance from `from` along unit `dir` to the circle (centre, radius).
inline double ray_to_circle(Vec2 from, Vec2 dir, Vec2 centre, double radius) {
  const Vec2 o = from - centre;
  const double b = o.y * dir.y + o.x * dir.x;
  const double c = o.y * o.y + o.x * o.x - radius * radius;
  return -b + std::sqrt(std::max(0.0, b * b - c));
}

inline Curve make_curve(Vec2 start, double heading, double length, double width, std::mt19937_64& rng) {
  const Vec2 dir{std::sin(heading), std::cos(heading)};
  const Vec2 perp{dir.x, -dir.y};
  const Vec2 end = start + length * dir;
  Curve c;
  c.p[0] = start;
  c.p[1] = start + (length / 3.0) * dir + (uniform(rng, -0.3, 0.3) * length) * perp;
  c.p[2] = start + (2.0 * length / 3.0) * dir + (uniform(rng, -0.3, 0.3) * length) * perp;
  c.p[3] = end;
  c.width = width;
  return c;
}

/// Coverage in [0,1]: 1 inside radius w/2, linear falloff over one pixel.
/// Gold is exactly coverage >= 0.5, i.e. distance <= w/2. Shading reaches a
/// quarter pixel further so border pixels stay visibly dark.
inline void draw_curve(const Curve& c, double contrast, std::size_t h, std::size_t w, std::vector<float>& cover,
                       std::vector<float>& dark) {
  double len = 0.0;
  Vec2 prev = c.at(0.0);
  for (int i = 1; i <= 64; ++i) {
    const Vec2 q = c.at(i / 64.0);
    len += norm(q - prev);
    prev = q;
  }
  const int steps = std::max(2, static_cast<int>(std::ceil(len / 0.25)));
  for (int i = 0; i <= steps; ++i) {
    const double t = static_cast<double>(i) / steps;
    const Vec2 q = c.at(t);
    const double r = c.width_at(t) / 2.0;
    const long y0 = static_cast<long>(std::floor(q.y - r - 1)), y1 = static_cast<long>(std::ceil(q.y + r + 1));
    const long x0 = static_cast<long>(std::floor(q.x - r - 1)), x1 = static_cast<long>(std::ceil(q.x + r + 1));
    for (long y = std::max(0L, y0); y <= std::min<long>(static_cast<long>(h) - 1, y1); ++y)
      for (long x = std::max(0L, x0); x <= std::min<long>(static_cast<long>(w) - 1, x1); ++x) {
        const double d = std::hypot(y - q.y, x - q.x);
        const float cov = static_cast<float>(std::clamp(r + 0.5 - d, 0.0, 1.0));
        const float shade = static_cast<float>(std::clamp(r + 0.75 - d, 0.0, 1.0));
        const std::size_t idx = static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x);
        cover[idx] = std::max(cover[idx], cov);
        dark[idx] = std::max(dark[idx], static_cast<float>(contrast) * shade);
      }
  }
}

}  // namespace detail

/// Deterministic synthetic sample for `seed`. Requires h, w >= 64.
inline Sample synth_vessel_sample(std::uint64_t seed, std::size_t h, std::size_t w, const SynthConfig& cfg = {}) {
  using detail::Vec2;
  cfg.validate();
  if (h < 64 || w < 64) throw std::invalid_argument("synth_vessel_sample: image must be at least 64x64");
  std::mt19937_64 rng(seed);
  const double side = static_cast<double>(std::min(h, w));
  const Vec2 centre{(h - 1) / 2.0, (w - 1) / 2.0};
  const double radius = cfg.fov_radius * side;
  const double pi = std::numbers::pi;

  const double disc_angle = uniform(rng, 0.0, 2 * pi);
  const Vec2 disc = centre + (0.45 * radius) * Vec2{std::sin(disc_angle), std::cos(disc_angle)};
  const double disc_r = cfg.disc_radius * side;

  const int total = std::uniform_int_distribution<int>(cfg.min_curves, cfg.max_curves)(rng);
  const int mains = std::min(total, std::uniform_int_distribution<int>(2, 4)(rng));
  std::vector<detail::Curve> curves;
  for (int i = 0; i < mains; ++i) {
    // spread main vessels around the disc, biased towards the fov centre
    const double towards = std::atan2(centre.y - disc.y, centre.x - disc.x);
    const double heading = towards + uniform(rng, -0.5, 0.5) * pi + (i - (mains - 1) / 2.0) * 0.6;
    const Vec2 dir{std::sin(heading), std::cos(heading)};
    const double reach = detail::ray_to_circle(disc, dir, centre, radius);
    const double width = uniform(rng, 0.7, 1.0) * cfg.max_width;
    curves.push_back(detail::make_curve(disc, heading, uniform(rng, 0.6, 0.95) * reach, width, rng));
  }
  while (static_cast<int>(curves.size()) < total) {
    const auto& parent = curves[std::uniform_int_distribution<std::size_t>(0, curves.size() - 1)(rng)];
    const double t = uniform(rng, 0.2, 0.8);
    const Vec2 start = parent.at(t);
    const Vec2 tan = parent.tangent(t);
    const double side_sign = uniform(rng, 0.0, 1.0) < 0.5 ? -1.0 : 1.0;
    const double heading = std::atan2(tan.y, tan.x) + side_sign * uniform(rng, 0.5, 1.2);
    const Vec2 dir{std::sin(heading), std::cos(heading)};
    const double reach = detail::ray_to_circle(start, dir, centre, radius);
    const double length = std::min(uniform(rng, 0.35, 0.7) * radius, 0.95 * reach);
    const double width = std::clamp(parent.width_at(t) * uniform(rng, 0.6, 0.9), cfg.min_width, cfg.max_width);
    auto child = detail::make_curve(start, heading, std::max(length, 2.0), width, rng);
    curves.push_back(child);
  }

  std::vector<float> cover(h * w, 0.0f), dark(h * w, 0.0f);
  for (const auto& c : curves) {
    const double thin = (c.width - cfg.min_width) / std::max(1e-9, cfg.max_width - cfg.min_width);
    const double contrast = uniform(rng, cfg.contrast_lo, cfg.contrast_hi) * (0.7 + 0.3 * thin);
    detail::draw_curve(c, contrast, h, w, cover, dark);
  }

  // smooth illumination: tilted plane plus radial fall-off
  const double tilt = uniform(rng, 0.0, 2 * pi), tilt_amp = uniform(rng, 0.05, 0.15);
  const std::array<double, 3> tint{uniform(rng, 0.75, 0.9), uniform(rng, 0.4, 0.5), uniform(rng, 0.15, 0.25)};
  std::normal_distribution<double> noise(0.0, cfg.noise_sigma);

  Sample s{Tensor(Shape{1, 3, h, w}), Tensor(Shape{1, 1, h, w}), Tensor(Shape{1, 1, h, w})};
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const Vec2 p{static_cast<double>(y), static_cast<double>(x)};
      const Vec2 o = p - centre;
      const double rr = detail::norm(o) / radius;
      const bool inside = rr <= 1.0;
      const std::size_t idx = y * w + x;
      s.fov[idx] = inside ? 1.0f : 0.0f;
      s.gold[idx] = inside && cover[idx] >= 0.5f ? 1.0f : 0.0f;
      const double illum = 0.6 + tilt_amp * (o.y * std::sin(tilt) + o.x * std::cos(tilt)) / radius - 0.2 * rr * rr;
      const double blob = std::exp(-std::pow(detail::norm(p - disc) / disc_r, 2.0) / 2.0);
      for (std::size_t k = 0; k < 3; ++k) {
        double v;
        if (inside) {
          const double base = tint[k] * illum + (0.45 - 0.1 * k) * blob;
          v = base * (1.0 - dark[idx]) + noise(rng);
        } else {
          v = 0.01 + 0.3 * noise(rng);
        }
        s.image[k * h * w + idx] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  return s;
}

inline std::string corpus_stem(std::size_t index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04zu", index);
  return buf;
}

/// Writes img_####.png, gold_####.png, fov_####.png and manifest.csv.
inline void write_synth_corpus(const std::filesystem::path& dir, std::size_t count, std::uint64_t seed,
                               std::size_t h, std::size_t w, const SynthConfig& cfg = {}) {
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir / "manifest.csv", std::ios::trunc);
  if (!manifest) throw std::runtime_error("cannot write " + (dir / "manifest.csv").string());
  manifest << "stem,seed,height,width\n";
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint64_t s = derive_seed(seed, i);
    const Sample sample = synth_vessel_sample(s, h, w, cfg);
    const std::string stem = corpus_stem(i);
    save_image(sample.image, dir / ("img_" + stem + ".png"));
    save_image(sample.gold, dir / ("gold_" + stem + ".png"));
    save_image(sample.fov, dir / ("fov_" + stem + ".png"));
    manifest << stem << ',' << s << ',' << h << ',' << w << '\n';
  }
}

}  // namespace iternet
