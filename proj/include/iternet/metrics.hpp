#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "iternet/data.hpp"
#include "iternet/tensor.hpp"

namespace iternet {

/// 1 where value > theta. Works on either the [0,1] or the 0..255 scale.
inline Tensor binarize(const Tensor& prob, float theta) {
  Tensor out(prob.shape());
  for (std::size_t i = 0; i < prob.size(); ++i) out[i] = prob[i] > theta ? 1.0f : 0.0f;
  return out;
}

namespace detail {

inline void require_plane(const Tensor& t, const char* what) {
  if (t.rank() != 4 || t.dim(0) != 1 || t.dim(1) != 1) {
    throw std::invalid_argument(std::string(what) + ": expected a [1,1,H,W] map, got " + shape_string(t.shape()));
  }
}

inline void require_aligned(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(what) + ": shapes " + shape_string(a.shape()) + " and " +
                                shape_string(b.shape()) + " differ");
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Confusion statistics

struct ConfusionCounts {
  std::uint64_t tp = 0, fp = 0, tn = 0, fn = 0;

  std::uint64_t total() const { return tp + fp + tn + fn; }
  // Ratios with an empty denominator are reported as 0.
  double sensitivity() const { return tp + fn ? double(tp) / double(tp + fn) : 0.0; }
  double specificity() const { return tn + fp ? double(tn) / double(tn + fp) : 0.0; }
  double accuracy() const { return total() ? double(tp + tn) / double(total()) : 0.0; }
  double f1() const { return 2 * tp + fp + fn ? 2.0 * double(tp) / double(2 * tp + fp + fn) : 0.0; }
};

/// Counts over mask == 1 pixels.
inline ConfusionCounts confusion(const Tensor& pred, const Tensor& gold, const Tensor& mask) {
  detail::require_aligned(pred, gold, "confusion");
  detail::require_aligned(pred, mask, "confusion");
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (mask[i] < 0.5f) continue;
    const bool p = pred[i] >= 0.5f, g = gold[i] >= 0.5f;
    if (p && g) ++c.tp;
    else if (p) ++c.fp;
    else if (g) ++c.fn;
    else ++c.tn;
  }
  if (c.total() == 0) throw std::invalid_argument("confusion: mask selects no pixels");
  return c;
}

// ---------------------------------------------------------------------------
// ROC / AUC

struct RocPoint {
  double threshold = 0.0, fpr = 0.0, tpr = 0.0;
};

struct RocResult {
  double auc = 0.0;
  std::vector<RocPoint> curve;  // 256 thresholds k/255, positive when prob >= threshold
};

/// Mann-Whitney AUC over mask == 1 pixels; tied pairs count one half.
inline RocResult roc_auc(const Tensor& prob, const Tensor& gold, const Tensor& mask) {
  detail::require_aligned(prob, gold, "roc_auc");
  detail::require_aligned(prob, mask, "roc_auc");
  std::vector<std::pair<float, bool>> s;
  s.reserve(prob.size());
  for (std::size_t i = 0; i < prob.size(); ++i)
    if (mask[i] >= 0.5f) s.emplace_back(prob[i], gold[i] >= 0.5f);
  const auto pos = static_cast<double>(std::count_if(s.begin(), s.end(), [](const auto& e) { return e.second; }));
  const double neg = static_cast<double>(s.size()) - pos;
  if (pos == 0 || neg == 0) throw std::invalid_argument("roc_auc: gold must contain both classes inside the mask");

  std::sort(s.begin(), s.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < s.size();) {
    std::size_t j = i;
    double tied_pos = 0;
    while (j < s.size() && s[j].first == s[i].first) tied_pos += s[j++].second;
    const double mid_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    rank_sum += tied_pos * mid_rank;
    i = j;
  }
  RocResult r;
  r.auc = (rank_sum - pos * (pos + 1) / 2.0) / (pos * neg);

  // s is ascending, so the count at or above a threshold is a suffix length.
  std::vector<double> pos_suffix(s.size() + 1, 0.0);
  for (std::size_t i = s.size(); i-- > 0;) pos_suffix[i] = pos_suffix[i + 1] + s[i].second;
  r.curve.reserve(256);
  for (int k = 0; k < 256; ++k) {
    const float th = static_cast<float>(k) / 255.0f;
    const auto first = static_cast<std::size_t>(
        std::lower_bound(s.begin(), s.end(), th, [](const auto& e, float t) { return e.first < t; }) - s.begin());
    const double tp = pos_suffix[first];
    const double fp = static_cast<double>(s.size() - first) - tp;
    r.curve.push_back({th, fp / neg, tp / pos});
  }
  return r;
}

// ---------------------------------------------------------------------------
// Skeleton and components

/// Zhang-Suen thinning. Each sub-iteration collects candidates in parallel
/// and then removes them in raster order, re-testing each against the
/// current image; this keeps the 8-connected component count (plain
/// Zhang-Suen erases 2x2 blocks). Iterates to a fixpoint.
inline Tensor skeletonize(const Tensor& binary) {
  detail::require_plane(binary, "skeletonize");
  const long h = static_cast<long>(binary.dim(2)), w = static_cast<long>(binary.dim(3));
  std::vector<std::uint8_t> img(binary.size());
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = binary[i] >= 0.5f;
  auto at = [&](long y, long x) -> int {
    return (y < 0 || x < 0 || y >= h || x >= w) ? 0 : img[static_cast<std::size_t>(y * w + x)];
  };
  auto removable = [&](long y, long x, int pass) {
    // p[0..7] = N, NE, E, SE, S, SW, W, NW
    const int p[8] = {at(y - 1, x), at(y - 1, x + 1), at(y, x + 1), at(y + 1, x + 1),
                      at(y + 1, x), at(y + 1, x - 1), at(y, x - 1), at(y - 1, x - 1)};
    const int b = p[0] + p[1] + p[2] + p[3] + p[4] + p[5] + p[6] + p[7];
    if (b < 2 || b > 6) return false;
    int a = 0;
    for (int k = 0; k < 8; ++k) a += (!p[k] && p[(k + 1) % 8]);
    if (a != 1) return false;
    if (pass == 0) return !(p[0] && p[2] && p[4]) && !(p[2] && p[4] && p[6]);
    return !(p[0] && p[2] && p[6]) && !(p[0] && p[4] && p[6]);
  };
  std::vector<std::size_t> candidates;
  for (bool changed = true; changed;) {
    changed = false;
    for (int pass = 0; pass < 2; ++pass) {
      candidates.clear();
      for (long y = 0; y < h; ++y)
        for (long x = 0; x < w; ++x)
          if (img[static_cast<std::size_t>(y * w + x)] && removable(y, x, pass))
            candidates.push_back(static_cast<std::size_t>(y * w + x));
      for (std::size_t idx : candidates) {
        const long y = static_cast<long>(idx) / w, x = static_cast<long>(idx) % w;
        if (removable(y, x, pass)) {
          img[idx] = 0;
          changed = true;
        }
      }
    }
  }
  Tensor out(binary.shape());
  for (std::size_t i = 0; i < img.size(); ++i) out[i] = img[i];
  return out;
}

/// Number of 8-connected foreground components (union-find).
inline std::size_t count_segments(const Tensor& binary) {
  detail::require_plane(binary, "count_segments");
  const std::size_t h = binary.dim(2), w = binary.dim(3);
  std::vector<std::uint32_t> parent(h * w);
  std::iota(parent.begin(), parent.end(), 0u);
  auto find = [&](std::uint32_t v) {
    while (parent[v] != v) v = parent[v] = parent[parent[v]];
    return v;
  };
  std::size_t components = 0;
  auto unite = [&](std::uint32_t a, std::uint32_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    parent[std::max(a, b)] = std::min(a, b);
    --components;
  };
  auto on = [&](std::size_t y, std::size_t x) { return binary[y * w + x] >= 0.5f; };
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      if (!on(y, x)) continue;
      ++components;
      const auto id = static_cast<std::uint32_t>(y * w + x);
      if (x > 0 && on(y, x - 1)) unite(id, id - 1);
      if (y > 0) {
        const auto up = static_cast<std::uint32_t>((y - 1) * w + x);
        if (on(y - 1, x)) unite(id, up);
        if (x > 0 && on(y - 1, x - 1)) unite(id, up - 1);
        if (x + 1 < w && on(y - 1, x + 1)) unite(id, up + 1);
      }
    }
  return components;
}

inline std::size_t foreground_count(const Tensor& binary) {
  return static_cast<std::size_t>(
      std::count_if(binary.values().begin(), binary.values().end(), [](float v) { return v >= 0.5f; }));
}

// ---------------------------------------------------------------------------
// Connectivity

inline constexpr double default_alpha = 0.05;

/// Gold-side quantities of the connectivity score, computed once per image.
struct ConnectivityReference {
  std::size_t skeleton_length = 0;  // L
  std::size_t gold_segments = 0;    // S_G
  double s_max = 0.0;               // alpha * L

  static ConnectivityReference of(const Tensor& gold, double alpha) {
    if (!(alpha > 0.0)) throw std::invalid_argument("connectivity: alpha must be positive");
    ConnectivityReference r;
    r.skeleton_length = foreground_count(skeletonize(gold));
    if (r.skeleton_length == 0) throw std::invalid_argument("connectivity: gold is empty (skeleton length 0)");
    r.gold_segments = count_segments(gold);
    r.s_max = alpha * static_cast<double>(r.skeleton_length);
    return r;
  }

  double score(std::size_t pred_segments) const {
    const double dev = std::abs(static_cast<double>(pred_segments) - static_cast<double>(gold_segments));
    return dev <= s_max ? 1.0 - dev / s_max : 0.0;
  }
};

/// C(theta) with pred and theta on the same scale.
inline double connectivity_at(const Tensor& pred, const Tensor& gold, double theta, double alpha = default_alpha) {
  detail::require_aligned(pred, gold, "connectivity_at");
  const auto ref = ConnectivityReference::of(gold, alpha);
  return ref.score(count_segments(binarize(pred, static_cast<float>(theta))));
}

struct ConnectivityCurve {
  double alpha = default_alpha;
  std::vector<double> thetas;
  std::vector<double> values;
  double area = 0.0;  // mean of values
};

/// Maps [0,1] probabilities to 0..255, snapping values within 1e-3 of an
/// integer level so 8-bit round trips compare exactly against integer thetas.
inline Tensor to_255_scale(const Tensor& prob) {
  Tensor out(prob.shape());
  for (std::size_t i = 0; i < prob.size(); ++i) {
    const double v = static_cast<double>(prob[i]) * 255.0;
    const double r = std::round(v);
    out[i] = static_cast<float>(std::abs(v - r) < 1e-3 ? r : v);
  }
  return out;
}

inline std::vector<double> default_theta_grid() {
  std::vector<double> g(256);
  std::iota(g.begin(), g.end(), 0.0);
  return g;
}

/// C over a theta grid (0..255 scale by default). `pred_255` is already on
/// the 0..255 scale; see to_255_scale.
inline ConnectivityCurve connectivity_curve(const Tensor& pred_255, const Tensor& gold, double alpha = default_alpha,
                                            std::vector<double> thetas = default_theta_grid()) {
  detail::require_aligned(pred_255, gold, "connectivity_curve");
  if (thetas.empty()) throw std::invalid_argument("connectivity_curve: empty theta grid");
  if (!std::is_sorted(thetas.begin(), thetas.end())) throw std::invalid_argument("connectivity_curve: thetas must ascend");
  const auto ref = ConnectivityReference::of(gold, alpha);
  ConnectivityCurve c;
  c.alpha = alpha;
  c.values.reserve(thetas.size());
  for (double t : thetas) c.values.push_back(ref.score(count_segments(binarize(pred_255, static_cast<float>(t)))));
  c.thetas = std::move(thetas);
  c.area = std::accumulate(c.values.begin(), c.values.end(), 0.0) / static_cast<double>(c.values.size());
  return c;
}

/// Area under C(theta) for a [0,1] probability map on the 256-level grid.
inline ConnectivityCurve connectivity_area(const Tensor& prob, const Tensor& gold, double alpha = default_alpha) {
  return connectivity_curve(to_255_scale(prob), gold, alpha);
}

// ---------------------------------------------------------------------------
// Per-image evaluation

struct EvalOptions {
  double threshold = 0.5;  // for the confusion-based metrics
  double alpha = default_alpha;
  bool with_mask = true;              // confusion and AUC restricted to the FoV
  bool mask_connectivity = false;     // connectivity on FoV-masked maps
  std::vector<double> thetas;         // empty: 0..255 step 1
};

struct ImageReport {
  std::string name;
  ConfusionCounts counts;
  double f1 = 0, sensitivity = 0, specificity = 0, accuracy = 0, auc = 0, connectivity = 0;
  std::vector<RocPoint> roc;
  ConnectivityCurve curve;
};

struct EvalReport {
  bool with_mask = true;
  std::vector<ImageReport> images;
  ImageReport mean;  // unweighted mean of the per-image metrics
};

inline ImageReport evaluate(const Tensor& prob, const Sample& sample, const EvalOptions& opt = {},
                            std::string name = {}) {
  detail::require_plane(prob, "evaluate");
  detail::require_aligned(prob, sample.gold, "evaluate");
  detail::require_aligned(prob, sample.fov, "evaluate");
  const Tensor everywhere(prob.shape(), 1.0f);
  const Tensor& mask = opt.with_mask ? sample.fov : everywhere;
  ImageReport r;
  r.name = std::move(name);
  r.counts = confusion(binarize(prob, static_cast<float>(opt.threshold)), sample.gold, mask);
  r.f1 = r.counts.f1();
  r.sensitivity = r.counts.sensitivity();
  r.specificity = r.counts.specificity();
  r.accuracy = r.counts.accuracy();
  auto roc = roc_auc(prob, sample.gold, mask);
  r.auc = roc.auc;
  r.roc = std::move(roc.curve);
  const std::vector<double> grid = opt.thetas.empty() ? default_theta_grid() : opt.thetas;
  if (opt.mask_connectivity) {
    Tensor p = prob, g = sample.gold;
    for (std::size_t i = 0; i < p.size(); ++i) {
      p[i] *= sample.fov[i];
      g[i] *= sample.fov[i];
    }
    r.curve = connectivity_curve(to_255_scale(p), g, opt.alpha, grid);
  } else {
    r.curve = connectivity_curve(to_255_scale(prob), sample.gold, opt.alpha, grid);
  }
  r.connectivity = r.curve.area;
  return r;
}

inline EvalReport aggregate(std::vector<ImageReport> images, bool with_mask) {
  if (images.empty()) throw std::invalid_argument("aggregate: no images");
  EvalReport rep;
  rep.with_mask = with_mask;
  ImageReport& m = rep.mean;
  m.name = "mean";
  for (const auto& r : images) {
    m.f1 += r.f1;
    m.sensitivity += r.sensitivity;
    m.specificity += r.specificity;
    m.accuracy += r.accuracy;
    m.auc += r.auc;
    m.connectivity += r.connectivity;
    m.counts.tp += r.counts.tp;
    m.counts.fp += r.counts.fp;
    m.counts.tn += r.counts.tn;
    m.counts.fn += r.counts.fn;
  }
  const double n = static_cast<double>(images.size());
  m.f1 /= n;
  m.sensitivity /= n;
  m.specificity /= n;
  m.accuracy /= n;
  m.auc /= n;
  m.connectivity /= n;
  rep.images = std::move(images);
  return rep;
}

// ---------------------------------------------------------------------------
// CSV export

namespace detail {

// shortest text that parses back to the same double
inline std::string csv_number(double v) {
  char buf[32];
  return std::string(buf, std::to_chars(buf, buf + sizeof buf, v).ptr);
}

}  // namespace detail

inline void write_report_csv(std::ostream& os, const EvalReport& rep) {
  using detail::csv_number;
  os << "image,f1,sensitivity,specificity,accuracy,auc,connectivity\n";
  auto row = [&](const ImageReport& r) {
    os << r.name << ',' << csv_number(r.f1) << ',' << csv_number(r.sensitivity) << ','
       << csv_number(r.specificity) << ',' << csv_number(r.accuracy) << ',' << csv_number(r.auc) << ','
       << csv_number(r.connectivity) << '\n';
  };
  for (const auto& r : rep.images) row(r);
  row(rep.mean);
}

inline void write_roc_csv(std::ostream& os, const std::vector<RocPoint>& curve) {
  os << "fpr,tpr\n";
  for (const auto& p : curve) os << detail::csv_number(p.fpr) << ',' << detail::csv_number(p.tpr) << '\n';
}

inline void write_connectivity_csv(std::ostream& os, const ConnectivityCurve& c) {
  os << "theta,connectivity\n";
  for (std::size_t i = 0; i < c.values.size(); ++i)
    os << detail::csv_number(c.thetas[i]) << ',' << detail::csv_number(c.values[i]) << '\n';
}

}  // namespace iternet
