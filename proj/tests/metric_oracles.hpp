#pragma once

// Brute-force references for the metrics: flood fill and pairwise/sweep AUC.

#include <cstddef>
#include <functional>
#include <set>
#include <vector>

#include "iternet/tensor.hpp"

namespace iternet::testing {

// Reference component count: recursive 8-neighbour flood fill.
inline std::size_t flood_fill_count(const Tensor& b) {
  const long h = static_cast<long>(b.dim(2)), w = static_cast<long>(b.dim(3));
  std::vector<int> seen(b.size(), 0);
  std::function<void(long, long)> fill = [&](long y, long x) {
    if (y < 0 || x < 0 || y >= h || x >= w) return;
    const auto i = static_cast<std::size_t>(y * w + x);
    if (seen[i] || b[i] < 0.5f) return;
    seen[i] = 1;
    for (long dy = -1; dy <= 1; ++dy)
      for (long dx = -1; dx <= 1; ++dx)
        if (dy || dx) fill(y + dy, x + dx);
  };
  std::size_t n = 0;
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x)
      if (b[static_cast<std::size_t>(y * w + x)] >= 0.5f && !seen[static_cast<std::size_t>(y * w + x)]) {
        ++n;
        fill(y, x);
      }
  return n;
}

// Reference AUC: count every (positive, negative) pair.
inline double pair_auc(const std::vector<float>& score, const std::vector<int>& label) {
  double wins = 0, pairs = 0;
  for (std::size_t i = 0; i < score.size(); ++i)
    for (std::size_t j = 0; j < score.size(); ++j)
      if (label[i] && !label[j]) {
        ++pairs;
        wins += score[i] > score[j] ? 1.0 : score[i] == score[j] ? 0.5 : 0.0;
      }
  return wins / pairs;
}

// Reference AUC: sweep every distinct score as a threshold, trapezoid rule.
inline double sweep_auc(const Tensor& prob, const Tensor& gold) {
  std::set<float, std::greater<>> levels(prob.values().begin(), prob.values().end());
  double pos = 0, neg = 0;
  for (float g : gold.values()) (g > 0.5f ? pos : neg) += 1;
  double area = 0, prev_fpr = 0, prev_tpr = 0;
  for (float t : levels) {
    double tp = 0, fp = 0;
    for (std::size_t i = 0; i < prob.size(); ++i)
      if (prob[i] >= t) (gold[i] > 0.5f ? tp : fp) += 1;
    const double fpr = fp / neg, tpr = tp / pos;
    area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2;
    prev_fpr = fpr;
    prev_tpr = tpr;
  }
  return area;
}

}  // namespace iternet::testing
