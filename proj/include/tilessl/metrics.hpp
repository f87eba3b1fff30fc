#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include "tilessl/error.hpp"

namespace tilessl {

// Rank-based AUC (Mann-Whitney U with midranks): the probability that a random
// positive outscores a random negative, ties counting one half.
inline double auc(std::span<const double> scores, std::span<const int> labels) {
  require_shape(scores.size() == labels.size(), "auc: scores and labels differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum_pos = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]] != 0) {
        rank_sum_pos += midrank;
        ++n_pos;
      }
    i = j;
  }
  const std::size_t n_neg = scores.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) throw DataError("auc: both classes must be present");
  const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
  return (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn);
}

inline double accuracy(std::span<const int> predicted, std::span<const int> labels) {
  require_shape(predicted.size() == labels.size(), "accuracy: length mismatch");
  if (labels.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += predicted[i] == labels[i] ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

struct MetricReport {
  double auc = std::numeric_limits<double>::quiet_NaN();
  double accuracy = std::numeric_limits<double>::quiet_NaN();
  double loss = std::numeric_limits<double>::quiet_NaN();
  std::size_t n_train = 0;
  std::size_t n_val = 0;
  std::size_t n_test = 0;
  std::size_t best_epoch = 0;
};

// Binary: AUC of the class-1 probability. Multi-class: macro one-vs-rest AUC over
// classes that have both positives and negatives in the evaluated set.
inline double class_auc(const std::vector<std::vector<double>>& probs, std::span<const int> labels) {
  if (probs.empty()) return std::numeric_limits<double>::quiet_NaN();
  const std::size_t classes = probs.front().size();
  const auto one_vs_rest = [&](std::size_t c) -> double {
    std::vector<double> s(probs.size());
    std::vector<int> y(probs.size());
    std::size_t pos = 0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
      s[i] = probs[i][c];
      y[i] = labels[i] == static_cast<int>(c) ? 1 : 0;
      pos += static_cast<std::size_t>(y[i]);
    }
    if (pos == 0 || pos == y.size()) return std::numeric_limits<double>::quiet_NaN();
    return auc(s, y);
  };
  if (classes == 2) return one_vs_rest(1);
  double sum = 0.0;
  std::size_t used = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    const double a = one_vs_rest(c);
    if (!std::isnan(a)) {
      sum += a;
      ++used;
    }
  }
  return used ? sum / static_cast<double>(used) : std::numeric_limits<double>::quiet_NaN();
}

}  // namespace tilessl
