// Independent reference implementations used to cross-check the library.
// Everything here is written with plain loops against the mathematical
// definitions and deliberately shares no code with the implementation paths
// it verifies.
#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <stdexcept>
#include <vector>

namespace oracles {

// -log mean likelihood by direct summation, one row at a time.
inline double scalar_cross_entropy(const std::vector<std::vector<double>>& logits,
                                   const std::vector<int>& targets) {
  double total = 0.0;
  for (size_t i = 0; i < logits.size(); ++i) {
    double mx = logits[i][0];
    for (double v : logits[i]) mx = std::max(mx, v);
    double z = 0.0;
    for (double v : logits[i]) z += std::exp(v - mx);
    double log_p = logits[i][static_cast<size_t>(targets[i])] - mx - std::log(z);
    total -= log_p;
  }
  return total / static_cast<double>(logits.size());
}

// Central finite difference of a scalar function of one coordinate.
inline double central_difference(const std::function<double()>& f, double* coord, double h) {
  double orig = *coord;
  *coord = orig + h;
  double up = f();
  *coord = orig - h;
  double down = f();
  *coord = orig;
  return (up - down) / (2.0 * h);
}

// Exhaustive search over all assignments of n points to exactly k non-empty
// groups; returns the minimal within-cluster sum of squared distances and
// the labels achieving it. Only usable for tiny n.
struct BestPartition {
  double objective = std::numeric_limits<double>::infinity();
  std::vector<int> labels;
};

inline BestPartition best_partition_exhaustive(const std::vector<std::vector<double>>& points,
                                               int k) {
  size_t n = points.size();
  size_t dim = points[0].size();
  std::vector<int> labels(n, 0);
  BestPartition best;
  int64_t total = 1;
  for (size_t i = 0; i < n; ++i) total *= k;
  for (int64_t code = 0; code < total; ++code) {
    int64_t c = code;
    std::vector<int> counts(static_cast<size_t>(k), 0);
    for (size_t i = 0; i < n; ++i) {
      labels[i] = static_cast<int>(c % k);
      counts[static_cast<size_t>(labels[i])]++;
      c /= k;
    }
    bool all_nonempty = true;
    for (int cnt : counts) all_nonempty = all_nonempty && cnt > 0;
    if (!all_nonempty) continue;
    std::vector<std::vector<double>> means(static_cast<size_t>(k),
                                           std::vector<double>(dim, 0.0));
    for (size_t i = 0; i < n; ++i)
      for (size_t j = 0; j < dim; ++j) means[static_cast<size_t>(labels[i])][j] += points[i][j];
    for (int g = 0; g < k; ++g)
      for (size_t j = 0; j < dim; ++j) means[static_cast<size_t>(g)][j] /= counts[static_cast<size_t>(g)];
    double obj = 0.0;
    for (size_t i = 0; i < n; ++i)
      for (size_t j = 0; j < dim; ++j) {
        double d = points[i][j] - means[static_cast<size_t>(labels[i])][j];
        obj += d * d;
      }
    if (obj < best.objective) {
      best.objective = obj;
      best.labels = labels;
    }
  }
  return best;
}

// Partition equality up to relabeling: same groups as sets of indices.
inline bool same_partition(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.size() != b.size()) return false;
  std::map<int, int> fwd, bwd;
  for (size_t i = 0; i < a.size(); ++i) {
    auto [fit, fnew] = fwd.try_emplace(a[i], b[i]);
    if (!fnew && fit->second != b[i]) return false;
    auto [bit, bnew] = bwd.try_emplace(b[i], a[i]);
    if (!bnew && bit->second != a[i]) return false;
  }
  return true;
}

// Greedy rollout over scripted per-step log-probability tables: at step m the
// expert k contributes table[k][m]; the combined score is recomputed by
// brute force over every vocabulary entry.
inline std::vector<int> scripted_ensemble_rollout(
    const std::vector<std::vector<std::vector<double>>>& tables,
    const std::vector<double>& delta, int eos_token, int max_tokens) {
  std::vector<int> out;
  size_t vocab = tables[0][0].size();
  for (int m = 0; m < max_tokens; ++m) {
    int best = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    for (size_t w = 0; w < vocab; ++w) {
      double score = 0.0;
      for (size_t k = 0; k < tables.size(); ++k)
        score += delta[k] * tables[k][static_cast<size_t>(m)][w];
      if (score > best_score) {
        best_score = score;
        best = static_cast<int>(w);
      }
    }
    if (best == eos_token) break;
    out.push_back(best);
  }
  return out;
}

}  // namespace oracles
