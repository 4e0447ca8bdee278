#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "moedst/data.hpp"
#include "moedst/model.hpp"
#include "moedst/rng.hpp"
#include "moedst/threading.hpp"

namespace moedst {

struct SemanticVector {
  std::string example_id;  // "<dialogue_id>#<turn_index>"
  std::vector<double> vec;
};

struct Prototype {
  int subset = 0;
  std::vector<double> centroid;
  int count = 0;
};

// Total partition of example ids into subsets 0..k-1.
struct SubsetAssignment {
  int k = 0;
  std::map<std::string, int> assignment;
};

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  double d = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    double diff = a[i] - b[i];
    d += diff * diff;
  }
  return d;
}

// Mean pooling over encoder positions, backbone only (no expert influences
// the semantic space).
inline std::vector<double> mean_pool_rows(const Tensor& states) {
  if (states.rank() != 2) throw std::invalid_argument("mean_pool_rows: rank-2 input expected");
  int m = states.rows(), n = states.cols();
  std::vector<double> out(static_cast<size_t>(n), 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[static_cast<size_t>(j)] += states.at(i, j);
  for (double& v : out) v /= m;
  return out;
}

inline std::vector<double> embed_context(const std::vector<int>& context_ids,
                                         const BackboneParams& backbone) {
  if (context_ids.empty()) throw std::invalid_argument("embed_context: empty context");
  return mean_pool_rows(encode_states(context_ids, backbone, nullptr));
}

// ---- k-means ----

struct KmeansOptions {
  int max_iters = 100;
  double tol = 1e-6;
};

struct KmeansResult {
  std::vector<int> labels;
  std::vector<std::vector<double>> centroids;
  std::vector<double> objective_history;  // after every Lloyd iteration
  int iterations = 0;
};

namespace detail {

inline int nearest_centroid(std::span<const double> x,
                            const std::vector<std::vector<double>>& centroids) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int c = 0; c < static_cast<int>(centroids.size()); ++c) {
    double d = squared_distance(x, centroids[static_cast<size_t>(c)]);
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

// Standard D^2 seeding. Falls back to the first unchosen point when every
// remaining distance is zero (duplicate-heavy inputs).
inline std::vector<std::vector<double>> kmeans_pp_init(
    const std::vector<std::vector<double>>& points, int k, Rng& rng) {
  size_t n = points.size();
  std::vector<std::vector<double>> centers;
  std::vector<bool> chosen(n, false);
  size_t first = rng.next_below(n);
  centers.push_back(points[first]);
  chosen[first] = true;
  std::vector<double> d2(n);
  while (static_cast<int>(centers.size()) < k) {
    double total = 0.0;
    for (size_t i = 0; i < n; ++i) {
      d2[i] = std::numeric_limits<double>::infinity();
      for (const auto& c : centers) d2[i] = std::min(d2[i], squared_distance(points[i], c));
      total += d2[i];
    }
    size_t pick = n;
    if (total > 0.0) {
      double r = rng.uniform() * total;
      double acc = 0.0;
      for (size_t i = 0; i < n; ++i) {
        acc += d2[i];
        if (r < acc) {
          pick = i;
          break;
        }
      }
      if (pick == n) pick = n - 1;
      if (chosen[pick]) pick = n;  // degenerate draw, fall through
    }
    if (pick == n) {
      for (size_t i = 0; i < n; ++i)
        if (!chosen[i]) {
          pick = i;
          break;
        }
      if (pick == n) pick = rng.next_below(n);
    }
    centers.push_back(points[pick]);
    chosen[pick] = true;
  }
  return centers;
}

}  // namespace detail

// Lloyd's algorithm with k-means++ seeding. The within-cluster squared
// distance objective is checked to be non-increasing after every iteration;
// empty clusters are reseeded with the point farthest from its centroid.
inline KmeansResult kmeans_cluster(const std::vector<std::vector<double>>& points, int k,
                                   uint64_t seed, const KmeansOptions& opt = {}) {
  size_t n = points.size();
  if (k < 1) throw std::invalid_argument("kmeans: k must be at least 1");
  if (static_cast<size_t>(k) > n)
    throw std::invalid_argument("kmeans: k exceeds the number of points");
  for (const auto& p : points)
    if (p.size() != points[0].size()) throw std::invalid_argument("kmeans: dimension mismatch");

  Rng rng(seed);
  KmeansResult res;
  res.centroids = detail::kmeans_pp_init(points, k, rng);
  res.labels.assign(n, 0);

  double prev_objective = std::numeric_limits<double>::infinity();
  for (int iter = 0; iter < opt.max_iters; ++iter) {
    // assignment step
    for (size_t i = 0; i < n; ++i) res.labels[i] = detail::nearest_centroid(points[i], res.centroids);

    // empty-cluster repair: hand the farthest point its own cluster
    for (int c = 0; c < k; ++c) {
      if (std::count(res.labels.begin(), res.labels.end(), c) > 0) continue;
      size_t farthest = 0;
      double worst = -1.0;
      for (size_t i = 0; i < n; ++i) {
        double d = squared_distance(points[i],
                                    res.centroids[static_cast<size_t>(res.labels[i])]);
        bool lonely = std::count(res.labels.begin(), res.labels.end(), res.labels[i]) == 1;
        if (!lonely && d > worst) {
          worst = d;
          farthest = i;
        }
      }
      res.centroids[static_cast<size_t>(c)] = points[farthest];
      res.labels[farthest] = c;
    }

    // update step
    size_t dim = points[0].size();
    std::vector<std::vector<double>> fresh(static_cast<size_t>(k),
                                           std::vector<double>(dim, 0.0));
    std::vector<int> counts(static_cast<size_t>(k), 0);
    for (size_t i = 0; i < n; ++i) {
      auto& c = fresh[static_cast<size_t>(res.labels[i])];
      for (size_t j = 0; j < dim; ++j) c[j] += points[i][j];
      counts[static_cast<size_t>(res.labels[i])]++;
    }
    double shift = 0.0;
    for (int c = 0; c < k; ++c) {
      for (size_t j = 0; j < dim; ++j) fresh[static_cast<size_t>(c)][j] /= counts[static_cast<size_t>(c)];
      shift = std::max(shift, std::sqrt(squared_distance(fresh[static_cast<size_t>(c)],
                                                         res.centroids[static_cast<size_t>(c)])));
      res.centroids[static_cast<size_t>(c)] = std::move(fresh[static_cast<size_t>(c)]);
    }

    double objective = 0.0;
    for (size_t i = 0; i < n; ++i)
      objective += squared_distance(points[i], res.centroids[static_cast<size_t>(res.labels[i])]);
    if (objective > prev_objective + 1e-9)
      throw std::logic_error("kmeans: objective increased, which Lloyd's algorithm forbids");
    res.objective_history.push_back(objective);
    res.iterations = iter + 1;
    prev_objective = objective;
    if (shift < opt.tol) break;
  }
  // final assignment consistent with the last centroid update
  for (size_t i = 0; i < n; ++i) res.labels[i] = detail::nearest_centroid(points[i], res.centroids);
  return res;
}

// ---- prototypes and partitions ----

inline std::vector<Prototype> compute_prototypes(const std::vector<SemanticVector>& vectors,
                                                 const SubsetAssignment& assignment) {
  if (assignment.k < 1) throw std::invalid_argument("prototypes: empty assignment");
  std::vector<Prototype> protos(static_cast<size_t>(assignment.k));
  for (int k = 0; k < assignment.k; ++k) protos[static_cast<size_t>(k)].subset = k;
  size_t dim = vectors.empty() ? 0 : vectors[0].vec.size();
  for (auto& p : protos) p.centroid.assign(dim, 0.0);
  for (const auto& v : vectors) {
    auto it = assignment.assignment.find(v.example_id);
    if (it == assignment.assignment.end())
      throw std::invalid_argument("prototypes: vector " + v.example_id + " not assigned");
    Prototype& p = protos[static_cast<size_t>(it->second)];
    for (size_t j = 0; j < dim; ++j) p.centroid[j] += v.vec[j];
    p.count++;
  }
  for (auto& p : protos) {
    if (p.count == 0)
      throw std::runtime_error("prototypes: subset " + std::to_string(p.subset) + " is empty");
    for (double& c : p.centroid) c /= p.count;
  }
  return protos;
}

// Semantic division: cluster the per-turn context embeddings.
inline SubsetAssignment cluster_partition(const std::vector<SemanticVector>& vectors, int k,
                                          uint64_t seed, const KmeansOptions& opt = {},
                                          KmeansResult* details = nullptr) {
  std::vector<std::vector<double>> points;
  points.reserve(vectors.size());
  for (const auto& v : vectors) points.push_back(v.vec);
  KmeansResult res = kmeans_cluster(points, k, seed, opt);
  SubsetAssignment out;
  out.k = k;
  for (size_t i = 0; i < vectors.size(); ++i) out.assignment[vectors[i].example_id] = res.labels[i];
  if (details) *details = std::move(res);
  return out;
}

// Explicit division by domain label: one subset per seen primary domain,
// ordered by sorted domain name; multi-domain dialogues follow their
// first-listed domain.
inline SubsetAssignment domain_partition(const std::vector<const Dialogue*>& dialogues,
                                         std::vector<std::string>* subset_domains = nullptr) {
  std::set<std::string> primaries;
  for (const Dialogue* d : dialogues) {
    if (d->domains.empty())
      throw std::invalid_argument("domain_partition: dialogue " + d->dialogue_id +
                                  " lists no domains");
    primaries.insert(d->domains.front());
  }
  std::vector<std::string> order(primaries.begin(), primaries.end());
  SubsetAssignment out;
  out.k = static_cast<int>(order.size());
  for (const Dialogue* d : dialogues) {
    int k = static_cast<int>(
        std::find(order.begin(), order.end(), d->domains.front()) - order.begin());
    for (int t = 0; t < static_cast<int>(d->turns.size()); ++t)
      out.assignment[example_id(d->dialogue_id, t)] = k;
  }
  if (subset_domains) *subset_domains = std::move(order);
  return out;
}

// Embeds every (dialogue, turn) context of the given dialogues, in parallel.
inline std::vector<SemanticVector> embed_dialogues(const std::vector<const Dialogue*>& dialogues,
                                                   const BackboneParams& backbone,
                                                   const TokenVocab& vocab, int threads = 1) {
  struct Item {
    const Dialogue* d;
    int t;
  };
  std::vector<Item> items;
  for (const Dialogue* d : dialogues)
    for (int t = 0; t < static_cast<int>(d->turns.size()); ++t) items.push_back({d, t});
  std::vector<SemanticVector> out(items.size());
  parallel_for(static_cast<int>(items.size()), threads, [&](int i) {
    const Item& it = items[static_cast<size_t>(i)];
    std::vector<int> ids = vocab.encode(serialize_context(*it.d, it.t));
    out[static_cast<size_t>(i)] = {example_id(it.d->dialogue_id, it.t),
                                   embed_context(ids, backbone)};
  });
  return out;
}

// ---- division artifact ----

struct Division {
  std::string mode;  // "cluster" or "domain"
  SubsetAssignment assignment;
  std::vector<Prototype> prototypes;
  uint64_t seed = 0;
  double objective = 0.0;
};

inline void save_division(const Division& div, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("division: cannot write " + path);
  json meta{{"type", "meta"},
            {"k", div.assignment.k},
            {"mode", div.mode},
            {"seed", div.seed},
            {"objective", div.objective}};
  f << meta.dump() << "\n";
  for (const auto& p : div.prototypes) {
    json j{{"type", "prototype"}, {"subset", p.subset}, {"count", p.count},
           {"centroid", p.centroid}};
    f << j.dump() << "\n";
  }
  for (const auto& [id, k] : div.assignment.assignment) {
    json j{{"type", "assignment"}, {"example_id", id}, {"subset", k}};
    f << j.dump() << "\n";
  }
}

inline Division load_division(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("division: cannot read " + path);
  Division div;
  std::string line;
  int line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw std::runtime_error("division: line " + std::to_string(line_no) + ": " + e.what());
    }
    std::string type = j.at("type").get<std::string>();
    if (type == "meta") {
      div.assignment.k = j.at("k").get<int>();
      div.mode = j.at("mode").get<std::string>();
      div.seed = j.at("seed").get<uint64_t>();
      div.objective = j.at("objective").get<double>();
    } else if (type == "prototype") {
      Prototype p;
      p.subset = j.at("subset").get<int>();
      p.count = j.at("count").get<int>();
      p.centroid = j.at("centroid").get<std::vector<double>>();
      div.prototypes.push_back(std::move(p));
    } else if (type == "assignment") {
      div.assignment.assignment[j.at("example_id").get<std::string>()] = j.at("subset").get<int>();
    } else {
      throw std::runtime_error("division: line " + std::to_string(line_no) +
                               ": unknown record type " + type);
    }
  }
  if (div.assignment.k <= 0) throw std::runtime_error("division: missing meta record in " + path);
  return div;
}

}  // namespace moedst
