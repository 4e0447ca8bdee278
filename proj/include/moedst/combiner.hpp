#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "moedst/data.hpp"
#include "moedst/divider.hpp"
#include "moedst/metrics.hpp"
#include "moedst/model.hpp"

namespace moedst {

enum class WeightMode { inference, argmax, average };
enum class DistanceKind { neg_sq_euclidean, cosine };

inline std::string to_string(WeightMode m) {
  switch (m) {
    case WeightMode::inference: return "inference";
    case WeightMode::argmax: return "argmax";
    case WeightMode::average: return "average";
  }
  return "?";
}

inline std::string to_string(DistanceKind d) {
  return d == DistanceKind::neg_sq_euclidean ? "neg_sq_euclidean" : "cosine";
}

inline WeightMode weight_mode_from_string(const std::string& s) {
  if (s == "inference") return WeightMode::inference;
  if (s == "argmax") return WeightMode::argmax;
  if (s == "average") return WeightMode::average;
  throw std::invalid_argument("unknown weight mode " + s);
}

inline DistanceKind distance_from_string(const std::string& s) {
  if (s == "neg_sq_euclidean") return DistanceKind::neg_sq_euclidean;
  if (s == "cosine") return DistanceKind::cosine;
  throw std::invalid_argument("unknown distance function " + s);
}

// Simplex weights over the K experts for one unseen context.
struct RelationWeights {
  std::vector<double> delta;
  double tau = 0.0;
  DistanceKind distance = DistanceKind::neg_sq_euclidean;
};

// Larger means closer. The negative squared euclidean form makes the nearest
// prototype dominate as tau shrinks.
inline double prototype_affinity(std::span<const double> e, std::span<const double> mu,
                                 DistanceKind kind) {
  if (kind == DistanceKind::neg_sq_euclidean) return -squared_distance(e, mu);
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (size_t i = 0; i < e.size(); ++i) {
    dot += e[i] * mu[i];
    na += e[i] * e[i];
    nb += mu[i] * mu[i];
  }
  return dot / (std::sqrt(na) * std::sqrt(nb) + 1e-12);
}

// Temperature softmax over prototype affinities, then the weight-mode
// transform: inference keeps the softmax, argmax collapses to one-hot at the
// strongest weight (ties to the lowest subset), average ignores geometry.
inline RelationWeights relation_weights(std::span<const double> e_prime,
                                        const std::vector<Prototype>& prototypes, double tau,
                                        WeightMode mode = WeightMode::inference,
                                        DistanceKind distance = DistanceKind::neg_sq_euclidean) {
  if (tau <= 0.0) throw std::invalid_argument("relation_weights: tau must be positive");
  if (prototypes.empty()) throw std::invalid_argument("relation_weights: no prototypes");
  size_t k = prototypes.size();
  RelationWeights out;
  out.tau = tau;
  out.distance = distance;
  out.delta.resize(k);

  std::vector<double> scores(k);
  for (size_t i = 0; i < k; ++i) {
    if (prototypes[i].centroid.size() != e_prime.size())
      throw std::invalid_argument("relation_weights: prototype dimension mismatch");
    scores[i] = prototype_affinity(e_prime, prototypes[i].centroid, distance) / tau;
  }
  double mx = *std::max_element(scores.begin(), scores.end());
  double sum = 0.0;
  for (size_t i = 0; i < k; ++i) {
    out.delta[i] = std::exp(scores[i] - mx);
    sum += out.delta[i];
  }
  for (double& d : out.delta) d /= sum;

  switch (mode) {
    case WeightMode::inference:
      break;
    case WeightMode::argmax: {
      size_t best = 0;
      for (size_t i = 1; i < k; ++i)
        if (out.delta[i] > out.delta[best]) best = i;
      std::fill(out.delta.begin(), out.delta.end(), 0.0);
      out.delta[best] = 1.0;
      break;
    }
    case WeightMode::average:
      std::fill(out.delta.begin(), out.delta.end(), 1.0 / static_cast<double>(k));
      break;
  }
  return out;
}

// Weighted sum of adapters, tensor by tensor. The result is a standalone
// adapter, deployable like any trained one. Zero weights are skipped so a
// one-hot delta reproduces the selected expert bit for bit.
inline AdapterParams merge_adapters(const RelationWeights& weights,
                                    const std::vector<AdapterParams>& adapters) {
  if (adapters.empty()) throw std::invalid_argument("merge_adapters: no adapters");
  if (weights.delta.size() != adapters.size())
    throw std::invalid_argument("merge_adapters: weight count differs from adapter count");
  for (size_t i = 1; i < adapters.size(); ++i) {
    if (!shape_congruent(adapters[0], adapters[i]))
      throw std::invalid_argument("merge_adapters: adapter " + std::to_string(i) +
                                  " is not shape-congruent with adapter 0");
  }
  AdapterParams out;
  out.config = adapters[0].config;
  for (const auto& [name, t0] : adapters[0].tensors) {
    Tensor acc(t0.shape);
    for (size_t k = 0; k < adapters.size(); ++k) {
      double w = weights.delta[k];
      if (w == 0.0) continue;
      const auto it = adapters[k].tensors.find(name);
      if (it == adapters[k].tensors.end() || it->second.shape != t0.shape)
        throw std::invalid_argument("merge_adapters: tensor " + name +
                                    " mismatched in adapter " + std::to_string(k));
      for (size_t j = 0; j < acc.data.size(); ++j) acc.data[j] += w * it->second.data[j];
    }
    out.tensors.emplace(name, std::move(acc));
  }
  return out;
}

// One log-probability vector over the vocabulary given the prefix so far.
using StepFn = std::function<std::vector<double>(const std::vector<int>& prefix)>;

// Greedy decoding over delta-weighted sums of per-expert log-probabilities.
// Experts with zero weight are never queried. Ties break toward the lowest
// token index; generation stops at <eos> or max_tokens.
inline std::vector<int> greedy_ensemble_rollout(std::span<const StepFn> steps,
                                                std::span<const double> delta,
                                                int max_tokens = kMaxValueTokens) {
  if (steps.size() != delta.size())
    throw std::invalid_argument("ensemble rollout: weight count differs from expert count");
  std::vector<int> prefix = {kBos};
  std::vector<int> out;
  for (int m = 0; m < max_tokens; ++m) {
    std::vector<double> combined;
    for (size_t k = 0; k < steps.size(); ++k) {
      if (delta[k] == 0.0) continue;
      std::vector<double> pi = steps[k](prefix);
      if (combined.empty()) combined.assign(pi.size(), 0.0);
      if (pi.size() != combined.size())
        throw std::invalid_argument("ensemble rollout: experts disagree on vocabulary size");
      for (size_t w = 0; w < pi.size(); ++w) combined[w] += delta[k] * pi[w];
    }
    int tok = argmax_token(combined);
    if (tok == kEos) break;
    out.push_back(tok);
    prefix.push_back(tok);
  }
  return out;
}

// Token-level ensemble (expert log-probabilities summed per step).
inline std::vector<int> token_ensemble_decode(const RelationWeights& weights,
                                              const std::vector<AdapterParams>& adapters,
                                              const BackboneParams& backbone,
                                              const std::vector<int>& input_ids,
                                              int max_tokens = kMaxValueTokens) {
  if (weights.delta.size() != adapters.size())
    throw std::invalid_argument("token_ensemble_decode: weight/adapter count mismatch");
  std::vector<Tensor> enc(adapters.size());
  std::vector<StepFn> steps;
  steps.reserve(adapters.size());
  for (size_t k = 0; k < adapters.size(); ++k) {
    if (weights.delta[k] != 0.0) enc[k] = encode_states(input_ids, backbone, &adapters[k]);
    steps.push_back([&, k](const std::vector<int>& prefix) {
      return decode_step(prefix, enc[k], backbone, &adapters[k]);
    });
  }
  return greedy_ensemble_rollout(steps, weights.delta, max_tokens);
}

// Parameter-level ensemble (merge first, decode once).
inline std::vector<int> param_ensemble_decode(const RelationWeights& weights,
                                              const std::vector<AdapterParams>& adapters,
                                              const BackboneParams& backbone,
                                              const std::vector<int>& input_ids,
                                              int max_tokens = kMaxValueTokens) {
  AdapterParams merged = merge_adapters(weights, adapters);
  return greedy_decode(input_ids, backbone, &merged, max_tokens);
}

enum class EnsembleLevel { param, token };

inline std::string to_string(EnsembleLevel l) {
  return l == EnsembleLevel::param ? "param" : "token";
}

inline EnsembleLevel level_from_string(const std::string& s) {
  if (s == "param") return EnsembleLevel::param;
  if (s == "token") return EnsembleLevel::token;
  throw std::invalid_argument("unknown ensemble level " + s);
}

struct PredictOutcome {
  TurnState state;
  RelationWeights weights;
};

// Full inference for one turn: embed the context backbone-only, compute the
// relation weights once, then decode every schema slot under the chosen
// ensemble level. Decoded "none" leaves the slot out of the state.
inline PredictOutcome predict_state(const Dialogue& dialogue, int turn_index,
                                    const SlotSchema& schema, const BackboneParams& backbone,
                                    const std::vector<AdapterParams>& experts,
                                    const std::vector<Prototype>& prototypes,
                                    const TokenVocab& vocab, double tau, EnsembleLevel level,
                                    WeightMode mode = WeightMode::inference,
                                    DistanceKind distance = DistanceKind::neg_sq_euclidean) {
  if (experts.empty()) throw std::invalid_argument("predict_state: no experts");
  if (experts.size() != prototypes.size())
    throw std::invalid_argument("predict_state: expert/prototype count mismatch");

  PredictOutcome out;
  std::vector<int> context_ids = vocab.encode(serialize_context(dialogue, turn_index));
  std::vector<double> e_prime = embed_context(context_ids, backbone);
  out.weights = relation_weights(e_prime, prototypes, tau, mode, distance);

  const AdapterParams merged =
      level == EnsembleLevel::param ? merge_adapters(out.weights, experts) : AdapterParams{};
  for (const auto& slot : schema.slots) {
    SerializedExample ser =
        serialize_example(dialogue, turn_index, slot, backbone.config.max_seq_len);
    std::vector<int> input_ids = vocab.encode(ser.input);
    std::vector<int> tokens;
    if (level == EnsembleLevel::param) {
      tokens = greedy_decode(input_ids, backbone, &merged);
    } else {
      tokens = token_ensemble_decode(out.weights, experts, backbone, input_ids);
    }
    std::string value = normalize_value(vocab.decode(tokens));
    if (!value.empty() && value != "none") out.state[slot.name] = value;
  }
  return out;
}

// ---- prediction artifact ----

struct TurnPrediction {
  std::string dialogue_id;
  int turn_index = 0;
  TurnState state;
  std::vector<double> delta;
};

inline void save_predictions(const std::vector<TurnPrediction>& preds, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("predictions: cannot write " + path);
  for (const auto& p : preds) {
    json j{{"dialogue_id", p.dialogue_id},
           {"turn", p.turn_index},
           {"state", p.state},
           {"delta", p.delta}};
    f << j.dump() << "\n";
  }
}

inline std::vector<TurnPrediction> load_predictions(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("predictions: cannot read " + path);
  std::vector<TurnPrediction> out;
  std::string line;
  int line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw std::runtime_error("predictions: line " + std::to_string(line_no) + ": " + e.what());
    }
    TurnPrediction p;
    p.dialogue_id = j.at("dialogue_id").get<std::string>();
    p.turn_index = j.at("turn").get<int>();
    p.state = j.at("state").get<TurnState>();
    p.delta = j.at("delta").get<std::vector<double>>();
    out.push_back(std::move(p));
  }
  return out;
}

inline StatesByTurn to_states_by_turn(const std::vector<TurnPrediction>& preds) {
  StatesByTurn out;
  for (const auto& p : preds) out[{p.dialogue_id, p.turn_index}] = p.state;
  return out;
}

inline StatesByTurn gold_states(const std::vector<const Dialogue*>& dialogues) {
  StatesByTurn out;
  for (const Dialogue* d : dialogues)
    for (int t = 0; t < static_cast<int>(d->turns.size()); ++t)
      out[{d->dialogue_id, t}] = d->turns[static_cast<size_t>(t)].state;
  return out;
}

}  // namespace moedst
