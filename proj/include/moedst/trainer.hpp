#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "moedst/checkpoint.hpp"
#include "moedst/data.hpp"
#include "moedst/divider.hpp"
#include "moedst/model.hpp"
#include "moedst/threading.hpp"

namespace moedst {

struct TrainConfig {
  double learning_rate = 1e-4;
  int batch_size = 16;
  int epochs = 10;
  uint64_t seed = 0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.01;
  // probability of replacing an input token with <unk> during training, so
  // unseen-domain words at inference hit a familiar condition
  double input_unk_prob = 0.0;
  // probability of replacing every occurrence of the queried domain word
  // (the token right after [slot]) with <unk>, mirroring how an unseen
  // domain appears at inference
  double domain_word_dropout_prob = 0.0;

  void validate() const {
    if (learning_rate <= 0 || batch_size <= 0 || epochs < 1 || adam_beta1 <= 0 ||
        adam_beta2 <= 0 || adam_eps <= 0 || weight_decay < 0 || input_unk_prob < 0 ||
        input_unk_prob >= 1 || domain_word_dropout_prob < 0 || domain_word_dropout_prob >= 1)
      throw std::invalid_argument("train config: values out of range");
  }
};

struct TrainExample {
  std::string example_id;  // "<dialogue_id>#<turn>"
  std::vector<int> input_ids;
  std::vector<int> target_ids;
};

// Enumerates, per turn, one example per slot of the dialogue's own domains
// plus a single slot of one other domain seen in this dialogue set (both
// picked by a stable hash of the example id). The extra slot supplies
// cross-domain negatives - "this domain is not being talked about, answer
// none" - without ever enumerating domains absent from the training split: a
// slot that only ever appears with target "none" would train its domain into
// silence, which is exactly wrong for unseen-domain inference.
inline std::vector<TrainExample> make_examples(const std::vector<const Dialogue*>& dialogues,
                                               const SlotSchema& schema, const TokenVocab& vocab,
                                               int max_seq_len) {
  std::set<std::string> present;
  for (const Dialogue* d : dialogues)
    for (const auto& dom : d->domains) present.insert(dom);

  std::vector<TrainExample> out;
  for (const Dialogue* d : dialogues) {
    std::vector<std::string> others;
    for (const auto& dom : present)
      if (std::find(d->domains.begin(), d->domains.end(), dom) == d->domains.end())
        others.push_back(dom);
    for (int t = 0; t < static_cast<int>(d->turns.size()); ++t) {
      std::string id = example_id(d->dialogue_id, t);
      std::string negative_slot;
      if (!others.empty()) {
        uint64_t h = fnv1a64(id.data(), id.size());
        const std::string& nd = others[h % others.size()];
        std::vector<const SlotDef*> nd_slots;
        for (const auto& slot : schema.slots)
          if (slot.domain == nd) nd_slots.push_back(&slot);
        if (!nd_slots.empty()) negative_slot = nd_slots[(h >> 16) % nd_slots.size()]->name;
      }
      for (const auto& slot : schema.slots) {
        bool own = std::find(d->domains.begin(), d->domains.end(), slot.domain) !=
                   d->domains.end();
        if (!own && slot.name != negative_slot) continue;
        SerializedExample ser = serialize_example(*d, t, slot, max_seq_len);
        TrainExample ex;
        ex.example_id = id;
        ex.input_ids = vocab.encode(ser.input);
        ex.target_ids = vocab.encode(ser.target);
        if (static_cast<int>(ex.target_ids.size()) > kMaxValueTokens)
          ex.target_ids.resize(kMaxValueTokens);
        out.push_back(std::move(ex));
      }
    }
  }
  return out;
}

// Vocabulary over everything the model must read or write in the given
// dialogues: utterances, values, the "none" filler, and the slot prompts of
// the domains those dialogues actually cover. Unseen-domain words stay out,
// so they hit <unk> at inference like any other novel word.
inline TokenVocab build_vocab(const std::vector<const Dialogue*>& dialogues,
                              const SlotSchema& schema) {
  std::set<std::string> present;
  for (const Dialogue* d : dialogues)
    for (const auto& dom : d->domains) present.insert(dom);
  std::vector<std::string> texts;
  texts.emplace_back("none");
  for (const auto& slot : schema.slots)
    if (present.count(slot.domain)) texts.push_back(slot.name + ": " + slot.description);
  for (const Dialogue* d : dialogues) {
    for (const auto& t : d->turns) {
      texts.push_back(t.system);
      texts.push_back(t.user);
      for (const auto& [slot, value] : t.state) texts.push_back(value);
    }
  }
  return TokenVocab::from_texts(texts);
}

// AdamW with decoupled weight decay. Moment tensors are keyed by parameter
// name; call step() once per batch with mean gradients.
class AdamW {
 public:
  explicit AdamW(const TrainConfig& cfg) : cfg_(cfg) {}

  void step(ParamMap& params, const std::map<std::string, Tensor>& grads) {
    ++t_;
    double bc1 = 1.0 - std::pow(cfg_.adam_beta1, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(cfg_.adam_beta2, static_cast<double>(t_));
    for (auto& [name, g] : grads) {
      auto pit = params.find(name);
      if (pit == params.end()) throw std::invalid_argument("adamw: unknown parameter " + name);
      Tensor& theta = pit->second;
      auto [mit, inserted] = moments_.try_emplace(name, Moments{Tensor(theta.shape), Tensor(theta.shape)});
      Tensor& m = mit->second.m;
      Tensor& v = mit->second.v;
      for (size_t i = 0; i < theta.data.size(); ++i) {
        double gi = g.data[i];
        m.data[i] = cfg_.adam_beta1 * m.data[i] + (1.0 - cfg_.adam_beta1) * gi;
        v.data[i] = cfg_.adam_beta2 * v.data[i] + (1.0 - cfg_.adam_beta2) * gi * gi;
        double mhat = m.data[i] / bc1;
        double vhat = v.data[i] / bc2;
        theta.data[i] -= cfg_.learning_rate *
                         (mhat / (std::sqrt(vhat) + cfg_.adam_eps) + cfg_.weight_decay * theta.data[i]);
      }
    }
  }

 private:
  struct Moments {
    Tensor m, v;
  };
  TrainConfig cfg_;
  std::map<std::string, Moments> moments_;
  int64_t t_ = 0;
};

namespace detail {

// One epoch-driving loop shared by backbone pretraining and expert training.
// Exactly one of backbone/adapter is updated.
inline std::vector<double> run_training(std::vector<const TrainExample*> examples,
                                        BackboneParams& backbone, AdapterParams* adapter,
                                        bool train_backbone, const TrainConfig& cfg) {
  cfg.validate();
  if (examples.empty()) throw std::invalid_argument("training: empty example set");
  AdamW optimizer(cfg);
  Rng rng(cfg.seed);
  std::vector<double> epoch_losses;
  ParamMap& trainable = train_backbone ? backbone.tensors : adapter->tensors;

  std::vector<size_t> order(examples.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double loss_sum = 0.0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
      size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
      std::map<std::string, Tensor> grads;
      double inv = 1.0 / static_cast<double>(end - start);
      for (size_t i = start; i < end; ++i) {
        const TrainExample& ex = *examples[order[i]];
        std::vector<int> input_ids = ex.input_ids;
        if (cfg.domain_word_dropout_prob > 0.0 &&
            rng.uniform() < cfg.domain_word_dropout_prob) {
          int slot_marker = 6;  // "[slot]" in the reserved table
          auto it = std::find(input_ids.begin(), input_ids.end(), slot_marker);
          if (it != input_ids.end() && it + 1 != input_ids.end()) {
            int victim = *(it + 1);
            bool in_target = std::find(ex.target_ids.begin(), ex.target_ids.end(), victim) !=
                             ex.target_ids.end();
            // only meaningful when the queried domain is actually talked
            // about: dropping a domain that never occurs in the context
            // would teach "unknown prompt means absent"
            bool in_context = std::find(input_ids.begin(), it, victim) != it;
            if (victim >= static_cast<int>(reserved_tokens().size()) && !in_target &&
                in_context) {
              for (int& id : input_ids)
                if (id == victim) id = kUnk;
            }
          }
        }
        if (cfg.input_unk_prob > 0.0) {
          for (int& id : input_ids)
            if (id >= static_cast<int>(reserved_tokens().size()) &&
                rng.uniform() < cfg.input_unk_prob)
              id = kUnk;
        }
        Tape tape;
        ModelGraph graph(tape, backbone, adapter, train_backbone, adapter != nullptr);
        NodeId loss = graph.example_loss(input_ids, ex.target_ids);
        tape.backward(loss);
        loss_sum += tape.value(loss).data[0];
        const auto& bound = train_backbone ? graph.bound_backbone() : graph.bound_adapter();
        for (const auto& [name, node] : bound) {
          const Tensor& g = tape.grad(node);
          auto [it, inserted] = grads.try_emplace(name, Tensor(g.shape));
          for (size_t j = 0; j < g.data.size(); ++j) it->second.data[j] += inv * g.data[j];
        }
      }
      optimizer.step(trainable, grads);
    }
    epoch_losses.push_back(loss_sum / static_cast<double>(examples.size()));
  }
  return epoch_losses;
}

inline std::vector<const TrainExample*> pointers(const std::vector<TrainExample>& v) {
  std::vector<const TrainExample*> out;
  out.reserve(v.size());
  for (const auto& e : v) out.push_back(&e);
  return out;
}

}  // namespace detail

// Mean loss over a fixed example set without updating anything.
inline double evaluate_loss(const std::vector<const TrainExample*>& examples,
                            const BackboneParams& backbone, const AdapterParams* adapter) {
  if (examples.empty()) throw std::invalid_argument("evaluate_loss: empty example set");
  double sum = 0.0;
  for (const TrainExample* ex : examples) {
    Tape tape;
    ModelGraph graph(tape, backbone, const_cast<AdapterParams*>(adapter), false, false);
    sum += tape.value(graph.example_loss(ex->input_ids, ex->target_ids)).data[0];
  }
  return sum / static_cast<double>(examples.size());
}

struct PretrainResult {
  BackboneParams backbone;
  std::vector<double> loss_curve;
  double heldout_initial = 0.0;
  double heldout_final = 0.0;
};

// Trains the whole backbone on all seen examples (the stand-in for an
// external pretrained encoder-decoder), then the caller treats it as frozen.
// The last ~5% of examples are held out to witness the loss drop.
inline PretrainResult pretrain_backbone(const std::vector<TrainExample>& examples,
                                        const ModelConfig& cfg, const TrainConfig& train_cfg) {
  if (examples.empty()) throw std::invalid_argument("pretrain: empty corpus");
  PretrainResult res;
  res.backbone = init_backbone(cfg, train_cfg.seed);

  auto all = detail::pointers(examples);
  size_t heldout_n = std::max<size_t>(1, all.size() / 20);
  if (all.size() == 1) heldout_n = 0;
  std::vector<const TrainExample*> train_set(all.begin(), all.end() - static_cast<long>(heldout_n));
  std::vector<const TrainExample*> heldout(all.end() - static_cast<long>(heldout_n), all.end());
  if (heldout.empty()) heldout = train_set;

  res.heldout_initial = evaluate_loss(heldout, res.backbone, nullptr);
  res.loss_curve = detail::run_training(train_set, res.backbone, nullptr, true, train_cfg);
  res.heldout_final = evaluate_loss(heldout, res.backbone, nullptr);
  return res;
}

struct ExpertRecord {
  int subset = 0;
  AdapterParams adapter;
  std::vector<double> loss_curve;
  int n_examples = 0;
};

// Conquering step for one subset: a fresh adapter is trained on the subset's
// examples with the backbone frozen (enforced by digest).
inline ExpertRecord train_expert(const std::vector<const TrainExample*>& subset_examples,
                                 const BackboneParams& backbone, const TrainConfig& cfg,
                                 int subset_index = 0) {
  if (subset_examples.empty()) throw std::invalid_argument("train_expert: empty subset");
  uint64_t digest_before = backbone.digest();
  ExpertRecord rec;
  rec.subset = subset_index;
  rec.n_examples = static_cast<int>(subset_examples.size());
  rec.adapter = init_adapter(backbone.config, cfg.seed);
  // run_training only mutates the adapter; the cast satisfies the shared signature
  rec.loss_curve = detail::run_training(subset_examples, const_cast<BackboneParams&>(backbone),
                                        &rec.adapter, false, cfg);
  if (backbone.digest() != digest_before)
    throw std::logic_error("train_expert: backbone changed during expert training");
  return rec;
}

// Trains one expert per subset. Every expert draws seed = base seed + subset
// index, so results do not depend on execution order or parallelism.
inline std::vector<ExpertRecord> train_all_experts(const SubsetAssignment& assignment,
                                                   const std::vector<TrainExample>& examples,
                                                   const BackboneParams& backbone,
                                                   const TrainConfig& cfg, int threads = 1) {
  if (assignment.k < 1) throw std::invalid_argument("train_all_experts: empty assignment");
  std::vector<std::vector<const TrainExample*>> by_subset(static_cast<size_t>(assignment.k));
  for (const TrainExample& ex : examples) {
    auto it = assignment.assignment.find(ex.example_id);
    if (it == assignment.assignment.end())
      throw std::invalid_argument("train_all_experts: example " + ex.example_id +
                                  " missing from the partition");
    by_subset[static_cast<size_t>(it->second)].push_back(&ex);
  }
  std::vector<ExpertRecord> records(static_cast<size_t>(assignment.k));
  parallel_for(assignment.k, threads, [&](int k) {
    TrainConfig expert_cfg = cfg;
    expert_cfg.seed = cfg.seed + static_cast<uint64_t>(k);
    try {
      records[static_cast<size_t>(k)] =
          train_expert(by_subset[static_cast<size_t>(k)], backbone, expert_cfg, k);
    } catch (const std::exception& e) {
      throw std::runtime_error("expert " + std::to_string(k) + ": " + e.what());
    }
  });
  return records;
}

// ---- experts manifest ----

struct ExpertManifestEntry {
  int subset = 0;
  std::string checkpoint_path;
  int n_examples = 0;
};

struct ExpertManifest {
  std::string division_path;
  std::vector<ExpertManifestEntry> experts;
};

inline void save_manifest(const ExpertManifest& m, const std::string& path) {
  json experts = json::array();
  for (const auto& e : m.experts)
    experts.push_back(json{{"subset", e.subset},
                           {"checkpoint", e.checkpoint_path},
                           {"n_examples", e.n_examples}});
  json j{{"division", m.division_path}, {"experts", experts}};
  std::ofstream f(path);
  if (!f) throw std::runtime_error("manifest: cannot write " + path);
  f << j.dump(2) << "\n";
}

inline ExpertManifest load_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("manifest: cannot read " + path);
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw std::runtime_error("manifest: " + path + ": " + e.what());
  }
  ExpertManifest m;
  m.division_path = j.at("division").get<std::string>();
  for (const auto& je : j.at("experts")) {
    ExpertManifestEntry e;
    e.subset = je.at("subset").get<int>();
    e.checkpoint_path = je.at("checkpoint").get<std::string>();
    e.n_examples = je.at("n_examples").get<int>();
    m.experts.push_back(std::move(e));
  }
  return m;
}

}  // namespace moedst
