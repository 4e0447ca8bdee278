#pragma once

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "moedst/checkpoint.hpp"
#include "moedst/combiner.hpp"
#include "moedst/data.hpp"
#include "moedst/datagen.hpp"
#include "moedst/divider.hpp"
#include "moedst/metrics.hpp"
#include "moedst/threading.hpp"
#include "moedst/trainer.hpp"

namespace moedst {

inline void to_json(json& j, const ModelConfig& c) {
  j = json{{"vocab_size", c.vocab_size},
           {"d_model", c.d_model},
           {"n_heads", c.n_heads},
           {"n_enc_layers", c.n_enc_layers},
           {"n_dec_layers", c.n_dec_layers},
           {"d_ff", c.d_ff},
           {"adapter_bottleneck_dim", c.adapter_bottleneck_dim},
           {"max_seq_len", c.max_seq_len}};
}
inline void from_json(const json& j, ModelConfig& c) {
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("d_model").get_to(c.d_model);
  j.at("n_heads").get_to(c.n_heads);
  j.at("n_enc_layers").get_to(c.n_enc_layers);
  j.at("n_dec_layers").get_to(c.n_dec_layers);
  j.at("d_ff").get_to(c.d_ff);
  j.at("adapter_bottleneck_dim").get_to(c.adapter_bottleneck_dim);
  j.at("max_seq_len").get_to(c.max_seq_len);
}
inline void to_json(json& j, const TrainConfig& c) {
  j = json{{"learning_rate", c.learning_rate},
           {"batch_size", c.batch_size},
           {"epochs", c.epochs},
           {"seed", c.seed},
           {"adam_beta1", c.adam_beta1},
           {"adam_beta2", c.adam_beta2},
           {"adam_eps", c.adam_eps},
           {"weight_decay", c.weight_decay},
           {"input_unk_prob", c.input_unk_prob},
           {"domain_word_dropout_prob", c.domain_word_dropout_prob}};
}
inline void from_json(const json& j, TrainConfig& c) {
  j.at("learning_rate").get_to(c.learning_rate);
  j.at("batch_size").get_to(c.batch_size);
  j.at("epochs").get_to(c.epochs);
  j.at("seed").get_to(c.seed);
  j.at("adam_beta1").get_to(c.adam_beta1);
  j.at("adam_beta2").get_to(c.adam_beta2);
  j.at("adam_eps").get_to(c.adam_eps);
  j.at("weight_decay").get_to(c.weight_decay);
  if (j.contains("input_unk_prob")) j.at("input_unk_prob").get_to(c.input_unk_prob);
  if (j.contains("domain_word_dropout_prob"))
    j.at("domain_word_dropout_prob").get_to(c.domain_word_dropout_prob);
}

// Everything one experiment needs, serialized in full into every results row.
struct ExperimentConfig {
  std::string corpus_dir;
  std::vector<std::string> held_out_domains;  // empty = every domain in the corpus
  int k = 3;
  double tau_token = 2.0;
  double tau_param = 0.2;
  std::string distance = "neg_sq_euclidean";
  std::vector<std::string> weight_modes = {"inference"};  // applied to the cluster division
  std::vector<std::string> divisions = {"cluster"};       // cluster and/or domain
  std::vector<std::string> levels = {"param", "token"};
  bool include_baseline = true;  // one adapter trained on all seen data
  std::vector<uint64_t> seeds = {1};
  int max_train_dialogues = 0;  // 0 = unlimited
  int max_test_dialogues = 0;
  int threads = 0;  // 0 = hardware concurrency
  std::string out_dir = "out";
  ModelConfig model;          // vocab_size 0 = sized from the training split
  TrainConfig pretrain_cfg;   // backbone pretraining
  TrainConfig train_cfg;      // adapter training

  void validate() const {
    if (corpus_dir.empty()) throw std::invalid_argument("config: corpus_dir missing");
    if (k < 1) throw std::invalid_argument("config: k must be at least 1");
    if (tau_token <= 0 || tau_param <= 0)
      throw std::invalid_argument("config: temperatures must be positive");
    distance_from_string(distance);
    for (const auto& m : weight_modes) weight_mode_from_string(m);
    for (const auto& l : levels) level_from_string(l);
    for (const auto& d : divisions)
      if (d != "cluster" && d != "domain")
        throw std::invalid_argument("config: unknown division " + d);
    if (divisions.empty() && !include_baseline)
      throw std::invalid_argument("config: nothing to run");
    if (seeds.empty()) throw std::invalid_argument("config: at least one seed required");
    if (out_dir.empty()) throw std::invalid_argument("config: out_dir missing");
    train_cfg.validate();
    pretrain_cfg.validate();
  }
};

inline void to_json(json& j, const ExperimentConfig& c) {
  j = json{{"corpus_dir", c.corpus_dir},
           {"held_out_domains", c.held_out_domains},
           {"k", c.k},
           {"tau_token", c.tau_token},
           {"tau_param", c.tau_param},
           {"distance", c.distance},
           {"weight_modes", c.weight_modes},
           {"divisions", c.divisions},
           {"levels", c.levels},
           {"include_baseline", c.include_baseline},
           {"seeds", c.seeds},
           {"max_train_dialogues", c.max_train_dialogues},
           {"max_test_dialogues", c.max_test_dialogues},
           {"threads", c.threads},
           {"out_dir", c.out_dir},
           {"model", c.model},
           {"pretrain", c.pretrain_cfg},
           {"train", c.train_cfg}};
}
inline void from_json(const json& j, ExperimentConfig& c) {
  ExperimentConfig defaults;
  c = defaults;
  j.at("corpus_dir").get_to(c.corpus_dir);
  if (j.contains("held_out_domains")) j.at("held_out_domains").get_to(c.held_out_domains);
  if (j.contains("k")) j.at("k").get_to(c.k);
  if (j.contains("tau_token")) j.at("tau_token").get_to(c.tau_token);
  if (j.contains("tau_param")) j.at("tau_param").get_to(c.tau_param);
  if (j.contains("distance")) j.at("distance").get_to(c.distance);
  if (j.contains("weight_modes")) j.at("weight_modes").get_to(c.weight_modes);
  if (j.contains("divisions")) j.at("divisions").get_to(c.divisions);
  if (j.contains("levels")) j.at("levels").get_to(c.levels);
  if (j.contains("include_baseline")) j.at("include_baseline").get_to(c.include_baseline);
  if (j.contains("seeds")) j.at("seeds").get_to(c.seeds);
  if (j.contains("max_train_dialogues")) j.at("max_train_dialogues").get_to(c.max_train_dialogues);
  if (j.contains("max_test_dialogues")) j.at("max_test_dialogues").get_to(c.max_test_dialogues);
  if (j.contains("threads")) j.at("threads").get_to(c.threads);
  if (j.contains("out_dir")) j.at("out_dir").get_to(c.out_dir);
  if (j.contains("model")) j.at("model").get_to(c.model);
  if (j.contains("pretrain")) j.at("pretrain").get_to(c.pretrain_cfg);
  if (j.contains("train")) j.at("train").get_to(c.train_cfg);
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("config: cannot read " + path);
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw std::runtime_error("config: " + path + ": " + e.what());
  }
  ExperimentConfig c = j.get<ExperimentConfig>();
  c.validate();
  return c;
}

// One results row: a (run, setting) pair with metrics, parameter accounting
// and timings, plus the fully resolved config.
struct ResultRow {
  std::string held_out_domain;
  uint64_t seed = 0;
  std::string division;  // cluster | domain | single
  std::string level;     // param | token | single
  std::string mode;      // inference | argmax | average | -
  int k = 1;
  double jga = 0.0;
  double slot_accuracy = 0.0;
  double delta_mean_max = 0.0;
  double delta_mean_entropy = 0.0;
  int64_t params_backbone = 0;
  int64_t params_adapter = 0;
  int64_t params_trained = 0;
  int64_t params_deployed = 0;
  int n_train_dialogues = 0;
  int n_test_dialogues = 0;
  int n_train_examples = 0;
  int n_test_turns = 0;
  double pretrain_heldout_initial = 0.0;
  double pretrain_heldout_final = 0.0;
  std::map<std::string, double> timings_s;
  json resolved_config;
};

inline json result_row_to_json(const ResultRow& r) {
  return json{{"run", json{{"held_out_domain", r.held_out_domain}, {"seed", r.seed}}},
              {"setting", json{{"division", r.division},
                               {"level", r.level},
                               {"mode", r.mode},
                               {"k", r.k}}},
              {"metrics", json{{"jga", r.jga},
                               {"slot_accuracy", r.slot_accuracy},
                               {"delta_mean_max", r.delta_mean_max},
                               {"delta_mean_entropy", r.delta_mean_entropy}}},
              {"params", json{{"backbone", r.params_backbone},
                              {"adapter", r.params_adapter},
                              {"trained", r.params_trained},
                              {"deployed", r.params_deployed}}},
              {"data", json{{"train_dialogues", r.n_train_dialogues},
                            {"test_dialogues", r.n_test_dialogues},
                            {"train_examples", r.n_train_examples},
                            {"test_turns", r.n_test_turns},
                            {"pretrain_heldout_initial", r.pretrain_heldout_initial},
                            {"pretrain_heldout_final", r.pretrain_heldout_final}}},
              {"config", r.resolved_config},
              {"timing", r.timings_s}};
}

inline void save_results(const std::vector<ResultRow>& rows, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("results: cannot write " + path);
  for (const auto& r : rows) f << result_row_to_json(r).dump() << "\n";
}

// Two results files are equal when every row matches after dropping the
// timing section.
inline bool results_equal_ignoring_timing(const std::string& path_a, const std::string& path_b) {
  auto read = [](const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("results: cannot read " + path);
    std::vector<json> rows;
    std::string line;
    while (std::getline(f, line)) {
      if (line.empty()) continue;
      json j = json::parse(line);
      j.erase("timing");
      rows.push_back(std::move(j));
    }
    return rows;
  };
  return read(path_a) == read(path_b);
}

// Pretrained backbones (and the embeddings derived from them) depend only on
// the split, the run seed, and the model/pretrain configs, so ablation sweeps
// share them across axis values.
class BackboneCache {
 public:
  struct Entry {
    BackboneParams backbone;
    TokenVocab vocab;
    std::vector<double> loss_curve;
    double heldout_initial = 0.0;
    double heldout_final = 0.0;
    std::vector<SemanticVector> train_vectors;
  };

  std::shared_ptr<const Entry> find(const std::string& key) const {
    std::lock_guard lock(mu_);
    auto it = entries_.find(key);
    return it == entries_.end() ? nullptr : it->second;
  }

  void put(const std::string& key, std::shared_ptr<const Entry> entry) {
    std::lock_guard lock(mu_);
    entries_.emplace(key, std::move(entry));
  }

 private:
  mutable std::mutex mu_;
  std::map<std::string, std::shared_ptr<const Entry>> entries_;
};

namespace detail {

inline std::vector<std::string> cap_ids(std::vector<std::string> ids, int cap, uint64_t seed) {
  if (cap <= 0 || static_cast<int>(ids.size()) <= cap) return ids;
  std::vector<size_t> idx(ids.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng(seed);
  rng.shuffle(idx);
  idx.resize(static_cast<size_t>(cap));
  std::sort(idx.begin(), idx.end());
  std::vector<std::string> out;
  out.reserve(idx.size());
  for (size_t i : idx) out.push_back(std::move(ids[i]));
  return out;
}

inline double entropy(std::span<const double> p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0.0) h -= v * std::log(v);
  return h;
}

struct Timer {
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
};

template <typename Fn>
auto stage(const std::string& name, Fn&& fn) {
  try {
    return fn();
  } catch (const std::exception& e) {
    throw std::runtime_error("stage " + name + ": " + e.what());
  }
}

struct DivisionSet {
  std::string name;  // single | cluster | domain
  Division division;
  std::vector<AdapterParams> experts;
  std::vector<int> expert_sizes;  // examples per expert
};

// All settings evaluated for one run, in a fixed deterministic order.
struct Setting {
  std::string division;
  std::string level;  // param | token | single
  std::string mode;   // inference | argmax | average | -
};

inline std::vector<Setting> planned_settings(const ExperimentConfig& cfg) {
  std::vector<Setting> out;
  if (cfg.include_baseline) out.push_back({"single", "single", "-"});
  for (const auto& div : cfg.divisions) {
    for (const auto& level : cfg.levels) {
      if (div == "cluster") {
        for (const auto& mode : cfg.weight_modes) out.push_back({div, level, mode});
      } else {
        // the domain-division baseline is always scored with inference weights
        out.push_back({div, level, "inference"});
      }
    }
  }
  return out;
}

}  // namespace detail

// Runs split -> pretrain -> embed -> divide -> train experts -> predict ->
// evaluate for every (held-out domain, seed) pair, writing artifacts under
// cfg.out_dir as soon as each stage produces them. Returns one row per
// (run, setting).
inline std::vector<ResultRow> run_experiment(const ExperimentConfig& cfg,
                                             BackboneCache* cache = nullptr) {
  namespace fs = std::filesystem;
  cfg.validate();
  const Corpus corpus = detail::stage("load-corpus", [&] { return load_corpus(cfg.corpus_dir); });

  std::vector<std::string> domains = cfg.held_out_domains;
  if (domains.empty()) domains = corpus.schema.domains();

  struct RunKey {
    std::string domain;
    uint64_t seed;
  };
  std::vector<RunKey> runs;
  for (const auto& d : domains)
    for (uint64_t s : cfg.seeds) runs.push_back({d, s});

  int threads = cfg.threads > 0 ? cfg.threads : hardware_threads();
  int runs_parallel = std::clamp<int>(threads, 1, static_cast<int>(runs.size()));
  int inner_threads = std::max(1, threads / runs_parallel);

  fs::create_directories(cfg.out_dir);
  json resolved_config = cfg;

  std::vector<std::vector<ResultRow>> per_run(runs.size());
  parallel_for(static_cast<int>(runs.size()), runs_parallel, [&](int run_idx) {
    const RunKey& run = runs[static_cast<size_t>(run_idx)];
    const uint64_t s = run.seed;
    std::map<std::string, double> timings;
    detail::Timer run_timer;

    fs::path run_dir = fs::path(cfg.out_dir) / (run.domain + "_s" + std::to_string(s));
    fs::create_directories(run_dir);

    // ---- split ----
    SplitSpec split = detail::stage("split", [&] {
      SplitSpec sp = leave_one_domain_out(corpus, run.domain);
      sp.train_ids = detail::cap_ids(std::move(sp.train_ids), cfg.max_train_dialogues,
                                     s ^ fnv1a64(run.domain.data(), run.domain.size()));
      sp.test_ids = detail::cap_ids(std::move(sp.test_ids), cfg.max_test_dialogues,
                                    (s + 1) ^ fnv1a64(run.domain.data(), run.domain.size()));
      return sp;
    });
    std::vector<const Dialogue*> train_dialogues = select_dialogues(corpus, split.train_ids);
    std::vector<const Dialogue*> test_dialogues = select_dialogues(corpus, split.test_ids);

    // ---- pretrain (cache-aware) ----
    std::string cache_key;
    if (cache) {
      json key{{"corpus", cfg.corpus_dir},          {"domain", run.domain},
               {"seed", s},                         {"model", cfg.model},
               {"pretrain", cfg.pretrain_cfg},      {"max_train", cfg.max_train_dialogues}};
      cache_key = key.dump();
    }
    std::shared_ptr<const BackboneCache::Entry> entry = cache ? cache->find(cache_key) : nullptr;

    std::vector<TrainExample> examples;  // adapter-training examples, train split
    if (!entry) {
      auto fresh = std::make_shared<BackboneCache::Entry>();
      detail::Timer t_pre;
      detail::stage("pretrain", [&] {
        fresh->vocab = build_vocab(train_dialogues, corpus.schema);
        ModelConfig mc = cfg.model;
        if (mc.vocab_size == 0) mc.vocab_size = fresh->vocab.size();
        TrainConfig pc = cfg.pretrain_cfg;
        pc.seed += s;
        examples = make_examples(train_dialogues, corpus.schema, fresh->vocab, mc.max_seq_len);
        PretrainResult pr = pretrain_backbone(examples, mc, pc);
        fresh->backbone = std::move(pr.backbone);
        fresh->loss_curve = std::move(pr.loss_curve);
        fresh->heldout_initial = pr.heldout_initial;
        fresh->heldout_final = pr.heldout_final;
        return 0;
      });
      timings["pretrain"] = t_pre.seconds();

      detail::Timer t_embed;
      detail::stage("embed", [&] {
        fresh->train_vectors =
            embed_dialogues(train_dialogues, fresh->backbone, fresh->vocab, inner_threads);
        return 0;
      });
      timings["embed"] = t_embed.seconds();
      if (cache) cache->put(cache_key, fresh);
      entry = fresh;
    } else {
      timings["pretrain"] = 0.0;
      timings["embed"] = 0.0;
      examples = make_examples(train_dialogues, corpus.schema, entry->vocab,
                               entry->backbone.config.max_seq_len);
    }
    const BackboneParams& backbone = entry->backbone;
    const TokenVocab& vocab = entry->vocab;
    detail::stage("pretrain-artifacts", [&] {
      save_checkpoint(backbone, (run_dir / "backbone.ckpt").string());
      vocab.save((run_dir / "vocab.txt").string());
      return 0;
    });

    // ---- divide ----
    detail::Timer t_div;
    std::vector<detail::DivisionSet> division_sets;
    std::set<std::string> wanted(cfg.divisions.begin(), cfg.divisions.end());
    if (cfg.include_baseline) wanted.insert("single");
    detail::stage("divide", [&] {
      for (const auto& name : {std::string("single"), std::string("cluster"),
                               std::string("domain")}) {
        if (!wanted.count(name)) continue;
        detail::DivisionSet ds;
        ds.name = name;
        ds.division.mode = name;
        ds.division.seed = s;
        if (name == "single") {
          ds.division.assignment.k = 1;
          for (const auto& v : entry->train_vectors) ds.division.assignment.assignment[v.example_id] = 0;
        } else if (name == "cluster") {
          KmeansResult km;
          std::vector<std::vector<double>> pts;
          pts.reserve(entry->train_vectors.size());
          for (const auto& v : entry->train_vectors) pts.push_back(v.vec);
          km = kmeans_cluster(pts, cfg.k, s);
          ds.division.assignment.k = cfg.k;
          for (size_t i = 0; i < entry->train_vectors.size(); ++i)
            ds.division.assignment.assignment[entry->train_vectors[i].example_id] = km.labels[i];
          ds.division.objective = km.objective_history.empty() ? 0.0 : km.objective_history.back();
        } else {
          ds.division.assignment = domain_partition(train_dialogues);
        }
        ds.division.prototypes = compute_prototypes(entry->train_vectors, ds.division.assignment);
        save_division(ds.division, (run_dir / ("division_" + name + ".jsonl")).string());
        division_sets.push_back(std::move(ds));
      }
      return 0;
    });
    timings["divide"] = t_div.seconds();

    // ---- conquer ----
    detail::Timer t_train;
    detail::stage("train-experts", [&] {
      for (auto& ds : division_sets) {
        TrainConfig tc = cfg.train_cfg;
        tc.seed += s;
        std::vector<ExpertRecord> recs =
            train_all_experts(ds.division.assignment, examples, backbone, tc, inner_threads);
        ExpertManifest manifest;
        manifest.division_path = "division_" + ds.name + ".jsonl";
        fs::path exp_dir = run_dir / ("experts_" + ds.name);
        fs::create_directories(exp_dir);
        for (auto& rec : recs) {
          std::string ck = (exp_dir / ("expert_" + std::to_string(rec.subset) + ".ckpt")).string();
          save_checkpoint(rec.adapter, ck);
          manifest.experts.push_back({rec.subset, ck, rec.n_examples});
          ds.expert_sizes.push_back(rec.n_examples);
          ds.experts.push_back(std::move(rec.adapter));
        }
        save_manifest(manifest, (exp_dir / "manifest.json").string());
      }
      return 0;
    });
    timings["train_experts"] = t_train.seconds();

    // ---- combine: predict every test turn under every setting ----
    struct TurnRef {
      const Dialogue* d;
      int t;
    };
    std::vector<TurnRef> turns;
    for (const Dialogue* d : test_dialogues)
      for (int t = 0; t < static_cast<int>(d->turns.size()); ++t) turns.push_back({d, t});

    std::vector<detail::Setting> settings = detail::planned_settings(cfg);
    DistanceKind dist = distance_from_string(cfg.distance);

    detail::Timer t_infer;
    std::vector<std::vector<TurnPrediction>> preds(
        settings.size(), std::vector<TurnPrediction>(turns.size()));
    detail::stage("infer", [&] {
      parallel_for(static_cast<int>(turns.size()), inner_threads, [&](int ti) {
        const TurnRef& tr = turns[static_cast<size_t>(ti)];
        std::vector<int> context_ids = vocab.encode(serialize_context(*tr.d, tr.t));
        std::vector<double> e_prime = embed_context(context_ids, backbone);

        std::vector<std::vector<int>> slot_inputs;
        slot_inputs.reserve(corpus.schema.slots.size());
        for (const auto& slot : corpus.schema.slots)
          slot_inputs.push_back(vocab.encode(
              serialize_example(*tr.d, tr.t, slot, backbone.config.max_seq_len).input));

        // encoder states per (division, slot, expert), filled lazily for
        // token-level settings and shared across their weight modes
        std::map<std::string, std::vector<std::vector<Tensor>>> token_enc;

        for (size_t si = 0; si < settings.size(); ++si) {
          const detail::Setting& st = settings[si];
          const detail::DivisionSet* ds = nullptr;
          for (const auto& cand : division_sets)
            if (cand.name == st.division) ds = &cand;
          if (!ds) throw std::logic_error("missing division " + st.division);

          TurnPrediction tp;
          tp.dialogue_id = tr.d->dialogue_id;
          tp.turn_index = tr.t;

          if (st.level == "single") {
            tp.delta = {1.0};
            for (size_t sl = 0; sl < slot_inputs.size(); ++sl) {
              std::vector<int> toks = greedy_decode(slot_inputs[sl], backbone, &ds->experts[0]);
              std::string value = normalize_value(vocab.decode(toks));
              if (!value.empty() && value != "none")
                tp.state[corpus.schema.slots[sl].name] = value;
            }
          } else {
            double tau = st.level == "param" ? cfg.tau_param : cfg.tau_token;
            RelationWeights w = relation_weights(e_prime, ds->division.prototypes, tau,
                                                 weight_mode_from_string(st.mode), dist);
            tp.delta = w.delta;
            if (st.level == "param") {
              AdapterParams merged = merge_adapters(w, ds->experts);
              for (size_t sl = 0; sl < slot_inputs.size(); ++sl) {
                std::vector<int> toks = greedy_decode(slot_inputs[sl], backbone, &merged);
                std::string value = normalize_value(vocab.decode(toks));
                if (!value.empty() && value != "none")
                  tp.state[corpus.schema.slots[sl].name] = value;
              }
            } else {
              auto& enc = token_enc[st.division];
              if (enc.empty()) {
                enc.assign(slot_inputs.size(), std::vector<Tensor>(ds->experts.size()));
                for (size_t sl = 0; sl < slot_inputs.size(); ++sl)
                  for (size_t k = 0; k < ds->experts.size(); ++k)
                    enc[sl][k] = encode_states(slot_inputs[sl], backbone, &ds->experts[k]);
              }
              for (size_t sl = 0; sl < slot_inputs.size(); ++sl) {
                std::vector<StepFn> steps;
                steps.reserve(ds->experts.size());
                for (size_t k = 0; k < ds->experts.size(); ++k)
                  steps.push_back([&, sl, k](const std::vector<int>& prefix) {
                    return decode_step(prefix, enc[sl][k], backbone, &ds->experts[k]);
                  });
                std::vector<int> toks = greedy_ensemble_rollout(steps, w.delta);
                std::string value = normalize_value(vocab.decode(toks));
                if (!value.empty() && value != "none")
                  tp.state[corpus.schema.slots[sl].name] = value;
              }
            }
          }
          preds[si][static_cast<size_t>(ti)] = std::move(tp);
        }
      });
      return 0;
    });
    timings["infer"] = t_infer.seconds();

    // ---- evaluate ----
    StatesByTurn gold = gold_states(test_dialogues);
    timings["run_total"] = run_timer.seconds();
    std::vector<ResultRow>& rows = per_run[static_cast<size_t>(run_idx)];
    detail::stage("eval", [&] {
      for (size_t si = 0; si < settings.size(); ++si) {
        const detail::Setting& st = settings[si];
        const detail::DivisionSet* ds = nullptr;
        for (const auto& cand : division_sets)
          if (cand.name == st.division) ds = &cand;

        std::string pred_path =
            (run_dir / ("predictions_" + st.division + "_" + st.level + "_" + st.mode + ".jsonl"))
                .string();
        save_predictions(preds[si], pred_path);

        ResultRow row;
        row.held_out_domain = run.domain;
        row.seed = s;
        row.division = st.division;
        row.level = st.level;
        row.mode = st.mode;
        row.k = ds->division.assignment.k;
        row.jga = joint_goal_accuracy(to_states_by_turn(preds[si]), gold);
        row.slot_accuracy = slot_accuracy(to_states_by_turn(preds[si]), gold, corpus.schema);
        double mm = 0.0, me = 0.0;
        for (const auto& p : preds[si]) {
          mm += *std::max_element(p.delta.begin(), p.delta.end());
          me += detail::entropy(p.delta);
        }
        row.delta_mean_max = preds[si].empty() ? 0.0 : mm / static_cast<double>(preds[si].size());
        row.delta_mean_entropy =
            preds[si].empty() ? 0.0 : me / static_cast<double>(preds[si].size());
        row.params_backbone = backbone.size();
        row.params_adapter = ds->experts.empty() ? 0 : ds->experts[0].size();
        row.params_trained = row.params_adapter * row.k;
        row.params_deployed = st.level == "token" ? row.params_adapter * row.k : row.params_adapter;
        row.n_train_dialogues = static_cast<int>(train_dialogues.size());
        row.n_test_dialogues = static_cast<int>(test_dialogues.size());
        row.n_train_examples = static_cast<int>(examples.size());
        row.n_test_turns = static_cast<int>(turns.size());
        row.pretrain_heldout_initial = entry->heldout_initial;
        row.pretrain_heldout_final = entry->heldout_final;
        row.timings_s = timings;
        row.resolved_config = resolved_config;
        rows.push_back(std::move(row));
      }
      return 0;
    });
  });

  std::vector<ResultRow> all;
  for (auto& rows : per_run)
    for (auto& r : rows) all.push_back(std::move(r));
  save_results(all, (fs::path(cfg.out_dir) / "results.jsonl").string());
  return all;
}

// ---- ablation sweeps ----

struct AblationRow {
  std::string axis;
  std::string value;
  std::map<std::string, double> mean_jga;       // keyed by "<division>/<level>/<mode>"
  std::map<std::string, double> mean_slot_acc;
};

inline json ablation_row_to_json(const AblationRow& r) {
  return json{
      {"axis", r.axis}, {"value", r.value}, {"mean_jga", r.mean_jga},
      {"mean_slot_accuracy", r.mean_slot_acc}};
}

inline std::vector<std::string> ablation_axis_values(const std::string& axis) {
  if (axis == "K") return {"1", "2", "3", "4", "5"};
  if (axis == "temperature") return {"0.1", "0.2", "0.4", "1", "2", "4"};
  if (axis == "weight_mode") return {"inference", "argmax", "average"};
  if (axis == "division") return {"cluster", "domain"};
  throw std::invalid_argument("ablate: unknown axis " + axis);
}

// Runs one experiment per axis value, reusing pretrained backbones across
// values, and writes a sweep file with exactly one aggregate row per value.
inline std::vector<AblationRow> run_ablation(const ExperimentConfig& base,
                                             const std::string& axis) {
  namespace fs = std::filesystem;
  BackboneCache cache;
  std::vector<AblationRow> sweep;
  fs::path root = fs::path(base.out_dir) / ("ablate_" + axis);
  for (const std::string& value : ablation_axis_values(axis)) {
    ExperimentConfig cfg = base;
    cfg.out_dir = (root / value).string();
    cfg.include_baseline = false;
    if (axis == "K") {
      cfg.k = std::stoi(value);
      cfg.divisions = {"cluster"};
    } else if (axis == "temperature") {
      cfg.tau_token = std::stod(value);
      cfg.tau_param = std::stod(value);
      cfg.divisions = {"cluster"};
    } else if (axis == "weight_mode") {
      cfg.weight_modes = {value};
      cfg.divisions = {"cluster"};
    } else {
      cfg.divisions = {value};
    }
    std::vector<ResultRow> rows = run_experiment(cfg, &cache);
    AblationRow ab;
    ab.axis = axis;
    ab.value = value;
    std::map<std::string, std::pair<double, int>> jga, sa;
    for (const auto& r : rows) {
      std::string key = r.division + "/" + r.level + "/" + r.mode;
      jga[key].first += r.jga;
      jga[key].second++;
      sa[key].first += r.slot_accuracy;
      sa[key].second++;
    }
    for (auto& [key, acc] : jga) ab.mean_jga[key] = acc.first / acc.second;
    for (auto& [key, acc] : sa) ab.mean_slot_acc[key] = acc.first / acc.second;
    sweep.push_back(std::move(ab));
  }
  fs::create_directories(root);
  std::ofstream f(root / "sweep.jsonl");
  if (!f) throw std::runtime_error("ablate: cannot write sweep file");
  for (const auto& r : sweep) f << ablation_row_to_json(r).dump() << "\n";
  return sweep;
}

}  // namespace moedst
