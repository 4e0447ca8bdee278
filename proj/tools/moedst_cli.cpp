// Command-line driver for the divide / conquer / combine pipeline:
// synthetic-corpus generation, semantic division, expert training, ensemble
// inference, evaluation, and the end-to-end experiment and ablation harness.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "moedst/moedst.hpp"

namespace fs = std::filesystem;
using namespace moedst;

namespace {

GeneratorSpec load_generator_spec(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("generator spec: cannot read " + path);
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw std::runtime_error("generator spec: " + path + ": " + e.what());
  }
  return j.get<GeneratorSpec>();
}

struct CommonOpts {
  std::string config_path;
  uint64_t seed = 0;
  bool seed_set = false;
  std::string out;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("--config", opts.config_path, "experiment config JSON");
  cmd->add_option("--seed", opts.seed, "override the config seed list with one seed")
      ->each([&](const std::string&) { opts.seed_set = true; });
  cmd->add_option("--out", opts.out, "override the output directory");
}

ExperimentConfig resolve_config(const CommonOpts& opts) {
  if (opts.config_path.empty()) throw std::runtime_error("missing --config");
  ExperimentConfig cfg = load_experiment_config(opts.config_path);
  if (opts.seed_set) cfg.seeds = {opts.seed};
  if (!opts.out.empty()) cfg.out_dir = opts.out;
  cfg.validate();
  return cfg;
}

int threads_or_default(const ExperimentConfig& cfg) {
  return cfg.threads > 0 ? cfg.threads : hardware_threads();
}

// Loads the per-run artifacts (backbone + vocab) that divide/train/infer
// share; they live where `train --pretrain-backbone` put them.
struct RunArtifacts {
  BackboneParams backbone;
  TokenVocab vocab;
};

RunArtifacts load_run_artifacts(const std::string& dir) {
  RunArtifacts a;
  a.backbone = load_backbone_checkpoint((fs::path(dir) / "backbone.ckpt").string());
  a.vocab = TokenVocab::load((fs::path(dir) / "vocab.txt").string());
  return a;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"divide-conquer-combine zero-shot dialogue state tracking"};
  app.require_subcommand(1);

  // ---- generate-data ----
  auto* gen = app.add_subcommand("generate-data", "write a synthetic multi-domain corpus");
  std::string gen_spec_path;
  uint64_t gen_seed = 1;
  std::string gen_out = "corpus";
  gen->add_option("--config", gen_spec_path, "generator spec JSON (omit for built-in default)");
  gen->add_option("--seed", gen_seed, "generation seed");
  gen->add_option("--out", gen_out, "corpus output directory")->required();

  // ---- divide ----
  auto* divide = app.add_subcommand("divide", "embed the training split and partition it");
  CommonOpts divide_opts;
  add_common(divide, divide_opts);
  std::string divide_domain, divide_mode = "cluster", divide_artifacts;
  divide->add_option("--held-out", divide_domain, "held-out domain")->required();
  divide->add_option("--mode", divide_mode, "cluster or domain");
  divide->add_option("--artifacts", divide_artifacts,
                     "directory with backbone.ckpt and vocab.txt (defaults to --out)");

  // ---- train ----
  auto* train = app.add_subcommand("train", "pretrain the backbone and/or train experts");
  CommonOpts train_opts;
  add_common(train, train_opts);
  std::string train_domain, train_division;
  bool train_pretrain = false;
  train->add_option("--held-out", train_domain, "held-out domain")->required();
  train->add_flag("--pretrain-backbone", train_pretrain, "pretrain and freeze the backbone");
  train->add_option("--division", train_division, "division artifact to train experts for");

  // ---- infer ----
  auto* infer = app.add_subcommand("infer", "predict states for the held-out dialogues");
  CommonOpts infer_opts;
  add_common(infer, infer_opts);
  std::string infer_domain, infer_manifest, infer_level = "token", infer_mode = "inference";
  infer->add_option("--held-out", infer_domain, "held-out domain")->required();
  infer->add_option("--manifest", infer_manifest, "experts manifest JSON")->required();
  infer->add_option("--level", infer_level, "param or token");
  infer->add_option("--mode", infer_mode, "inference, argmax, or average");

  // ---- eval ----
  auto* eval = app.add_subcommand("eval", "score predictions against the gold states");
  CommonOpts eval_opts;
  add_common(eval, eval_opts);
  std::string eval_domain, eval_predictions;
  eval->add_option("--held-out", eval_domain, "held-out domain")->required();
  eval->add_option("--predictions", eval_predictions, "predictions JSONL")->required();

  // ---- experiment ----
  auto* exp = app.add_subcommand("experiment", "run the full pipeline over the seed/domain grid");
  CommonOpts exp_opts;
  add_common(exp, exp_opts);

  // ---- ablate ----
  auto* ablate = app.add_subcommand("ablate", "sweep one experimental axis");
  CommonOpts ablate_opts;
  add_common(ablate, ablate_opts);
  std::string ablate_axis;
  ablate->add_option("--axis", ablate_axis, "K, temperature, weight_mode, or division")
      ->required();

  // ---- print-defaults ----
  auto* defaults = app.add_subcommand("print-defaults", "dump default configs as JSON");
  bool defaults_generator = false;
  defaults->add_flag("--generator", defaults_generator, "print the generator spec instead");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      GeneratorSpec spec =
          gen_spec_path.empty() ? default_generator_spec() : load_generator_spec(gen_spec_path);
      Corpus corpus = generate_synthetic_corpus(spec, gen_seed);
      save_corpus(corpus, gen_out);
      std::cout << "wrote " << corpus.dialogues.size() << " dialogues, "
                << corpus.schema.total() << " slots to " << gen_out << "\n";
      return 0;
    }

    if (divide->parsed()) {
      ExperimentConfig cfg = resolve_config(divide_opts);
      Corpus corpus = load_corpus(cfg.corpus_dir);
      SplitSpec split = leave_one_domain_out(corpus, divide_domain);
      auto train_dialogues = select_dialogues(corpus, split.train_ids);
      std::string art_dir = divide_artifacts.empty() ? cfg.out_dir : divide_artifacts;
      RunArtifacts art = load_run_artifacts(art_dir);
      uint64_t seed = cfg.seeds.front();
      auto vectors = embed_dialogues(train_dialogues, art.backbone, art.vocab,
                                     threads_or_default(cfg));
      Division div;
      div.mode = divide_mode;
      div.seed = seed;
      if (divide_mode == "cluster") {
        std::vector<std::vector<double>> pts;
        for (const auto& v : vectors) pts.push_back(v.vec);
        KmeansResult km = kmeans_cluster(pts, cfg.k, seed);
        div.assignment.k = cfg.k;
        for (size_t i = 0; i < vectors.size(); ++i)
          div.assignment.assignment[vectors[i].example_id] = km.labels[i];
        div.objective = km.objective_history.empty() ? 0.0 : km.objective_history.back();
      } else if (divide_mode == "domain") {
        div.assignment = domain_partition(train_dialogues);
      } else {
        throw std::runtime_error("divide: unknown mode " + divide_mode);
      }
      div.prototypes = compute_prototypes(vectors, div.assignment);
      fs::create_directories(cfg.out_dir);
      std::string path =
          (fs::path(cfg.out_dir) / ("division_" + divide_mode + ".jsonl")).string();
      save_division(div, path);
      std::cout << "wrote " << path << " (k=" << div.assignment.k << ")\n";
      return 0;
    }

    if (train->parsed()) {
      ExperimentConfig cfg = resolve_config(train_opts);
      if (!train_pretrain && train_division.empty())
        throw std::runtime_error("train: need --pretrain-backbone and/or --division");
      Corpus corpus = load_corpus(cfg.corpus_dir);
      SplitSpec split = leave_one_domain_out(corpus, train_domain);
      auto train_dialogues = select_dialogues(corpus, split.train_ids);
      fs::create_directories(cfg.out_dir);
      uint64_t seed = cfg.seeds.front();

      if (train_pretrain) {
        TokenVocab vocab = build_vocab(train_dialogues, corpus.schema);
        ModelConfig mc = cfg.model;
        if (mc.vocab_size == 0) mc.vocab_size = vocab.size();
        TrainConfig pc = cfg.pretrain_cfg;
        pc.seed += seed;
        auto examples = make_examples(train_dialogues, corpus.schema, vocab, mc.max_seq_len);
        PretrainResult pr = pretrain_backbone(examples, mc, pc);
        save_checkpoint(pr.backbone, (fs::path(cfg.out_dir) / "backbone.ckpt").string());
        vocab.save((fs::path(cfg.out_dir) / "vocab.txt").string());
        std::cout << "pretrained backbone: held-out loss " << pr.heldout_initial << " -> "
                  << pr.heldout_final << "\n";
      }

      if (!train_division.empty()) {
        RunArtifacts art = load_run_artifacts(cfg.out_dir);
        Division div = load_division(train_division);
        auto examples =
            make_examples(train_dialogues, corpus.schema, art.vocab, art.backbone.config.max_seq_len);
        TrainConfig tc = cfg.train_cfg;
        tc.seed += seed;
        auto records = train_all_experts(div.assignment, examples, art.backbone, tc,
                                         threads_or_default(cfg));
        fs::path exp_dir = fs::path(cfg.out_dir) / ("experts_" + div.mode);
        fs::create_directories(exp_dir);
        ExpertManifest manifest;
        manifest.division_path = train_division;
        for (const auto& rec : records) {
          std::string ck = (exp_dir / ("expert_" + std::to_string(rec.subset) + ".ckpt")).string();
          save_checkpoint(rec.adapter, ck);
          manifest.experts.push_back({rec.subset, ck, rec.n_examples});
          std::cout << "expert " << rec.subset << ": " << rec.n_examples << " examples, loss "
                    << rec.loss_curve.front() << " -> " << rec.loss_curve.back() << "\n";
        }
        save_manifest(manifest, (exp_dir / "manifest.json").string());
      }
      return 0;
    }

    if (infer->parsed()) {
      ExperimentConfig cfg = resolve_config(infer_opts);
      Corpus corpus = load_corpus(cfg.corpus_dir);
      SplitSpec split = leave_one_domain_out(corpus, infer_domain);
      auto test_dialogues = select_dialogues(corpus, split.test_ids);
      RunArtifacts art = load_run_artifacts(cfg.out_dir);
      ExpertManifest manifest = load_manifest(infer_manifest);
      fs::path manifest_dir = fs::path(infer_manifest).parent_path();
      fs::path division_path = manifest.division_path;
      if (!fs::exists(division_path)) division_path = manifest_dir / manifest.division_path;
      if (!fs::exists(division_path))
        division_path = manifest_dir.parent_path() / fs::path(manifest.division_path).filename();
      Division div = load_division(division_path.string());
      std::vector<AdapterParams> experts;
      for (const auto& e : manifest.experts)
        experts.push_back(load_adapter_checkpoint(e.checkpoint_path));
      EnsembleLevel level = level_from_string(infer_level);
      WeightMode mode = weight_mode_from_string(infer_mode);
      double tau = level == EnsembleLevel::param ? cfg.tau_param : cfg.tau_token;

      struct TurnRef {
        const Dialogue* d;
        int t;
      };
      std::vector<TurnRef> turns;
      for (const Dialogue* d : test_dialogues)
        for (int t = 0; t < static_cast<int>(d->turns.size()); ++t) turns.push_back({d, t});
      std::vector<TurnPrediction> preds(turns.size());
      parallel_for(static_cast<int>(turns.size()), threads_or_default(cfg), [&](int i) {
        const TurnRef& tr = turns[static_cast<size_t>(i)];
        PredictOutcome out = predict_state(*tr.d, tr.t, corpus.schema, art.backbone, experts,
                                           div.prototypes, art.vocab, tau, level, mode,
                                           distance_from_string(cfg.distance));
        preds[static_cast<size_t>(i)] = {tr.d->dialogue_id, tr.t, std::move(out.state),
                                         std::move(out.weights.delta)};
      });
      fs::create_directories(cfg.out_dir);
      std::string path = (fs::path(cfg.out_dir) /
                          ("predictions_" + div.mode + "_" + infer_level + "_" + infer_mode +
                           ".jsonl"))
                             .string();
      save_predictions(preds, path);
      std::cout << "wrote " << preds.size() << " turn predictions to " << path << "\n";
      return 0;
    }

    if (eval->parsed()) {
      ExperimentConfig cfg = resolve_config(eval_opts);
      Corpus corpus = load_corpus(cfg.corpus_dir);
      SplitSpec split = leave_one_domain_out(corpus, eval_domain);
      auto test_dialogues = select_dialogues(corpus, split.test_ids);
      auto preds = load_predictions(eval_predictions);
      double jga = joint_goal_accuracy(to_states_by_turn(preds), gold_states(test_dialogues));
      double sa =
          slot_accuracy(to_states_by_turn(preds), gold_states(test_dialogues), corpus.schema);
      json out{{"held_out_domain", eval_domain},
               {"jga", jga},
               {"slot_accuracy", sa},
               {"turns", preds.size()}};
      std::cout << out.dump(2) << "\n";
      if (!cfg.out_dir.empty()) {
        fs::create_directories(cfg.out_dir);
        std::ofstream f(fs::path(cfg.out_dir) / "eval.json");
        f << out.dump(2) << "\n";
      }
      return 0;
    }

    if (exp->parsed()) {
      ExperimentConfig cfg = resolve_config(exp_opts);
      std::vector<ResultRow> rows = run_experiment(cfg);
      std::cout << "wrote " << rows.size() << " result rows to "
                << (fs::path(cfg.out_dir) / "results.jsonl").string() << "\n";
      for (const auto& r : rows)
        std::cout << r.held_out_domain << " seed=" << r.seed << " " << r.division << "/"
                  << r.level << "/" << r.mode << " jga=" << r.jga
                  << " slot_acc=" << r.slot_accuracy << "\n";
      return 0;
    }

    if (ablate->parsed()) {
      ExperimentConfig cfg = resolve_config(ablate_opts);
      std::vector<AblationRow> sweep = run_ablation(cfg, ablate_axis);
      std::cout << "wrote " << sweep.size() << " sweep rows under "
                << (fs::path(cfg.out_dir) / ("ablate_" + ablate_axis)).string() << "\n";
      return 0;
    }

    if (defaults->parsed()) {
      if (defaults_generator) {
        std::cout << json(default_generator_spec()).dump(2) << "\n";
      } else {
        ExperimentConfig cfg;
        cfg.corpus_dir = "corpus";
        std::cout << json(cfg).dump(2) << "\n";
      }
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
