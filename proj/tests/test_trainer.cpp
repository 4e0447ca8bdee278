#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "moedst/datagen.hpp"
#include "moedst/trainer.hpp"

using namespace moedst;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_config(int vocab) {
  ModelConfig cfg;
  cfg.vocab_size = vocab;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.n_enc_layers = 1;
  cfg.n_dec_layers = 1;
  cfg.d_ff = 32;
  cfg.adapter_bottleneck_dim = 4;
  cfg.max_seq_len = 48;
  return cfg;
}

struct Fixture {
  Corpus corpus;
  std::vector<const Dialogue*> dialogues;
  TokenVocab vocab;
  BackboneParams backbone;
  std::vector<TrainExample> examples;

  static Fixture make(int n_dialogues, uint64_t seed) {
    GeneratorSpec spec = default_generator_spec();
    spec.n_dialogues = n_dialogues;
    Fixture f;
    f.corpus = generate_synthetic_corpus(spec, seed);
    for (const auto& d : f.corpus.dialogues) f.dialogues.push_back(&d);
    f.vocab = build_vocab(f.dialogues, f.corpus.schema);
    ModelConfig cfg = tiny_config(f.vocab.size());
    f.backbone = init_backbone(cfg, seed);
    f.examples = make_examples(f.dialogues, f.corpus.schema, f.vocab, cfg.max_seq_len);
    return f;
  }
};

std::vector<const TrainExample*> ptrs(const std::vector<TrainExample>& v, size_t limit = 0) {
  std::vector<const TrainExample*> out;
  for (const auto& e : v) {
    out.push_back(&e);
    if (limit && out.size() == limit) break;
  }
  return out;
}

TrainConfig quick_train(int epochs, double lr = 1e-3) {
  TrainConfig tc;
  tc.learning_rate = lr;
  tc.batch_size = 8;
  tc.epochs = epochs;
  tc.seed = 5;
  return tc;
}

}  // namespace

TEST_CASE("train config validation") {
  TrainConfig tc;
  CHECK_NOTHROW(tc.validate());
  tc.epochs = 0;
  CHECK_THROWS_AS(tc.validate(), std::invalid_argument);
  tc = TrainConfig{};
  tc.learning_rate = 0;
  CHECK_THROWS_AS(tc.validate(), std::invalid_argument);
}

TEST_CASE("make_examples covers the dialogue's own slots plus one negative per turn") {
  Fixture f = Fixture::make(6, 3);
  size_t i = 0;
  for (const auto* d : f.dialogues) {
    for (int t = 0; t < static_cast<int>(d->turns.size()); ++t) {
      int own = 0, foreign = 0;
      std::string id = example_id(d->dialogue_id, t);
      while (i < f.examples.size() && f.examples[i].example_id == id) {
        // recover the queried slot from the prompt suffix of the input
        const TrainExample& ex = f.examples[i];
        std::string input;
        for (int tok : ex.input_ids) input += f.vocab.token(tok) + " ";
        const SlotDef* queried = nullptr;
        for (const auto& slot : f.corpus.schema.slots) {
          std::string marker = "[slot] ";
          for (const auto& w : tokenize(slot.name)) marker += w + " ";
          if (input.find(marker) != std::string::npos) queried = &slot;
        }
        REQUIRE(queried != nullptr);
        bool is_own = std::find(d->domains.begin(), d->domains.end(), queried->domain) !=
                      d->domains.end();
        (is_own ? own : foreign)++;
        // slot-target fidelity: value in the turn's state, or the none token
        auto it = d->turns[static_cast<size_t>(t)].state.find(queried->name);
        std::string expected = it == d->turns[static_cast<size_t>(t)].state.end()
                                   ? "none"
                                   : it->second;
        CHECK(f.vocab.decode(ex.target_ids) == expected);
        ++i;
      }
      int own_expected = 0;
      for (const auto& slot : f.corpus.schema.slots)
        if (std::find(d->domains.begin(), d->domains.end(), slot.domain) != d->domains.end())
          ++own_expected;
      CHECK(own == own_expected);
      CHECK(foreign <= 1);
    }
  }
  CHECK(i == f.examples.size());
}

TEST_CASE("expert training memorizes a small subset of the seen data") {
  // Experts adapt a competent frozen backbone (the production setting), so
  // pretrain first, then drive one 8-example subset to memorization.
  GeneratorSpec spec = default_generator_spec();
  spec.n_dialogues = 12;
  Corpus corpus = generate_synthetic_corpus(spec, 7);
  std::vector<const Dialogue*> dialogues;
  for (const auto& d : corpus.dialogues) dialogues.push_back(&d);
  TokenVocab vocab = build_vocab(dialogues, corpus.schema);
  ModelConfig cfg = tiny_config(vocab.size());
  cfg.max_seq_len = 64;
  auto examples = make_examples(dialogues, corpus.schema, vocab, cfg.max_seq_len);

  TrainConfig pc = quick_train(150);
  pc.batch_size = 16;
  pc.seed = 3;
  PretrainResult pr = pretrain_backbone(examples, cfg, pc);

  // a subset mixing value and none targets
  std::vector<const TrainExample*> subset;
  int vals = 0;
  for (const auto& ex : examples) {
    bool isval = vocab.decode(ex.target_ids) != "none";
    if (isval && vals < 3) {
      subset.push_back(&ex);
      ++vals;
    } else if (!isval && subset.size() - static_cast<size_t>(vals) < 5) {
      subset.push_back(&ex);
    }
    if (subset.size() == 8) break;
  }
  REQUIRE(subset.size() == 8);

  TrainConfig tc = quick_train(300, 3e-3);
  tc.weight_decay = 0.0;
  ExpertRecord rec = train_expert(subset, pr.backbone, tc, 0);
  CHECK(rec.n_examples == 8);
  CHECK(static_cast<int>(rec.loss_curve.size()) == tc.epochs);
  CHECK(rec.loss_curve.back() < 0.05);
}

TEST_CASE("expert training leaves the backbone untouched and is deterministic") {
  Fixture f = Fixture::make(3, 11);
  auto subset = ptrs(f.examples, 24);
  TrainConfig tc = quick_train(2);
  uint64_t before = f.backbone.digest();
  ExpertRecord a = train_expert(subset, f.backbone, tc, 0);
  CHECK(f.backbone.digest() == before);
  ExpertRecord b = train_expert(subset, f.backbone, tc, 0);
  CHECK(a.adapter.digest() == b.adapter.digest());
  for (const auto& [name, t] : a.adapter.tensors)
    CHECK(t.data == b.adapter.tensors.at(name).data);  // bitwise
  CHECK(a.loss_curve.back() <= a.loss_curve.front());
  CHECK_THROWS_AS(train_expert({}, f.backbone, tc, 0), std::invalid_argument);
}

TEST_CASE("train_all_experts") {
  Fixture f = Fixture::make(8, 13);
  // three-way assignment by turn hash, plus every id covered
  SubsetAssignment assign;
  assign.k = 3;
  {
    int i = 0;
    std::set<std::string> ids;
    for (const auto& ex : f.examples) ids.insert(ex.example_id);
    for (const auto& id : ids) assign.assignment[id] = i++ % 3;
  }
  TrainConfig tc = quick_train(1);

  SUBCASE("records align with subsets and shapes are congruent") {
    auto records = train_all_experts(assign, f.examples, f.backbone, tc, 1);
    REQUIRE(records.size() == 3);
    int covered = 0;
    for (int k = 0; k < 3; ++k) {
      CHECK(records[static_cast<size_t>(k)].subset == k);
      covered += records[static_cast<size_t>(k)].n_examples;
      CHECK(shape_congruent(records[0].adapter, records[static_cast<size_t>(k)].adapter));
    }
    CHECK(covered == static_cast<int>(f.examples.size()));
  }

  SUBCASE("sequential and parallel execution produce identical experts") {
    auto seq = train_all_experts(assign, f.examples, f.backbone, tc, 1);
    auto par = train_all_experts(assign, f.examples, f.backbone, tc, 3);
    for (int k = 0; k < 3; ++k)
      CHECK(seq[static_cast<size_t>(k)].adapter.digest() ==
            par[static_cast<size_t>(k)].adapter.digest());
  }

  SUBCASE("experts are independent of subset training order") {
    auto all = train_all_experts(assign, f.examples, f.backbone, tc, 1);
    // train subset 2 alone, in isolation, with its per-expert seed
    std::vector<const TrainExample*> subset2;
    for (const auto& ex : f.examples)
      if (assign.assignment.at(ex.example_id) == 2) subset2.push_back(&ex);
    TrainConfig tc2 = tc;
    tc2.seed = tc.seed + 2;
    ExpertRecord solo = train_expert(subset2, f.backbone, tc2, 2);
    CHECK(solo.adapter.digest() == all[2].adapter.digest());
  }

  SUBCASE("K = 1 equals training one adapter on everything") {
    SubsetAssignment one;
    one.k = 1;
    for (const auto& [id, k] : assign.assignment) one.assignment[id] = 0;
    auto records = train_all_experts(one, f.examples, f.backbone, tc, 1);
    ExpertRecord direct = train_expert(ptrs(f.examples), f.backbone, tc, 0);
    CHECK(records[0].adapter.digest() == direct.adapter.digest());
  }

  SUBCASE("missing example in the partition is an error with the subset attached") {
    SubsetAssignment broken = assign;
    broken.assignment.erase(broken.assignment.begin());
    CHECK_THROWS_AS(train_all_experts(broken, f.examples, f.backbone, tc, 1),
                    std::invalid_argument);
  }
}

TEST_CASE("expert manifest round trip") {
  ExpertManifest m;
  m.division_path = "division_cluster.jsonl";
  m.experts = {{0, "experts/expert_0.ckpt", 120}, {1, "experts/expert_1.ckpt", 80}};
  fs::path dir = fs::temp_directory_path() / "moedst_manifest_test";
  fs::create_directories(dir);
  std::string path = (dir / "manifest.json").string();
  save_manifest(m, path);
  ExpertManifest loaded = load_manifest(path);
  CHECK(loaded.division_path == m.division_path);
  REQUIRE(loaded.experts.size() == 2);
  CHECK(loaded.experts[1].subset == 1);
  CHECK(loaded.experts[1].checkpoint_path == "experts/expert_1.ckpt");
  CHECK(loaded.experts[1].n_examples == 80);
}
