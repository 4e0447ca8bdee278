#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "moedst/data.hpp"
#include "moedst/datagen.hpp"
#include "moedst/metrics.hpp"

using namespace moedst;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("moedst_data_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Corpus fixture_corpus() {
  Corpus c;
  c.schema.slots = {
      {"hotel", "hotel-area", "the area of the hotel"},
      {"hotel", "hotel-day", "the day of the hotel booking"},
      {"taxi", "taxi-destination", "the destination of the taxi ride"},
  };
  Dialogue d1;
  d1.dialogue_id = "d1";
  d1.domains = {"hotel"};
  d1.turns = {
      {"hello , how can i help you ?", "i need a hotel in the north", {{"hotel-area", "north"}}},
      {"what day would you like ?", "on friday",
       {{"hotel-area", "north"}, {"hotel-day", "friday"}}},
  };
  Dialogue d2;
  d2.dialogue_id = "d2";
  d2.domains = {"taxi", "hotel"};
  d2.turns = {
      {"hello , how can i help you ?", "a taxi to ely please", {{"taxi-destination", "ely"}}},
  };
  Dialogue d3;
  d3.dialogue_id = "d3";
  d3.domains = {"taxi"};
  d3.turns = {
      {"hello", "going to london", {{"taxi-destination", "london"}}},
  };
  c.dialogues = {d1, d2, d3};
  return c;
}

}  // namespace

TEST_CASE("tokenizer splits punctuation but keeps bracketed markers") {
  auto toks = tokenize("[sys] Hello there! [usr] hotel-area: NORTH");
  std::vector<std::string> expected = {"[sys]", "hello", "there", "!",     "[usr]",
                                       "hotel", "-",     "area",  ":",     "north"};
  CHECK(toks == expected);
}

TEST_CASE("vocab round trips through its file format") {
  TokenVocab v = TokenVocab::from_texts({"the north wind", "and the sun"});
  fs::path dir = scratch_dir("vocab");
  v.save((dir / "vocab.txt").string());
  TokenVocab loaded = TokenVocab::load((dir / "vocab.txt").string());
  CHECK(loaded == v);
  CHECK(loaded.lookup("north") == v.lookup("north"));
  CHECK(loaded.lookup("never-seen-token") == kUnk);
}

TEST_CASE("corpus save/load round trip with validation") {
  Corpus c = fixture_corpus();
  fs::path dir = scratch_dir("corpus");
  save_corpus(c, dir.string());
  Corpus loaded = load_corpus(dir.string());
  REQUIRE(loaded.dialogues.size() == c.dialogues.size());
  CHECK(loaded.schema.total() == c.schema.total());
  CHECK(loaded.dialogues[0].turns[1].state.at("hotel-day") == "friday");
  CHECK(loaded.dialogues[1].domains == std::vector<std::string>{"taxi", "hotel"});
}

TEST_CASE("empty and malformed corpora are rejected with line numbers") {
  fs::path dir = scratch_dir("badcorpus");
  {
    std::ofstream s(dir / kSchemaFile);
    s << R"({"domain":"hotel","slot":"hotel-area","description":"x"})" << "\n";
    std::ofstream f(dir / kDialoguesFile);
  }
  CHECK_THROWS_WITH_AS(load_corpus(dir.string()), doctest::Contains("no dialogues"),
                       std::runtime_error);
  {
    std::ofstream f(dir / kDialoguesFile);
    f << R"({"dialogue_id":"d1","domains":["hotel"],"turns":[{"system":"s","user":"u",)"
      << R"("state":{"hotel-area":"north"}}]})" << "\n";
    f << "{not json\n";
  }
  CHECK_THROWS_WITH_AS(load_corpus(dir.string()), doctest::Contains("line 2"),
                       std::runtime_error);
  {
    std::ofstream f(dir / kDialoguesFile);
    f << R"({"dialogue_id":"d1","domains":["hotel"],"turns":[{"system":"s","user":"u",)"
      << R"("state":{"restaurant-food":"thai"}}]})" << "\n";
  }
  CHECK_THROWS_WITH_AS(load_corpus(dir.string()), doctest::Contains("unknown slot"),
                       std::runtime_error);
  {
    std::ofstream s(dir / kSchemaFile, std::ios::trunc);
  }
  CHECK_THROWS_WITH_AS(load_corpus(dir.string()), doctest::Contains("no slots"),
                       std::runtime_error);
}

TEST_CASE("serialize_example format") {
  Corpus c = fixture_corpus();
  const SlotDef& area = c.schema.slots[0];

  SUBCASE("golden strings for the fixture dialogue") {
    SerializedExample ex = serialize_example(c.dialogues[0], 1, area);
    CHECK(ex.input ==
          "[sys] hello , how can i help you ? [usr] i need a hotel in the north "
          "[sys] what day would you like ? [usr] on friday "
          "[slot] hotel-area: the area of the hotel");
    CHECK(ex.target == "north");
  }

  SUBCASE("absent slot targets the literal none") {
    SerializedExample ex = serialize_example(c.dialogues[2], 0, area);
    CHECK(ex.target == "none");
  }

  SUBCASE("single-turn dialogue has exactly one marker pair") {
    SerializedExample ex = serialize_example(c.dialogues[2], 0, area);
    auto toks = tokenize(ex.input);
    CHECK(std::count(toks.begin(), toks.end(), "[sys]") == 1);
    CHECK(std::count(toks.begin(), toks.end(), "[usr]") == 1);
    CHECK(std::count(toks.begin(), toks.end(), "[slot]") == 1);
  }

  SUBCASE("truncation drops the oldest turns and never the slot suffix") {
    SerializedExample full = serialize_example(c.dialogues[0], 1, area);
    int full_tokens = static_cast<int>(tokenize(full.input).size());
    SerializedExample cut = serialize_example(c.dialogues[0], 1, area, full_tokens - 2);
    CHECK(cut.input ==
          "[sys] what day would you like ? [usr] on friday "
          "[slot] hotel-area: the area of the hotel");
    // even an impossible budget keeps the current turn and the suffix
    SerializedExample minimal = serialize_example(c.dialogues[0], 1, area, 1);
    CHECK(minimal.input == cut.input);
  }
}

TEST_CASE("leave-one-domain-out split") {
  Corpus c = fixture_corpus();

  SUBCASE("membership matches a naive filter") {
    SplitSpec split = leave_one_domain_out(c, "hotel");
    std::set<std::string> train(split.train_ids.begin(), split.train_ids.end());
    std::set<std::string> test(split.test_ids.begin(), split.test_ids.end());
    for (const auto& d : c.dialogues) {
      bool has = std::find(d.domains.begin(), d.domains.end(), "hotel") != d.domains.end();
      CHECK(test.count(d.dialogue_id) == (has ? 1u : 0u));
      CHECK(train.count(d.dialogue_id) == (has ? 0u : 1u));
    }
    CHECK(split.train_ids == std::vector<std::string>{"d3"});
  }

  SUBCASE("split soundness: no training state mentions the held-out domain") {
    SplitSpec split = leave_one_domain_out(c, "hotel");
    for (const auto* d : select_dialogues(c, split.train_ids))
      for (const auto& t : d->turns)
        for (const auto& [slot, value] : t.state) CHECK(slot.rfind("hotel-", 0) != 0);
  }

  SUBCASE("unknown domain lists the available ones") {
    CHECK_THROWS_WITH_AS(leave_one_domain_out(c, "flight"), doctest::Contains("hotel"),
                         std::invalid_argument);
  }

  SUBCASE("a domain present everywhere empties the training set") {
    Corpus all_hotel = fixture_corpus();
    all_hotel.dialogues.erase(all_hotel.dialogues.begin() + 1, all_hotel.dialogues.end());
    CHECK_THROWS_WITH_AS(leave_one_domain_out(all_hotel, "hotel"),
                         doctest::Contains("training set would be empty"), std::runtime_error);
  }
}

namespace {

StatesByTurn states_of(const std::vector<std::pair<std::string, TurnState>>& turns) {
  StatesByTurn out;
  for (size_t i = 0; i < turns.size(); ++i) out[{turns[i].first, static_cast<int>(i)}] = turns[i].second;
  return out;
}

}  // namespace

TEST_CASE("joint goal accuracy") {
  SlotSchema schema;
  schema.slots = {{"hotel", "hotel-area", "x"}, {"hotel", "hotel-day", "y"}};

  SUBCASE("identical states score 1.0") {
    StatesByTurn gold = states_of({{"d1", {{"hotel-area", "north"}}}});
    CHECK(joint_goal_accuracy(gold, gold) == 1.0);
    CHECK(slot_accuracy(gold, gold, schema) == 1.0);
  }

  SUBCASE("one wrong slot in one of two turns scores 0.5") {
    StatesByTurn gold = states_of(
        {{"d1", {{"hotel-area", "north"}}}, {"d2", {{"hotel-area", "south"}}}});
    StatesByTurn pred = states_of(
        {{"d1", {{"hotel-area", "north"}}}, {"d2", {{"hotel-area", "west"}}}});
    CHECK(joint_goal_accuracy(pred, gold) == 0.5);
  }

  SUBCASE("normalization: case and whitespace do not matter") {
    StatesByTurn gold = states_of({{"d1", {{"hotel-area", "North  East"}}}});
    StatesByTurn pred = states_of({{"d1", {{"hotel-area", "north east"}}}});
    CHECK(joint_goal_accuracy(pred, gold) == 1.0);
  }

  SUBCASE("predicted none equals absent slot") {
    StatesByTurn gold = states_of({{"d1", {}}});
    StatesByTurn pred = states_of({{"d1", {{"hotel-area", "none"}}}});
    CHECK(joint_goal_accuracy(pred, gold) == 1.0);
  }

  SUBCASE("misaligned keys are an error") {
    StatesByTurn gold = states_of({{"d1", {}}});
    StatesByTurn pred = states_of({{"d2", {}}});
    CHECK_THROWS_AS(joint_goal_accuracy(pred, gold), std::invalid_argument);
  }
}

TEST_CASE("slot accuracy counting") {
  SlotSchema schema;
  for (int i = 0; i < 10; ++i)
    schema.slots.push_back({"hotel", "hotel-s" + std::to_string(i), "d"});

  SUBCASE("one slot wrong of 10 slots over T turns") {
    const int turns = 3;
    std::vector<std::pair<std::string, TurnState>> rows;
    for (int t = 0; t < turns; ++t) rows.push_back({"d" + std::to_string(t), {{"hotel-s0", "a"}}});
    StatesByTurn gold = states_of(rows);
    rows[0].second["hotel-s0"] = "b";
    StatesByTurn pred = states_of(rows);
    CHECK(slot_accuracy(pred, gold, schema) ==
          doctest::Approx((10.0 * turns - 1) / (10.0 * turns)));
    CHECK(joint_goal_accuracy(pred, gold) == doctest::Approx((turns - 1.0) / turns));
  }
}

TEST_CASE("five-turn mixed fixture matches hand counts") {
  SlotSchema schema;
  schema.slots = {{"hotel", "hotel-area", "x"},
                  {"hotel", "hotel-day", "y"},
                  {"taxi", "taxi-destination", "z"}};
  // hand-scored: turns 0,3 fully correct; 1 wrong value; 2 spurious slot;
  // 4 missing slot -> JGA = 2/5
  StatesByTurn gold = states_of({
      {"a", {{"hotel-area", "north"}}},
      {"a", {{"hotel-area", "north"}, {"hotel-day", "friday"}}},
      {"b", {}},
      {"b", {{"taxi-destination", "ely"}}},
      {"c", {{"hotel-area", "south"}, {"taxi-destination", "york"}}},
  });
  StatesByTurn pred = states_of({
      {"a", {{"hotel-area", "north"}}},
      {"a", {{"hotel-area", "north"}, {"hotel-day", "monday"}}},
      {"b", {{"hotel-day", "sunday"}}},
      {"b", {{"taxi-destination", "ely"}}},
      {"c", {{"hotel-area", "south"}}},
  });
  CHECK(joint_goal_accuracy(pred, gold) == doctest::Approx(2.0 / 5.0));
  // slot pairs: 5 turns x 3 slots = 15; wrong: a1 hotel-day, b0 hotel-day,
  // c0 taxi-destination -> 12/15
  CHECK(slot_accuracy(pred, gold, schema) == doctest::Approx(12.0 / 15.0));

  // JGA = 1 <=> slot accuracy = 1 (both directions on this fixture)
  CHECK(joint_goal_accuracy(gold, gold) == 1.0);
  CHECK(slot_accuracy(gold, gold, schema) == 1.0);
  CHECK(joint_goal_accuracy(pred, gold) < 1.0);
  CHECK(slot_accuracy(pred, gold, schema) < 1.0);
}

TEST_CASE("metrics are permutation invariant over turn insertion order") {
  SlotSchema schema;
  schema.slots = {{"hotel", "hotel-area", "x"}};
  StatesByTurn gold = states_of({{"a", {{"hotel-area", "north"}}}, {"b", {}}});
  StatesByTurn gold_rev;
  for (auto it = gold.rbegin(); it != gold.rend(); ++it) gold_rev[it->first] = it->second;
  StatesByTurn pred = states_of({{"a", {{"hotel-area", "south"}}}, {"b", {}}});
  CHECK(joint_goal_accuracy(pred, gold) == joint_goal_accuracy(pred, gold_rev));
}

TEST_CASE("synthetic corpus generator") {
  GeneratorSpec spec = default_generator_spec();
  spec.n_dialogues = 100;

  SUBCASE("exactly the requested number of dialogues, zero validation errors") {
    Corpus c = generate_synthetic_corpus(spec, 5);
    CHECK(c.dialogues.size() == 100);
    fs::path dir = scratch_dir("gen");
    save_corpus(c, dir.string());
    Corpus loaded = load_corpus(dir.string());  // load_corpus validates
    CHECK(loaded.dialogues.size() == 100);
  }

  SUBCASE("deterministic: same spec and seed give identical files") {
    fs::path a = scratch_dir("gen_a");
    fs::path b = scratch_dir("gen_b");
    save_corpus(generate_synthetic_corpus(spec, 9), a.string());
    save_corpus(generate_synthetic_corpus(spec, 9), b.string());
    for (const char* f : {kDialoguesFile, kSchemaFile}) {
      std::ifstream fa(a / f), fb(b / f);
      std::stringstream sa, sb;
      sa << fa.rdbuf();
      sb << fb.rdbuf();
      CHECK(sa.str() == sb.str());
    }
  }

  SUBCASE("every state value appears verbatim in some utterance of its context") {
    Corpus c = generate_synthetic_corpus(spec, 11);
    for (const auto& d : c.dialogues) {
      std::string context;
      for (const auto& turn : d.turns) {
        context += " " + turn.system + " " + turn.user;
        for (const auto& [slot, value] : turn.state)
          CHECK(context.find(value) != std::string::npos);
      }
    }
  }

  SUBCASE("multi-domain share lands between 30 and 50 percent") {
    GeneratorSpec big = default_generator_spec();
    big.n_dialogues = 1000;
    Corpus c = generate_synthetic_corpus(big, 3);
    int multi = 0;
    for (const auto& d : c.dialogues) multi += d.domains.size() > 1 ? 1 : 0;
    double share = static_cast<double>(multi) / 1000.0;
    CHECK(share >= 0.30);
    CHECK(share <= 0.50);
  }

  SUBCASE("states are cumulative along each dialogue") {
    Corpus c = generate_synthetic_corpus(spec, 13);
    for (const auto& d : c.dialogues) {
      for (size_t t = 1; t < d.turns.size(); ++t) {
        for (const auto& [slot, value] : d.turns[t - 1].state)
          CHECK(d.turns[t].state.count(slot) == 1);
      }
    }
  }

  SUBCASE("a spec without cross-domain type overlap warns") {
    GeneratorSpec lonely;
    lonely.n_dialogues = 5;
    lonely.value_pools = {{"a", {"x", "y"}}, {"b", {"p", "q"}}, {"c", {"m", "n"}}};
    lonely.domains = {
        {"one", {"one"}, {{"area", "a", "the area of one"}}},
        {"two", {"two"}, {{"day", "b", "the day of two"}}},
        {"three", {"three"}, {{"people", "c", "the people of three"}}},
    };
    std::ostringstream warn;
    generate_synthetic_corpus(lonely, 1, &warn);
    CHECK(warn.str().find("zero-shot") != std::string::npos);
    // the default spec does not warn
    std::ostringstream quiet;
    generate_synthetic_corpus(spec, 1, &quiet);
    CHECK(quiet.str().empty());
  }
}
