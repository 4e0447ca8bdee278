#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "moedst/vocab.hpp"

namespace moedst {

using json = nlohmann::json;

// One exchange: system utterance, user utterance, and the cumulative
// dialogue state after the user's reply.
struct Turn {
  std::string system;
  std::string user;
  std::map<std::string, std::string> state;
};

struct Dialogue {
  std::string dialogue_id;
  std::vector<std::string> domains;
  std::vector<Turn> turns;
};

struct SlotDef {
  std::string domain;
  std::string name;  // "domain-slot"
  std::string description;
};

struct SlotSchema {
  std::vector<SlotDef> slots;  // ordered by domain, then name

  int total() const { return static_cast<int>(slots.size()); }

  bool contains(const std::string& name) const {
    return std::any_of(slots.begin(), slots.end(),
                       [&](const SlotDef& s) { return s.name == name; });
  }

  std::vector<std::string> domains() const {
    std::vector<std::string> out;
    for (const auto& s : slots)
      if (out.empty() || out.back() != s.domain) out.push_back(s.domain);
    return out;
  }
};

struct Corpus {
  std::vector<Dialogue> dialogues;
  SlotSchema schema;
};

struct SplitSpec {
  std::string held_out_domain;
  std::vector<std::string> train_ids;
  std::vector<std::string> test_ids;
};

// Lowercase, trim, collapse runs of whitespace. Both predicted and gold
// values pass through this before comparison.
inline std::string normalize_value(std::string_view s) {
  std::string out;
  bool pending_space = false;
  for (char raw : s) {
    char c = static_cast<char>(std::tolower(static_cast<unsigned char>(raw)));
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!out.empty()) pending_space = true;
    } else {
      if (pending_space) out += ' ';
      pending_space = false;
      out += c;
    }
  }
  return out;
}

inline std::string example_id(const std::string& dialogue_id, int turn_index) {
  return dialogue_id + "#" + std::to_string(turn_index);
}

// ---- corpus files ----
//
// A corpus directory holds two UTF-8 line-delimited JSON files:
//   dialogues.jsonl  {"dialogue_id": ..., "domains": [...],
//                     "turns": [{"system": ..., "user": ..., "state": {...}}]}
//   schema.jsonl     {"domain": ..., "slot": ..., "description": ...}

inline constexpr const char* kDialoguesFile = "dialogues.jsonl";
inline constexpr const char* kSchemaFile = "schema.jsonl";

namespace detail {

inline void validate_dialogue(const Dialogue& d, const SlotSchema& schema, int line_no) {
  auto fail = [&](const std::string& what) {
    throw std::runtime_error("corpus: line " + std::to_string(line_no) + " (" + d.dialogue_id +
                             "): " + what);
  };
  if (d.dialogue_id.empty()) fail("missing dialogue_id");
  if (d.turns.empty()) fail("dialogue has no turns");
  if (d.domains.empty()) fail("dialogue lists no domains");
  for (const Turn& t : d.turns) {
    for (const auto& [slot, value] : t.state) {
      if (!schema.contains(slot)) fail("unknown slot " + slot);
      auto dash = slot.find('-');
      if (dash == std::string::npos) fail("slot " + slot + " not formatted domain-slot");
      std::string dom = slot.substr(0, dash);
      if (std::find(d.domains.begin(), d.domains.end(), dom) == d.domains.end())
        fail("state slot " + slot + " outside the dialogue's domains");
      if (value.empty()) fail("empty value for slot " + slot);
    }
  }
}

}  // namespace detail

inline SlotSchema load_schema(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("schema: cannot read " + path);
  SlotSchema schema;
  std::string line;
  int line_no = 0;
  std::set<std::string> seen;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw std::runtime_error("schema: line " + std::to_string(line_no) + ": " + e.what());
    }
    SlotDef def{j.at("domain").get<std::string>(), j.at("slot").get<std::string>(),
                j.at("description").get<std::string>()};
    if (!seen.insert(def.name).second)
      throw std::runtime_error("schema: duplicate slot " + def.name);
    schema.slots.push_back(std::move(def));
  }
  std::stable_sort(schema.slots.begin(), schema.slots.end(), [](const SlotDef& a, const SlotDef& b) {
    return std::tie(a.domain, a.name) < std::tie(b.domain, b.name);
  });
  if (schema.slots.empty()) throw std::runtime_error("schema: no slots in " + path);
  return schema;
}

inline Corpus load_corpus(const std::string& dir) {
  namespace fs = std::filesystem;
  Corpus corpus;
  corpus.schema = load_schema((fs::path(dir) / kSchemaFile).string());
  std::string path = (fs::path(dir) / kDialoguesFile).string();
  std::ifstream f(path);
  if (!f) throw std::runtime_error("corpus: cannot read " + path);
  std::string line;
  int line_no = 0;
  std::set<std::string> ids;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw std::runtime_error("corpus: line " + std::to_string(line_no) + ": " + e.what());
    }
    Dialogue d;
    try {
      d.dialogue_id = j.at("dialogue_id").get<std::string>();
      d.domains = j.at("domains").get<std::vector<std::string>>();
      for (const auto& jt : j.at("turns")) {
        Turn t;
        t.system = jt.at("system").get<std::string>();
        t.user = jt.at("user").get<std::string>();
        t.state = jt.at("state").get<std::map<std::string, std::string>>();
        d.turns.push_back(std::move(t));
      }
    } catch (const json::exception& e) {
      throw std::runtime_error("corpus: line " + std::to_string(line_no) + ": " + e.what());
    }
    detail::validate_dialogue(d, corpus.schema, line_no);
    if (!ids.insert(d.dialogue_id).second)
      throw std::runtime_error("corpus: duplicate dialogue_id " + d.dialogue_id);
    corpus.dialogues.push_back(std::move(d));
  }
  if (corpus.dialogues.empty()) throw std::runtime_error("corpus: no dialogues in " + path);
  return corpus;
}

inline void save_corpus(const Corpus& corpus, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  {
    std::ofstream f(fs::path(dir) / kSchemaFile);
    if (!f) throw std::runtime_error("schema: cannot write in " + dir);
    for (const auto& s : corpus.schema.slots) {
      json j{{"domain", s.domain}, {"slot", s.name}, {"description", s.description}};
      f << j.dump() << "\n";
    }
  }
  std::ofstream f(fs::path(dir) / kDialoguesFile);
  if (!f) throw std::runtime_error("corpus: cannot write in " + dir);
  for (const auto& d : corpus.dialogues) {
    json turns = json::array();
    for (const auto& t : d.turns)
      turns.push_back(json{{"system", t.system}, {"user", t.user}, {"state", t.state}});
    json j{{"dialogue_id", d.dialogue_id}, {"domains", d.domains}, {"turns", turns}};
    f << j.dump() << "\n";
  }
}

// ---- serialization of model inputs ----

// "[sys] A_1 [usr] U_1 ... [sys] A_t [usr] U_t"
inline std::string serialize_context(const Dialogue& d, int turn_index) {
  if (turn_index < 0 || turn_index >= static_cast<int>(d.turns.size()))
    throw std::out_of_range("serialize_context: bad turn index");
  std::string out;
  for (int t = 0; t <= turn_index; ++t) {
    if (!out.empty()) out += ' ';
    out += "[sys] " + d.turns[static_cast<size_t>(t)].system + " [usr] " +
           d.turns[static_cast<size_t>(t)].user;
  }
  return out;
}

struct SerializedExample {
  std::string input;
  std::string target;
};

// Context plus slot prompt; the target is the slot's value at turn t, or
// "none" when absent. When the tokenized input would exceed max_tokens the
// oldest turns are dropped first; the slot suffix always survives.
inline SerializedExample serialize_example(const Dialogue& d, int turn_index, const SlotDef& slot,
                                           int max_tokens = 0) {
  if (turn_index < 0 || turn_index >= static_cast<int>(d.turns.size()))
    throw std::out_of_range("serialize_example: bad turn index");
  std::string suffix = "[slot] " + slot.name + ": " + slot.description;
  int first_turn = 0;
  std::string input;
  for (;;) {
    input = "";
    for (int t = first_turn; t <= turn_index; ++t) {
      if (!input.empty()) input += ' ';
      input += "[sys] " + d.turns[static_cast<size_t>(t)].system + " [usr] " +
               d.turns[static_cast<size_t>(t)].user;
    }
    input += ' ';
    input += suffix;
    if (max_tokens <= 0 || first_turn == turn_index ||
        static_cast<int>(tokenize(input).size()) <= max_tokens)
      break;
    ++first_turn;
  }
  const auto& state = d.turns[static_cast<size_t>(turn_index)].state;
  auto it = state.find(slot.name);
  SerializedExample ex;
  ex.input = std::move(input);
  ex.target = (it == state.end()) ? "none" : it->second;
  return ex;
}

// ---- leave-one-domain-out split ----

inline bool lists_domain(const Dialogue& d, const std::string& domain) {
  return std::find(d.domains.begin(), d.domains.end(), domain) != d.domains.end();
}

inline SplitSpec leave_one_domain_out(const Corpus& corpus, const std::string& domain) {
  std::set<std::string> available;
  for (const auto& d : corpus.dialogues)
    for (const auto& dom : d.domains) available.insert(dom);
  if (!available.count(domain)) {
    std::string msg = "split: unknown domain " + domain + "; corpus has:";
    for (const auto& dom : available) msg += " " + dom;
    throw std::invalid_argument(msg);
  }
  SplitSpec split;
  split.held_out_domain = domain;
  for (const auto& d : corpus.dialogues)
    (lists_domain(d, domain) ? split.test_ids : split.train_ids).push_back(d.dialogue_id);
  if (split.train_ids.empty())
    throw std::runtime_error("split: every dialogue lists domain " + domain +
                             "; training set would be empty");
  return split;
}

inline std::vector<const Dialogue*> select_dialogues(const Corpus& corpus,
                                                     const std::vector<std::string>& ids) {
  std::map<std::string, const Dialogue*> by_id;
  for (const auto& d : corpus.dialogues) by_id[d.dialogue_id] = &d;
  std::vector<const Dialogue*> out;
  out.reserve(ids.size());
  for (const auto& id : ids) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw std::invalid_argument("split: unknown dialogue id " + id);
    out.push_back(it->second);
  }
  return out;
}

}  // namespace moedst
