#pragma once

#include <algorithm>
#include <iostream>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "moedst/data.hpp"
#include "moedst/rng.hpp"

namespace moedst {

// A slot template inside a domain. "type" names the shared value pool; slots
// of the same type in different domains are what makes zero-shot transfer
// measurable at all.
struct GenSlot {
  std::string suffix;       // e.g. "area"; full name becomes "<domain>-area"
  std::string type;         // value pool id
  std::string description;  // natural-language prompt text
};

struct GenDomain {
  std::string name;
  std::vector<std::string> aliases;  // surface forms used in utterances
  std::vector<GenSlot> slots;
};

struct GeneratorSpec {
  int n_dialogues = 2000;
  double multi_domain_fraction = 0.65;  // among dialogues with >= 2 turns
  std::vector<double> turn_weights = {0.45, 0.40, 0.15};  // P(1), P(2), P(3) turns
  std::map<std::string, std::vector<std::string>> value_pools;
  std::vector<GenDomain> domains;
};

inline void to_json(json& j, const GenSlot& s) {
  j = json{{"suffix", s.suffix}, {"type", s.type}, {"description", s.description}};
}
inline void from_json(const json& j, GenSlot& s) {
  j.at("suffix").get_to(s.suffix);
  j.at("type").get_to(s.type);
  j.at("description").get_to(s.description);
}
inline void to_json(json& j, const GenDomain& d) {
  j = json{{"name", d.name}, {"aliases", d.aliases}, {"slots", d.slots}};
}
inline void from_json(const json& j, GenDomain& d) {
  j.at("name").get_to(d.name);
  d.aliases.clear();
  if (j.contains("aliases")) j.at("aliases").get_to(d.aliases);
  if (d.aliases.empty()) d.aliases = {d.name};
  j.at("slots").get_to(d.slots);
}
inline void to_json(json& j, const GeneratorSpec& s) {
  j = json{{"n_dialogues", s.n_dialogues},
           {"multi_domain_fraction", s.multi_domain_fraction},
           {"turn_weights", s.turn_weights},
           {"value_pools", s.value_pools},
           {"domains", s.domains}};
}
inline void from_json(const json& j, GeneratorSpec& s) {
  j.at("n_dialogues").get_to(s.n_dialogues);
  j.at("multi_domain_fraction").get_to(s.multi_domain_fraction);
  j.at("turn_weights").get_to(s.turn_weights);
  j.at("value_pools").get_to(s.value_pools);
  j.at("domains").get_to(s.domains);
}

// Four booking domains whose slot types overlap pairwise, so every held-out
// domain leaves at least one seen domain per slot type.
inline GeneratorSpec default_generator_spec() {
  GeneratorSpec spec;
  spec.value_pools = {
      {"location", {"north", "south", "east", "west", "centre"}},
      {"place",
       {"cambridge", "london", "norwich", "ely", "peterborough", "ipswich", "stansted",
        "birmingham"}},
      {"day", {"monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday"}},
      {"count", {"one", "two", "three", "four", "five", "six", "seven", "eight"}},
      {"time",
       {"five pm", "six pm", "seven pm", "nine am", "ten am", "noon", "eight thirty", "midnight"}},
  };
  spec.domains = {
      {"hotel",
       {"hotel", "guesthouse"},
       {{"area", "location", "the area of the hotel"},
        {"day", "day", "the day of the hotel booking"},
        {"people", "count", "the number of people for the hotel booking"}}},
      {"restaurant",
       {"restaurant", "bistro"},
       {{"area", "location", "the area of the restaurant"},
        {"day", "day", "the day of the restaurant booking"},
        {"people", "count", "the number of people for the restaurant booking"}}},
      {"taxi",
       {"taxi", "cab"},
       {{"area", "location", "the pickup area of the taxi ride"},
        {"destination", "place", "the destination of the taxi ride"},
        {"leave", "time", "the leaving time of the taxi ride"}}},
      {"train",
       {"train", "railway"},
       {{"day", "day", "the day of the train trip"},
        {"destination", "place", "the destination of the train trip"},
        {"leave", "time", "the leaving time of the train trip"},
        {"people", "count", "the number of people for the train trip"}}},
  };
  return spec;
}

namespace detail {

// Three semantic archetypes cut across domains: contexts about places,
// about dates and times, and about party sizes. Each archetype keeps its own
// lexical register so the semantic areas are separable in embedding space.
inline std::string archetype_of(const std::string& type) {
  static const std::map<std::string, std::string> m = {{"location", "where"},
                                                       {"place", "where"},
                                                       {"day", "when"},
                                                       {"time", "when"},
                                                       {"count", "howmany"}};
  auto it = m.find(type);
  return it == m.end() ? type : it->second;
}

struct PhrasePair {
  std::string ask;     // system side
  std::string inform;  // user side, {v} is the value
};

// The first system turn is empty, as in task-oriented logs where the user
// opens the conversation.
inline const std::vector<std::string>& followups() {
  static const std::vector<std::string> v = {
      "anything else ?",
      "can i help with anything else ?",
      "what else can i do for you ?",
  };
  return v;
}

inline const std::vector<std::string>& request_stems() {
  static const std::vector<std::string> v = {
      "i am looking for a {d}",
      "i need a {d}",
      "can you find me a {d}",
      "i would like a {d}",
      "please get me a {d}",
  };
  return v;
}

// Each suffix keeps a distinctive anchor word right next to the value so the
// cue transfers across domains.
inline const std::vector<PhrasePair>& phrases_for(const std::string& suffix) {
  static const std::map<std::string, std::vector<PhrasePair>> bank = {
      {"area",
       {{"what area would you prefer ?", "in the {v} area"},
        {"which area should i search ?", "in the {v} area please"},
        {"do you have a preferred area ?", "somewhere in the {v} area"}}},
      {"destination",
       {{"where will you be going ?", "going to {v}"},
        {"what is the destination ?", "heading to {v}"},
        {"where would you like to go ?", "travelling to {v}"}}},
      {"departure",
       {{"where are you departing from ?", "departing from {v}"},
        {"where should it pick you up ?", "starting from {v}"},
        {"what is the departure point ?", "setting off from {v}"}}},
      {"day",
       {{"what day would you like ?", "on {v}"},
        {"which day works for you ?", "on {v} please"},
        {"for what day should i book ?", "on {v} if possible"}}},
      {"leave",
       {{"what time should it leave ?", "leaving at {v}"},
        {"when would you like to depart ?", "at {v}"},
        {"any preferred departure time ?", "departing at {v}"}}},
      {"people",
       {{"how many people will there be ?", "for {v} people"},
        {"for how many guests ?", "{v} people"},
        {"what size is your party ?", "a party of {v}"}}},
  };
  auto it = bank.find(suffix);
  if (it != bank.end()) return it->second;
  // generic carrier for suffixes outside the built-in bank
  thread_local std::map<std::string, std::vector<PhrasePair>> generic;
  auto [git, fresh] = generic.try_emplace(
      suffix, std::vector<PhrasePair>{
                  {"what " + suffix + " would you like ?", "the " + suffix + " should be {v}"},
                  {"which " + suffix + " do you prefer ?", "make the " + suffix + " {v}"}});
  return git->second;
}

inline std::string fill(std::string tmpl, const std::string& key, const std::string& value) {
  auto pos = tmpl.find(key);
  if (pos != std::string::npos) tmpl.replace(pos, key.size(), value);
  return tmpl;
}

}  // namespace detail

// Validates type overlap; returns the set of types that never cross domains.
inline std::vector<std::string> single_domain_types(const GeneratorSpec& spec) {
  std::map<std::string, std::set<std::string>> domains_of_type;
  for (const auto& d : spec.domains)
    for (const auto& s : d.slots) domains_of_type[s.type].insert(d.name);
  std::vector<std::string> lonely;
  for (auto& [type, doms] : domains_of_type)
    if (doms.size() < 2) lonely.push_back(type);
  return lonely;
}

// Deterministic templated corpus: each turn realizes 1-2 slots of one
// archetype, states are cumulative, and every state value appears verbatim
// in an utterance of its context.
inline Corpus generate_synthetic_corpus(const GeneratorSpec& spec, uint64_t seed,
                                        std::ostream* warnings = &std::cerr) {
  if (spec.domains.size() < 3)
    throw std::invalid_argument("generator: need at least 3 domains");
  if (spec.n_dialogues <= 0) throw std::invalid_argument("generator: n_dialogues must be positive");
  for (const auto& d : spec.domains) {
    if (d.slots.empty())
      throw std::invalid_argument("generator: domain " + d.name + " has no slots");
    for (const auto& s : d.slots)
      if (!spec.value_pools.count(s.type))
        throw std::invalid_argument("generator: slot type " + s.type + " has no value pool");
  }
  auto lonely = single_domain_types(spec);
  if (warnings && lonely.size() == [&] {
        std::set<std::string> all;
        for (const auto& d : spec.domains)
          for (const auto& s : d.slots) all.insert(s.type);
        return all.size();
      }()) {
    *warnings << "warning: no slot type appears in more than one domain; "
                 "zero-shot transfer will be unmeasurable\n";
  }

  Corpus corpus;
  for (const auto& d : spec.domains)
    for (const auto& s : d.slots)
      corpus.schema.slots.push_back({d.name, d.name + "-" + s.suffix, s.description});
  std::stable_sort(corpus.schema.slots.begin(), corpus.schema.slots.end(),
                   [](const SlotDef& a, const SlotDef& b) {
                     return std::tie(a.domain, a.name) < std::tie(b.domain, b.name);
                   });

  Rng rng(seed);
  for (int n = 0; n < spec.n_dialogues; ++n) {
    Dialogue dlg;
    dlg.dialogue_id = "d" + std::to_string(100000 + n);

    int n_turns = 1 + static_cast<int>(rng.weighted_choice(spec.turn_weights));
    size_t first_dom = rng.next_below(spec.domains.size());
    std::vector<size_t> turn_domain(static_cast<size_t>(n_turns), first_dom);
    bool multi = n_turns >= 2 && rng.uniform() < spec.multi_domain_fraction;
    if (multi) {
      size_t second = rng.next_below(spec.domains.size() - 1);
      if (second >= first_dom) ++second;
      int switch_at = rng.next_int(1, n_turns);
      for (int t = switch_at; t < n_turns; ++t) turn_domain[static_cast<size_t>(t)] = second;
      dlg.domains = {spec.domains[first_dom].name, spec.domains[second].name};
    } else {
      dlg.domains = {spec.domains[first_dom].name};
    }

    std::map<std::string, std::string> state;
    for (int t = 0; t < n_turns; ++t) {
      const GenDomain& dom = spec.domains[turn_domain[static_cast<size_t>(t)]];
      bool fresh_domain = t == 0 || turn_domain[static_cast<size_t>(t)] !=
                                        turn_domain[static_cast<size_t>(t - 1)];

      // choose an archetype available in this domain and fill its slots; half
      // the turns also mention one slot from another archetype
      std::vector<std::string> archetypes;
      for (const auto& s : dom.slots) {
        const std::string a = detail::archetype_of(s.type);
        if (std::find(archetypes.begin(), archetypes.end(), a) == archetypes.end())
          archetypes.push_back(a);
      }
      const std::string archetype = archetypes[rng.next_below(archetypes.size())];
      // a type filled by another domain earlier in the dialogue stays off
      // limits, so every value type appears at most once per dialogue
      auto taken_elsewhere = [&](const GenSlot& s) {
        for (const auto& [slot_name, value] : state) {
          auto dash = slot_name.find('-');
          if (slot_name.substr(0, dash) == dom.name) continue;
          for (const auto& od : spec.domains)
            if (od.name == slot_name.substr(0, dash))
              for (const auto& os : od.slots)
                if (od.name + "-" + os.suffix == slot_name && os.type == s.type) return true;
        }
        return false;
      };
      std::vector<const GenSlot*> candidates;
      std::vector<const GenSlot*> others;
      for (const auto& s : dom.slots) {
        if (taken_elsewhere(s)) continue;
        if (detail::archetype_of(s.type) == archetype)
          candidates.push_back(&s);
        else
          others.push_back(&s);
      }
      if (candidates.empty() && !others.empty()) std::swap(candidates, others);
      if (candidates.empty()) continue;
      rng.shuffle(candidates);
      if (candidates.size() > 2) candidates.resize(2);
      if (!others.empty() && rng.uniform() < 0.4)
        candidates.push_back(others[rng.next_below(others.size())]);

      Turn turn;
      std::string user;
      if (fresh_domain) {
        turn.system = t == 0 ? "" : rng.choice(detail::followups());
        const std::string& surface =
            dom.aliases.empty() ? dom.name : dom.aliases[rng.next_below(dom.aliases.size())];
        user = detail::fill(rng.choice(detail::request_stems()), "{d}", surface);
      } else {
        const auto& bank = detail::phrases_for(candidates[0]->suffix);
        turn.system = bank[rng.next_below(bank.size())].ask;
      }
      std::set<std::string> used_values;
      for (const GenSlot* slot : candidates) {
        const auto& pool = spec.value_pools.at(slot->type);
        std::string value;
        do {
          value = pool[rng.next_below(pool.size())];
        } while (used_values.count(value) && used_values.size() < pool.size());
        used_values.insert(value);
        const auto& bank = detail::phrases_for(slot->suffix);
        const auto& phrase = bank[rng.next_below(bank.size())];
        std::string inform = detail::fill(phrase.inform, "{v}", value);
        user += user.empty() ? inform : " " + inform;
        state[dom.name + "-" + slot->suffix] = value;
      }
      turn.user = user;
      turn.state = state;
      dlg.turns.push_back(std::move(turn));
    }
    corpus.dialogues.push_back(std::move(dlg));
  }
  return corpus;
}

}  // namespace moedst
