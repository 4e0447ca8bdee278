#pragma once

#include <map>
#include <stdexcept>
#include <string>

#include "moedst/data.hpp"

namespace moedst {

using TurnState = std::map<std::string, std::string>;
// (dialogue_id, turn_index) -> predicted or gold state
using StatesByTurn = std::map<std::pair<std::string, int>, TurnState>;

namespace detail {

inline TurnState normalized(const TurnState& s) {
  TurnState out;
  for (const auto& [slot, value] : s) {
    std::string v = normalize_value(value);
    if (v.empty() || v == "none") continue;  // absent slot and "none" are the same thing
    out[slot] = std::move(v);
  }
  return out;
}

inline void check_alignment(const StatesByTurn& predictions, const StatesByTurn& gold) {
  if (predictions.size() != gold.size())
    throw std::invalid_argument("metrics: prediction and gold turn sets differ in size");
  auto p = predictions.begin();
  auto g = gold.begin();
  for (; p != predictions.end(); ++p, ++g) {
    if (p->first != g->first)
      throw std::invalid_argument("metrics: misaligned turn key " + p->first.first + "#" +
                                  std::to_string(p->first.second));
  }
}

}  // namespace detail

// Fraction of turns whose entire predicted state equals gold after value
// normalization. Slots absent on both sides agree.
inline double joint_goal_accuracy(const StatesByTurn& predictions, const StatesByTurn& gold) {
  detail::check_alignment(predictions, gold);
  if (gold.empty()) throw std::invalid_argument("metrics: no turns to score");
  int correct = 0;
  for (const auto& [key, gold_state] : gold) {
    if (detail::normalized(predictions.at(key)) == detail::normalized(gold_state)) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(gold.size());
}

// Fraction of (turn, schema slot) pairs where the predicted value (or
// absence) matches gold.
inline double slot_accuracy(const StatesByTurn& predictions, const StatesByTurn& gold,
                            const SlotSchema& schema) {
  detail::check_alignment(predictions, gold);
  if (gold.empty()) throw std::invalid_argument("metrics: no turns to score");
  if (schema.slots.empty()) throw std::invalid_argument("metrics: empty schema");
  int64_t correct = 0, total = 0;
  for (const auto& [key, gold_state_raw] : gold) {
    TurnState pred = detail::normalized(predictions.at(key));
    TurnState gold_state = detail::normalized(gold_state_raw);
    for (const auto& slot : schema.slots) {
      auto pi = pred.find(slot.name);
      auto gi = gold_state.find(slot.name);
      bool p_absent = pi == pred.end();
      bool g_absent = gi == gold_state.end();
      bool match = (p_absent && g_absent) || (!p_absent && !g_absent && pi->second == gi->second);
      correct += match ? 1 : 0;
      ++total;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(total);
}

}  // namespace moedst
