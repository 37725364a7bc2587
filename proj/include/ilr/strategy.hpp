#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace ilr {

// Per-layer iteration counts [r_1..r_L]; all-ones is the baseline stack.
struct ReuseMap {
  std::vector<int> counts;

  int64_t total() const {
    int64_t s = 0;
    for (int c : counts) s += c;
    return s;
  }
};

enum class StrategyKind { kBaseline, kIntraLayer, kBlock };

struct RecurrenceStrategy {
  StrategyKind kind = StrategyKind::kBaseline;
  ReuseMap map;   // intra-layer only
  int steps = 1;  // block only

  static RecurrenceStrategy baseline() { return {}; }
  static RecurrenceStrategy intra_layer(std::vector<int> counts) {
    RecurrenceStrategy s;
    s.kind = StrategyKind::kIntraLayer;
    s.map.counts = std::move(counts);
    return s;
  }
  static RecurrenceStrategy block(int steps) {
    RecurrenceStrategy s;
    s.kind = StrategyKind::kBlock;
    s.steps = steps;
    return s;
  }

  std::string label() const;
};

bool operator==(const RecurrenceStrategy& a, const RecurrenceStrategy& b);

// Throws std::invalid_argument with a descriptive message on any violation.
void validate(const RecurrenceStrategy& strategy, int n_layers);

// Baseline -> L; intra-layer -> sum r_l; block(r) -> r*L.
int64_t effective_depth(const RecurrenceStrategy& strategy, int n_layers);

nlohmann::json strategy_to_json(const RecurrenceStrategy& strategy);
RecurrenceStrategy strategy_from_json(const nlohmann::json& j);

}  // namespace ilr
