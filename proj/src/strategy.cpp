#include "ilr/strategy.hpp"

#include <sstream>
#include <stdexcept>

namespace ilr {

std::string RecurrenceStrategy::label() const {
  switch (kind) {
    case StrategyKind::kBaseline:
      return "baseline";
    case StrategyKind::kBlock:
      return "block(" + std::to_string(steps) + ")";
    case StrategyKind::kIntraLayer: {
      std::ostringstream os;
      os << "ilr[";
      for (size_t i = 0; i < map.counts.size(); ++i) {
        if (i) os << ",";
        os << map.counts[i];
      }
      os << "]";
      return os.str();
    }
  }
  return "?";
}

bool operator==(const RecurrenceStrategy& a, const RecurrenceStrategy& b) {
  if (a.kind != b.kind) return false;
  switch (a.kind) {
    case StrategyKind::kBaseline:
      return true;
    case StrategyKind::kIntraLayer:
      return a.map.counts == b.map.counts;
    case StrategyKind::kBlock:
      return a.steps == b.steps;
  }
  return false;
}

void validate(const RecurrenceStrategy& strategy, int n_layers) {
  if (n_layers < 1) throw std::invalid_argument("model must have at least one layer");
  switch (strategy.kind) {
    case StrategyKind::kBaseline:
      return;
    case StrategyKind::kIntraLayer: {
      const auto& counts = strategy.map.counts;
      if (static_cast<int>(counts.size()) != n_layers)
        throw std::invalid_argument("map length " + std::to_string(counts.size()) +
                                    " != layers " + std::to_string(n_layers));
      for (size_t i = 0; i < counts.size(); ++i)
        if (counts[i] < 1)
          throw std::invalid_argument("reuse count for layer " + std::to_string(i + 1) +
                                      " must be positive, got " + std::to_string(counts[i]));
      return;
    }
    case StrategyKind::kBlock:
      if (strategy.steps < 1)
        throw std::invalid_argument("block steps must be positive, got " +
                                    std::to_string(strategy.steps));
      return;
  }
}

int64_t effective_depth(const RecurrenceStrategy& strategy, int n_layers) {
  validate(strategy, n_layers);
  switch (strategy.kind) {
    case StrategyKind::kBaseline:
      return n_layers;
    case StrategyKind::kIntraLayer:
      return strategy.map.total();
    case StrategyKind::kBlock:
      return static_cast<int64_t>(strategy.steps) * n_layers;
  }
  return n_layers;
}

nlohmann::json strategy_to_json(const RecurrenceStrategy& strategy) {
  nlohmann::json j;
  switch (strategy.kind) {
    case StrategyKind::kBaseline:
      j["strategy"] = "baseline";
      break;
    case StrategyKind::kIntraLayer:
      j["strategy"] = "ilr";
      j["map"] = strategy.map.counts;
      break;
    case StrategyKind::kBlock:
      j["strategy"] = "block";
      j["steps"] = strategy.steps;
      break;
  }
  return j;
}

RecurrenceStrategy strategy_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("strategy"))
    throw std::invalid_argument("strategy object must contain a \"strategy\" key");
  const std::string kind = j.at("strategy").get<std::string>();
  for (const auto& [key, _] : j.items()) {
    if (key != "strategy" && key != "map" && key != "steps")
      throw std::invalid_argument("unknown key \"" + key + "\" in strategy object");
  }
  if (kind == "baseline") return RecurrenceStrategy::baseline();
  if (kind == "ilr") {
    if (!j.contains("map")) throw std::invalid_argument("ilr strategy requires a \"map\" array");
    return RecurrenceStrategy::intra_layer(j.at("map").get<std::vector<int>>());
  }
  if (kind == "block") {
    if (!j.contains("steps")) throw std::invalid_argument("block strategy requires \"steps\"");
    return RecurrenceStrategy::block(j.at("steps").get<int>());
  }
  throw std::invalid_argument("unknown strategy \"" + kind + "\"");
}

}  // namespace ilr
