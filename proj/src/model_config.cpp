#include "ilr/model.hpp"

#include <set>

namespace ilr {

nlohmann::json model_config_to_json(const ModelConfig& c) {
  nlohmann::json j;
  j["hidden_dim"] = c.hidden_dim;
  j["n_layers"] = c.n_layers;
  j["n_heads"] = c.n_heads;
  j["vocab"] = c.vocab;
  j["max_seq_len"] = c.max_seq_len;
  j["mlp_hidden"] = c.mlp_hidden;
  j["pos_mode"] = c.pos_mode.label();
  j["rope_theta"] = c.pos_mode.rope_theta;
  j["rmsnorm_eps"] = c.rmsnorm_eps;
  return j;
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  static const std::set<std::string> known = {"hidden_dim", "n_layers",   "n_heads",
                                              "vocab",      "max_seq_len", "mlp_hidden",
                                              "pos_mode",   "rope_theta",  "rmsnorm_eps"};
  for (const auto& [key, _] : j.items())
    if (!known.count(key))
      throw std::invalid_argument("unknown key \"" + key + "\" in model config");
  ModelConfig c;
  if (j.contains("hidden_dim")) c.hidden_dim = j.at("hidden_dim").get<int64_t>();
  if (j.contains("n_layers")) c.n_layers = j.at("n_layers").get<int>();
  if (j.contains("n_heads")) c.n_heads = j.at("n_heads").get<int>();
  if (j.contains("vocab")) c.vocab = j.at("vocab").get<int64_t>();
  if (j.contains("max_seq_len")) c.max_seq_len = j.at("max_seq_len").get<int64_t>();
  if (j.contains("mlp_hidden")) c.mlp_hidden = j.at("mlp_hidden").get<int64_t>();
  double theta = j.value("rope_theta", 10000.0);
  if (j.contains("pos_mode"))
    c.pos_mode = pos_mode_from_label(j.at("pos_mode").get<std::string>(), theta);
  else
    c.pos_mode = PositionalMode::rope(theta);
  if (j.contains("rmsnorm_eps")) c.rmsnorm_eps = j.at("rmsnorm_eps").get<double>();
  c.finalize();
  c.validate();
  return c;
}

}  // namespace ilr
