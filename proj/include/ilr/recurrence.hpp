#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ilr/model.hpp"
#include "ilr/strategy.hpp"
#include "ilr/tensor.hpp"

namespace ilr {

// Intermediate states retained by a capture-enabled forward pass. Intra-layer
// mode keeps h^(l,k) for every recurrence k of every layer; block mode keeps
// each step's input x_t = h_{t-1} + e and output h_t.
template <typename S>
struct ForwardTrace {
  Tensor<S> embedding;
  std::vector<std::vector<Tensor<S>>> layer_states;
  std::vector<Tensor<S>> block_inputs;
  std::vector<Tensor<S>> block_hidden;

  std::vector<Tensor<S>> all_states() const {
    std::vector<Tensor<S>> out;
    for (const auto& layer : layer_states)
      for (const auto& s : layer) out.push_back(s);
    for (const auto& s : block_hidden) out.push_back(s);
    return out;
  }

  std::vector<std::string> state_labels() const {
    std::vector<std::string> out;
    for (size_t l = 0; l < layer_states.size(); ++l)
      for (size_t k = 0; k < layer_states[l].size(); ++k)
        out.push_back("layer" + std::to_string(l + 1) + ".k" + std::to_string(k + 1));
    for (size_t t = 0; t < block_hidden.size(); ++t)
      out.push_back("step" + std::to_string(t + 1));
    return out;
  }
};

template <typename S>
struct ForwardResult {
  Tensor<S> logits;
  std::optional<ForwardTrace<S>> trace;
};

namespace detail {

// One reuse-map forward pass. When `override_layer` is non-negative, that
// layer's k-th application pulls its weights from `overrides[k]` instead of
// the shared parameters; the stop-gradient oracle uses this to isolate a
// single recurrence's contribution.
template <typename S>
ForwardResult<S> forward_ilr_impl(Graph<S>& g, const ModelParams<S>& params,
                                  std::span<const int32_t> token_ids, const ReuseMap& map,
                                  bool capture, int override_layer,
                                  std::span<const LayerParams<S>> overrides) {
  const ModelConfig& cfg = params.config;
  validate(RecurrenceStrategy::intra_layer(map.counts), cfg.n_layers);
  const int64_t t = static_cast<int64_t>(token_ids.size());
  const auto positions = default_positions(t);
  const AttnMasks<S> masks = build_masks<S>(cfg, t);

  ForwardResult<S> result;
  if (capture) result.trace.emplace();
  if (capture) result.trace->layer_states.resize(static_cast<size_t>(cfg.n_layers));

  Tensor<S> h = embed(g, params, token_ids);
  if (capture) result.trace->embedding = h;
  for (int l = 0; l < cfg.n_layers; ++l) {
    const int reps = map.counts[static_cast<size_t>(l)];
    for (int k = 0; k < reps; ++k) {
      const LayerParams<S>& lp = (l == override_layer)
                                     ? overrides[static_cast<size_t>(k)]
                                     : params.layers[static_cast<size_t>(l)];
      h = layer_forward(g, h, lp, cfg, positions, masks);
      if (capture) result.trace->layer_states[static_cast<size_t>(l)].push_back(h);
    }
  }
  result.logits = lm_head(g, params, h);
  return result;
}

}  // namespace detail

// Layer l applied r_l times on its own output, the same parameters for every
// application. RoPE/ALiBi recompute their position information inside each
// re-entered attention; NoPE and learned-absolute add nothing on re-entry.
template <typename S>
ForwardResult<S> forward_ilr(Graph<S>& g, const ModelParams<S>& params,
                             std::span<const int32_t> token_ids, const ReuseMap& map,
                             bool capture = false) {
  return detail::forward_ilr_impl<S>(g, params, token_ids, map, capture, -1, {});
}

// Whole-stack recurrence: h_0 = 0 and x_t = h_{t-1} + e, so a single step
// reduces exactly to the baseline pass.
template <typename S>
ForwardResult<S> forward_block(Graph<S>& g, const ModelParams<S>& params,
                               std::span<const int32_t> token_ids, int steps,
                               bool capture = false) {
  const ModelConfig& cfg = params.config;
  validate(RecurrenceStrategy::block(steps), cfg.n_layers);
  const int64_t t = static_cast<int64_t>(token_ids.size());
  const auto positions = default_positions(t);
  const AttnMasks<S> masks = build_masks<S>(cfg, t);

  ForwardResult<S> result;
  if (capture) result.trace.emplace();

  Tensor<S> e = embed(g, params, token_ids);
  if (capture) result.trace->embedding = e;
  Tensor<S> h = Tensor<S>::zeros(e.shape());
  for (int step = 0; step < steps; ++step) {
    Tensor<S> x = g.add(h, e);
    if (capture) result.trace->block_inputs.push_back(x);
    for (const auto& layer : params.layers)
      x = layer_forward(g, x, layer, cfg, positions, masks);
    h = x;
    if (capture) result.trace->block_hidden.push_back(h);
  }
  result.logits = lm_head(g, params, h);
  return result;
}

template <typename S>
ForwardResult<S> forward_with_strategy(Graph<S>& g, const ModelParams<S>& params,
                                       std::span<const int32_t> token_ids,
                                       const RecurrenceStrategy& strategy,
                                       bool capture = false) {
  validate(strategy, params.config.n_layers);
  switch (strategy.kind) {
    case StrategyKind::kBaseline: {
      ForwardResult<S> r;
      if (capture) {
        ReuseMap ones;
        ones.counts.assign(static_cast<size_t>(params.config.n_layers), 1);
        return forward_ilr(g, params, token_ids, ones, true);
      }
      r.logits = stack_forward(g, params, token_ids);
      return r;
    }
    case StrategyKind::kIntraLayer:
      return forward_ilr(g, params, token_ids, strategy.map, capture);
    case StrategyKind::kBlock:
      return forward_block(g, params, token_ids, strategy.steps, capture);
  }
  throw std::logic_error("unreachable strategy kind");
}

namespace detail {

// Every oracle scores the same next-token objective: targets are the input
// ids shifted left by one, wrapping at the end.
inline std::vector<int32_t> wrap_shift_targets(std::span<const int32_t> ids) {
  std::vector<int32_t> t(ids.begin() + 1, ids.end());
  t.push_back(ids.front());
  return t;
}

}  // namespace detail

template <typename S>
struct InputGradientCheck {
  std::vector<S> autodiff;        // dL/dh^(l-1) from the end-to-end tape
  std::vector<S> jacobian_sweep;  // delta^(l,r_l) pulled back through r_l VJPs
  double max_abs_diff = 0.0;
};

// Computes the loss gradient at layer l's input two ways: (a) one backward
// pass over the whole graph, (b) differentiate the suffix after layer l to
// get delta^(l,r_l), then apply the layer's r_l vector-Jacobian products in
// reverse. `layer_idx` is zero-based.
template <typename S>
InputGradientCheck<S> input_gradient_oracle(const ModelParams<S>& params,
                                            std::span<const int32_t> token_ids,
                                            const ReuseMap& map, int layer_idx) {
  const ModelConfig& cfg = params.config;
  validate(RecurrenceStrategy::intra_layer(map.counts), cfg.n_layers);
  if (layer_idx < 0 || layer_idx >= cfg.n_layers)
    throw std::invalid_argument("input_gradient_oracle: layer index " +
                                std::to_string(layer_idx) + " out of range [0," +
                                std::to_string(cfg.n_layers) + ")");
  const auto targets = detail::wrap_shift_targets(token_ids);
  const int64_t t = static_cast<int64_t>(token_ids.size());
  const auto positions = default_positions(t);
  const int reps = map.counts[static_cast<size_t>(layer_idx)];

  InputGradientCheck<S> check;

  // (a) end-to-end autodiff, reading the gradient off the captured state
  std::vector<std::vector<S>> recurrence_inputs;  // h^(l,0) .. h^(l,r_l-1)
  std::vector<S> final_state_values;
  {
    Graph<S> g;
    params.zero_grads();
    auto fwd = forward_ilr(g, params, token_ids, map, true);
    auto loss = g.cross_entropy_mean(fwd.logits, targets);
    g.backward(loss);
    const auto& trace = *fwd.trace;
    const Tensor<S>& input_state = layer_idx == 0
                                       ? trace.embedding
                                       : trace.layer_states[static_cast<size_t>(layer_idx - 1)].back();
    check.autodiff = input_state.grad();
    recurrence_inputs.push_back(input_state.values());
    const auto& states = trace.layer_states[static_cast<size_t>(layer_idx)];
    for (int k = 0; k + 1 < reps; ++k) recurrence_inputs.push_back(states[static_cast<size_t>(k)].values());
    final_state_values = states.back().values();
  }

  // (b) delta from an independently differentiated suffix ...
  std::vector<S> delta;
  {
    Graph<S> g;
    Tensor<S> x = Tensor<S>::from({t, cfg.hidden_dim}, final_state_values, true);
    const AttnMasks<S> masks = build_masks<S>(cfg, t);
    Tensor<S> h = x;
    for (int l = layer_idx + 1; l < cfg.n_layers; ++l)
      for (int k = 0; k < map.counts[static_cast<size_t>(l)]; ++k)
        h = layer_forward(g, h, params.layers[static_cast<size_t>(l)].detached(), cfg, positions,
                          masks);
    ModelParams<S> frozen;
    frozen.config = cfg;
    frozen.final_norm = params.final_norm.detach();
    frozen.head = params.head.detach();
    auto loss = g.cross_entropy_mean(lm_head(g, frozen, h), targets);
    g.backward(loss);
    delta = x.grad();
  }

  // ... pulled back through the layer's recurrences in reverse order
  const LayerParams<S> frozen_layer = params.layers[static_cast<size_t>(layer_idx)].detached();
  const AttnMasks<S> masks = build_masks<S>(cfg, t);
  for (int k = reps - 1; k >= 0; --k) {
    Graph<S> g;
    Tensor<S> u = Tensor<S>::from({t, cfg.hidden_dim}, recurrence_inputs[static_cast<size_t>(k)],
                                  true);
    Tensor<S> y = layer_forward(g, u, frozen_layer, cfg, positions, masks);
    g.backward_from(y, delta);
    delta = u.grad();
  }
  check.jacobian_sweep = std::move(delta);

  for (size_t i = 0; i < check.autodiff.size(); ++i)
    check.max_abs_diff = std::max(check.max_abs_diff,
                                  std::abs(static_cast<double>(check.autodiff[i]) -
                                           static_cast<double>(check.jacobian_sweep[i])));
  return check;
}

// Finite-difference reference for the same input gradient: re-runs layer l's
// recurrences and the suffix from a perturbed h^(l-1).
template <typename S>
std::vector<S> input_gradient_fd(const ModelParams<S>& params, std::span<const int32_t> token_ids,
                                 const ReuseMap& map, int layer_idx, S step) {
  const ModelConfig& cfg = params.config;
  const auto targets = detail::wrap_shift_targets(token_ids);
  const int64_t t = static_cast<int64_t>(token_ids.size());
  const auto positions = default_positions(t);

  std::vector<S> input_values;
  {
    Graph<S> g;
    auto fwd = forward_ilr(g, params, token_ids, map, true);
    input_values = layer_idx == 0
                       ? fwd.trace->embedding.values()
                       : fwd.trace->layer_states[static_cast<size_t>(layer_idx - 1)].back().values();
  }
  Tensor<S> x = Tensor<S>::from({t, cfg.hidden_dim}, input_values);
  auto suffix_loss = [&](const Tensor<S>& xin) {
    Graph<S> g;
    const AttnMasks<S> masks = build_masks<S>(cfg, t);
    Tensor<S> h = xin.detach();
    for (int l = layer_idx; l < cfg.n_layers; ++l)
      for (int k = 0; k < map.counts[static_cast<size_t>(l)]; ++k)
        h = layer_forward(g, h, params.layers[static_cast<size_t>(l)], cfg, positions, masks);
    return g.cross_entropy_mean(lm_head(g, params, h), targets).value();
  };
  return finite_diff_grad<S>(suffix_loss, x, step);
}

template <typename S>
struct GradientDecomposition {
  std::vector<std::string> param_names;
  // contributions[k][p]: recurrence k's share of dL/d(theta_p of the layer)
  std::vector<std::vector<std::vector<S>>> contributions;
  std::vector<std::vector<S>> contribution_sum;
  std::vector<std::vector<S>> autodiff;
  double max_abs_diff = 0.0;  // |sum - autodiff|, max over all entries
};

// Realizes the per-recurrence parameter-gradient sum: contribution k is the
// gradient with every application of layer l except the k-th frozen
// (stop-gradient unroll), and the k contributions must add up to the plain
// autodiff gradient.
template <typename S>
GradientDecomposition<S> param_gradient_decomposition(const ModelParams<S>& params,
                                                      std::span<const int32_t> token_ids,
                                                      const ReuseMap& map, int layer_idx) {
  const ModelConfig& cfg = params.config;
  validate(RecurrenceStrategy::intra_layer(map.counts), cfg.n_layers);
  if (layer_idx < 0 || layer_idx >= cfg.n_layers)
    throw std::invalid_argument("param_gradient_decomposition: layer index out of range");
  const auto targets = detail::wrap_shift_targets(token_ids);
  const int reps = map.counts[static_cast<size_t>(layer_idx)];
  const LayerParams<S>& live = params.layers[static_cast<size_t>(layer_idx)];
  const LayerParams<S> frozen = live.detached();

  GradientDecomposition<S> out;
  for (const auto& [name, tensor] : live.named("")) out.param_names.push_back(name);

  auto collect = [&]() {
    std::vector<std::vector<S>> grads;
    for (const auto& [name, tensor] : live.named("")) grads.push_back(tensor.grad());
    return grads;
  };

  for (int k = 0; k < reps; ++k) {
    std::vector<LayerParams<S>> per_application;
    for (int j = 0; j < reps; ++j) per_application.push_back(j == k ? live : frozen);
    Graph<S> g;
    params.zero_grads();
    auto fwd = detail::forward_ilr_impl<S>(g, params, token_ids, map, false, layer_idx,
                                           per_application);
    g.backward(g.cross_entropy_mean(fwd.logits, targets));
    out.contributions.push_back(collect());
  }

  {
    Graph<S> g;
    params.zero_grads();
    auto fwd = forward_ilr(g, params, token_ids, map, false);
    g.backward(g.cross_entropy_mean(fwd.logits, targets));
    out.autodiff = collect();
  }

  out.contribution_sum.resize(out.autodiff.size());
  for (size_t p = 0; p < out.autodiff.size(); ++p) {
    out.contribution_sum[p].assign(out.autodiff[p].size(), S(0));
    for (int k = 0; k < reps; ++k)
      for (size_t i = 0; i < out.autodiff[p].size(); ++i)
        out.contribution_sum[p][i] += out.contributions[static_cast<size_t>(k)][p][i];
    for (size_t i = 0; i < out.autodiff[p].size(); ++i)
      out.max_abs_diff = std::max(out.max_abs_diff,
                                  std::abs(static_cast<double>(out.contribution_sum[p][i]) -
                                           static_cast<double>(out.autodiff[p][i])));
  }
  return out;
}

struct ProbeEntry {
  std::string state;
  std::vector<int32_t> token_ids;
  std::vector<double> probs;
};

// Decodes every captured intermediate state through the final norm and head,
// reporting the top-k next-token candidates at the last position.
template <typename S>
std::vector<ProbeEntry> logit_probe(const ModelParams<S>& params, const ForwardTrace<S>& trace,
                                    int top_k) {
  if (top_k < 1) throw std::invalid_argument("logit_probe: top_k must be >= 1");
  std::vector<ProbeEntry> out;
  const auto states = trace.all_states();
  const auto labels = trace.state_labels();
  for (size_t s = 0; s < states.size(); ++s) {
    Graph<S> g;
    Tensor<S> h = states[s].detach();
    Tensor<S> logits = lm_head(g, params, h);
    Tensor<S> probs = g.softmax_rows(logits);
    const int64_t t = probs.shape()[0];
    const int64_t v = probs.shape()[1];
    const S* last = probs.values().data() + (t - 1) * v;
    std::vector<int32_t> order(static_cast<size_t>(v));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int32_t a, int32_t b) { return last[a] > last[b]; });
    ProbeEntry entry;
    entry.state = labels[s];
    const int keep = static_cast<int>(std::min<int64_t>(top_k, v));
    for (int i = 0; i < keep; ++i) {
      entry.token_ids.push_back(order[static_cast<size_t>(i)]);
      entry.probs.push_back(static_cast<double>(last[order[static_cast<size_t>(i)]]));
    }
    out.push_back(std::move(entry));
  }
  return out;
}

}  // namespace ilr
