#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ilr/rng.hpp"
#include "ilr/tensor.hpp"

namespace ilr {

enum class PosKind { kNoPE, kRoPE, kLearnedAbsolute, kALiBi };

struct PositionalMode {
  PosKind kind = PosKind::kRoPE;
  double rope_theta = 10000.0;

  static PositionalMode nope() { return {PosKind::kNoPE, 10000.0}; }
  static PositionalMode rope(double theta = 10000.0) { return {PosKind::kRoPE, theta}; }
  static PositionalMode learned_absolute() { return {PosKind::kLearnedAbsolute, 10000.0}; }
  static PositionalMode alibi() { return {PosKind::kALiBi, 10000.0}; }

  std::string label() const {
    switch (kind) {
      case PosKind::kNoPE: return "nope";
      case PosKind::kRoPE: return "rope";
      case PosKind::kLearnedAbsolute: return "learned";
      case PosKind::kALiBi: return "alibi";
    }
    return "?";
  }
};

inline PositionalMode pos_mode_from_label(const std::string& s, double rope_theta = 10000.0) {
  if (s == "nope") return PositionalMode::nope();
  if (s == "rope") return PositionalMode::rope(rope_theta);
  if (s == "learned") return PositionalMode::learned_absolute();
  if (s == "alibi") return PositionalMode::alibi();
  throw std::invalid_argument("unknown positional mode \"" + s +
                              "\" (expected nope|rope|learned|alibi)");
}

// SwiGLU inner width: round(8d/3), rounded up to a multiple of 8.
inline int64_t default_mlp_hidden(int64_t hidden_dim) {
  const int64_t r = static_cast<int64_t>(std::llround(8.0 * static_cast<double>(hidden_dim) / 3.0));
  return ((r + 7) / 8) * 8;
}

struct ModelConfig {
  int64_t hidden_dim = 64;
  int n_layers = 4;
  int n_heads = 4;
  int64_t vocab = 257;
  int64_t max_seq_len = 128;
  int64_t mlp_hidden = 0;  // 0 picks default_mlp_hidden(hidden_dim)
  PositionalMode pos_mode = PositionalMode::rope();
  double rmsnorm_eps = 1e-5;

  int64_t head_dim() const { return hidden_dim / n_heads; }

  void finalize() {
    if (mlp_hidden == 0) mlp_hidden = default_mlp_hidden(hidden_dim);
  }

  void validate() const {
    if (n_layers < 1) throw std::invalid_argument("config: n_layers must be >= 1");
    if (n_heads < 1) throw std::invalid_argument("config: n_heads must be >= 1");
    if (hidden_dim < 1 || hidden_dim % n_heads != 0)
      throw std::invalid_argument("config: hidden_dim must be a positive multiple of n_heads");
    if (pos_mode.kind == PosKind::kRoPE && head_dim() % 2 != 0)
      throw std::invalid_argument("config: RoPE requires an even head dimension, got " +
                                  std::to_string(head_dim()));
    if (pos_mode.kind == PosKind::kRoPE && pos_mode.rope_theta <= 1.0)
      throw std::invalid_argument("config: rope theta must exceed 1");
    if (vocab < 2) throw std::invalid_argument("config: vocab must be >= 2");
    if (max_seq_len < 1) throw std::invalid_argument("config: max_seq_len must be >= 1");
    if (mlp_hidden < 1) throw std::invalid_argument("config: mlp_hidden must be >= 1");
    if (rmsnorm_eps <= 0) throw std::invalid_argument("config: rmsnorm_eps must be positive");
  }

  // 1.2M-class configuration
  static ModelConfig paper_small() {
    ModelConfig c;
    c.hidden_dim = 128;
    c.n_layers = 4;
    c.n_heads = 4;
    c.vocab = 1024;
    c.max_seq_len = 1024;
    c.finalize();
    return c;
  }

  // 100M-class configuration; constructible, not trainable at desk scale
  static ModelConfig paper_large() {
    ModelConfig c;
    c.hidden_dim = 768;
    c.n_layers = 8;
    c.n_heads = 8;
    c.vocab = 32000;
    c.max_seq_len = 1024;
    c.finalize();
    return c;
  }

  // byte-vocab model sized for laptop training runs
  static ModelConfig desk_small() {
    ModelConfig c;
    c.hidden_dim = 64;
    c.n_layers = 4;
    c.n_heads = 4;
    c.vocab = 257;
    c.max_seq_len = 128;
    c.finalize();
    return c;
  }

  // smallest dims that still exercise every code path; gradient suites
  static ModelConfig verify_tiny() {
    ModelConfig c;
    c.hidden_dim = 16;
    c.n_layers = 2;
    c.n_heads = 2;
    c.vocab = 32;
    c.max_seq_len = 16;
    c.finalize();
    return c;
  }
};

inline bool operator==(const ModelConfig& a, const ModelConfig& b) {
  return a.hidden_dim == b.hidden_dim && a.n_layers == b.n_layers && a.n_heads == b.n_heads &&
         a.vocab == b.vocab && a.max_seq_len == b.max_seq_len && a.mlp_hidden == b.mlp_hidden &&
         a.pos_mode.kind == b.pos_mode.kind && a.pos_mode.rope_theta == b.pos_mode.rope_theta &&
         a.rmsnorm_eps == b.rmsnorm_eps;
}

nlohmann::json model_config_to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

// Closed-form count matching init_params, usable without materializing the
// tensors (the 100M-class preset stays on paper).
inline int64_t parameter_count(const ModelConfig& c) {
  const int64_t d = c.hidden_dim;
  const int64_t per_layer = 4 * d * d + 3 * d * c.mlp_hidden + 2 * d;
  int64_t n = c.vocab * d + per_layer * c.n_layers + d + d * c.vocab;
  if (c.pos_mode.kind == PosKind::kLearnedAbsolute) n += c.max_seq_len * d;
  return n;
}

template <typename S>
struct LayerParams {
  Tensor<S> wq, wk, wv, wo;  // d x d
  Tensor<S> w_gate, w_up;    // d x mlp_hidden
  Tensor<S> w_down;          // mlp_hidden x d
  Tensor<S> attn_norm, mlp_norm;  // d

  std::vector<std::pair<std::string, Tensor<S>>> named(const std::string& prefix) const {
    return {{prefix + "attn_q", wq},       {prefix + "attn_k", wk},
            {prefix + "attn_v", wv},       {prefix + "attn_o", wo},
            {prefix + "mlp_gate", w_gate}, {prefix + "mlp_up", w_up},
            {prefix + "mlp_down", w_down}, {prefix + "attn_norm", attn_norm},
            {prefix + "mlp_norm", mlp_norm}};
  }

  // Same values, gradient tracking severed; the stop-gradient oracles use
  // these copies for the recurrence applications they freeze.
  LayerParams detached() const {
    return {wq.detach(),     wk.detach(),   wv.detach(),   wo.detach(),       w_gate.detach(),
            w_up.detach(),   w_down.detach(), attn_norm.detach(), mlp_norm.detach()};
  }

  LayerParams cloned(bool requires_grad) const {
    return {wq.clone(requires_grad),        wk.clone(requires_grad),
            wv.clone(requires_grad),        wo.clone(requires_grad),
            w_gate.clone(requires_grad),    w_up.clone(requires_grad),
            w_down.clone(requires_grad),    attn_norm.clone(requires_grad),
            mlp_norm.clone(requires_grad)};
  }
};

template <typename S>
struct ModelParams {
  ModelConfig config;
  Tensor<S> tok_emb;  // V x d
  Tensor<S> pos_emb;  // max_seq_len x d, learned-absolute mode only
  std::vector<LayerParams<S>> layers;
  Tensor<S> final_norm;  // d
  Tensor<S> head;        // d x V

  std::vector<std::pair<std::string, Tensor<S>>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor<S>>> out;
    out.emplace_back("tok_emb", tok_emb);
    if (pos_emb.defined()) out.emplace_back("pos_emb", pos_emb);
    for (size_t l = 0; l < layers.size(); ++l) {
      auto lp = layers[l].named("layers." + std::to_string(l) + ".");
      out.insert(out.end(), lp.begin(), lp.end());
    }
    out.emplace_back("final_norm", final_norm);
    out.emplace_back("head", head);
    return out;
  }

  int64_t parameter_count() const {
    int64_t n = 0;
    for (const auto& [name, t] : named_parameters()) n += t.size();
    return n;
  }

  void zero_grads() const {
    for (auto& [name, t] : named_parameters()) const_cast<Tensor<S>&>(t).zero_grad();
  }
};

// All weight matrices ~ Normal(0, 0.02^2); norm weights start at 1. Draw
// order is fixed so a (config, seed) pair is bit-reproducible.
template <typename S>
ModelParams<S> init_params(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  auto rng = seeded_stream(seed, "init");
  std::normal_distribution<double> dist(0.0, 0.02);
  auto draw = [&](Shape shape, const std::string& name) {
    Tensor<S> t = Tensor<S>::zeros(std::move(shape), true);
    for (auto& v : t.values()) v = static_cast<S>(dist(rng));
    t.set_name(name);
    return t;
  };
  auto ones = [&](int64_t d, const std::string& name) {
    Tensor<S> t = Tensor<S>::zeros({d}, true);
    for (auto& v : t.values()) v = S(1);
    t.set_name(name);
    return t;
  };

  ModelParams<S> p;
  p.config = cfg;
  const int64_t d = cfg.hidden_dim;
  p.tok_emb = draw({cfg.vocab, d}, "tok_emb");
  if (cfg.pos_mode.kind == PosKind::kLearnedAbsolute)
    p.pos_emb = draw({cfg.max_seq_len, d}, "pos_emb");
  p.layers.reserve(static_cast<size_t>(cfg.n_layers));
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string prefix = "layers." + std::to_string(l) + ".";
    LayerParams<S> lp;
    lp.wq = draw({d, d}, prefix + "attn_q");
    lp.wk = draw({d, d}, prefix + "attn_k");
    lp.wv = draw({d, d}, prefix + "attn_v");
    lp.wo = draw({d, d}, prefix + "attn_o");
    lp.w_gate = draw({d, cfg.mlp_hidden}, prefix + "mlp_gate");
    lp.w_up = draw({d, cfg.mlp_hidden}, prefix + "mlp_up");
    lp.w_down = draw({cfg.mlp_hidden, d}, prefix + "mlp_down");
    lp.attn_norm = ones(d, prefix + "attn_norm");
    lp.mlp_norm = ones(d, prefix + "mlp_norm");
    p.layers.push_back(std::move(lp));
  }
  p.final_norm = ones(d, "final_norm");
  p.head = draw({d, cfg.vocab}, "head");
  return p;
}

inline std::vector<int64_t> default_positions(int64_t t) {
  std::vector<int64_t> p(static_cast<size_t>(t));
  std::iota(p.begin(), p.end(), 0);
  return p;
}

// slope_h = 2^(-8h/H) for h = 1..H
inline std::vector<double> alibi_slopes(int n_heads) {
  std::vector<double> s(static_cast<size_t>(n_heads));
  for (int h = 1; h <= n_heads; ++h)
    s[static_cast<size_t>(h - 1)] = std::exp2(-8.0 * static_cast<double>(h) / n_heads);
  return s;
}

// Constant [H x T x T] bias: -slope_h * (i - j) at and below the diagonal,
// zero above it (the causal mask owns that region).
template <typename S>
Tensor<S> alibi_bias(int n_heads, int64_t t) {
  if (n_heads < 1) throw std::invalid_argument("alibi_bias: need at least one head");
  auto slopes = alibi_slopes(n_heads);
  Tensor<S> out = Tensor<S>::zeros({n_heads, t, t});
  auto& v = out.values();
  for (int h = 0; h < n_heads; ++h)
    for (int64_t i = 0; i < t; ++i)
      for (int64_t j = 0; j <= i; ++j)
        v[static_cast<size_t>((h * t + i) * t + j)] =
            static_cast<S>(-slopes[static_cast<size_t>(h)] * static_cast<double>(i - j));
  return out;
}

// Additive pre-softmax masks for one sequence length: causal -inf above the
// diagonal, plus the per-head ALiBi ramp in that mode. Built once per forward
// pass and shared across layers (and recurrence re-entries).
template <typename S>
struct AttnMasks {
  std::vector<typename Graph<S>::Mask> heads;  // size 1 when shared, else H

  const typename Graph<S>::Mask& head(int h) const {
    return heads.size() == 1 ? heads[0] : heads[static_cast<size_t>(h)];
  }
};

template <typename S>
AttnMasks<S> build_masks(const ModelConfig& cfg, int64_t t) {
  const S neg_inf = -std::numeric_limits<S>::infinity();
  AttnMasks<S> m;
  if (cfg.pos_mode.kind == PosKind::kALiBi) {
    const Tensor<S> bias = alibi_bias<S>(cfg.n_heads, t);
    for (int h = 0; h < cfg.n_heads; ++h) {
      auto buf = std::make_shared<std::vector<S>>(static_cast<size_t>(t * t), neg_inf);
      for (int64_t i = 0; i < t; ++i)
        for (int64_t j = 0; j <= i; ++j)
          (*buf)[static_cast<size_t>(i * t + j)] =
              bias.values()[static_cast<size_t>((h * t + i) * t + j)];
      m.heads.push_back(std::move(buf));
    }
  } else {
    auto buf = std::make_shared<std::vector<S>>(static_cast<size_t>(t * t), neg_inf);
    for (int64_t i = 0; i < t; ++i)
      for (int64_t j = 0; j <= i; ++j) (*buf)[static_cast<size_t>(i * t + j)] = S(0);
    m.heads.push_back(std::move(buf));
  }
  return m;
}

// Token rows from the embedding table; learned-absolute position rows are
// added here, once, and never again during any recurrence.
template <typename S>
Tensor<S> embed(Graph<S>& g, const ModelParams<S>& params, std::span<const int32_t> token_ids) {
  const int64_t t = static_cast<int64_t>(token_ids.size());
  if (t > params.config.max_seq_len)
    throw std::invalid_argument("embed: sequence length " + std::to_string(t) +
                                " exceeds max_seq_len " +
                                std::to_string(params.config.max_seq_len));
  Tensor<S> e = g.embedding_gather(params.tok_emb, token_ids);
  if (params.config.pos_mode.kind == PosKind::kLearnedAbsolute) {
    std::vector<int32_t> rows(static_cast<size_t>(t));
    std::iota(rows.begin(), rows.end(), 0);
    e = g.add(e, g.embedding_gather(params.pos_emb, rows));
  }
  return e;
}

// Rotates query/key pairs by position-dependent angles; identical treatment
// of q and k keeps scores a function of relative offset only.
template <typename S>
std::pair<Tensor<S>, Tensor<S>> apply_rope(Graph<S>& g, const Tensor<S>& q, const Tensor<S>& k,
                                           std::span<const int64_t> positions, int n_heads,
                                           double theta) {
  return {g.rope(q, positions, n_heads, theta), g.rope(k, positions, n_heads, theta)};
}

template <typename S>
Tensor<S> attention(Graph<S>& g, const Tensor<S>& x, const LayerParams<S>& layer,
                    const ModelConfig& cfg, std::span<const int64_t> positions,
                    const AttnMasks<S>& masks) {
  const int64_t t = x.shape()[0];
  if (t > cfg.max_seq_len)
    throw std::invalid_argument("attention: sequence length exceeds max_seq_len");
  const int64_t hd = cfg.head_dim();

  Tensor<S> q = g.matmul(x, layer.wq);
  Tensor<S> k = g.matmul(x, layer.wk);
  Tensor<S> v = g.matmul(x, layer.wv);
  if (cfg.pos_mode.kind == PosKind::kRoPE)
    std::tie(q, k) = apply_rope(g, q, k, positions, cfg.n_heads, cfg.pos_mode.rope_theta);

  const S inv_sqrt = static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd)));
  std::vector<Tensor<S>> head_outputs;
  head_outputs.reserve(static_cast<size_t>(cfg.n_heads));
  for (int h = 0; h < cfg.n_heads; ++h) {
    Tensor<S> qh = g.slice_cols(q, h * hd, hd);
    Tensor<S> kh = g.slice_cols(k, h * hd, hd);
    Tensor<S> vh = g.slice_cols(v, h * hd, hd);
    Tensor<S> scores = g.scale(g.matmul(qh, g.transpose(kh)), inv_sqrt);
    Tensor<S> probs = g.softmax_rows(scores, masks.head(h));
    head_outputs.push_back(g.matmul(probs, vh));
  }
  Tensor<S> concat = cfg.n_heads == 1 ? head_outputs[0] : g.concat_cols(head_outputs);
  return g.matmul(concat, layer.wo);
}

template <typename S>
Tensor<S> attention(Graph<S>& g, const Tensor<S>& x, const LayerParams<S>& layer,
                    const ModelConfig& cfg, std::span<const int64_t> positions) {
  return attention(g, x, layer, cfg, positions, build_masks<S>(cfg, x.shape()[0]));
}

// Pre-norm residual block: x + attn(norm(x)), then + swiglu(norm(.)).
template <typename S>
Tensor<S> layer_forward(Graph<S>& g, const Tensor<S>& x, const LayerParams<S>& layer,
                        const ModelConfig& cfg, std::span<const int64_t> positions,
                        const AttnMasks<S>& masks) {
  const S eps = static_cast<S>(cfg.rmsnorm_eps);
  Tensor<S> h = g.add(x, attention(g, g.rms_norm(x, layer.attn_norm, eps), layer, cfg, positions,
                                   masks));
  Tensor<S> u = g.rms_norm(h, layer.mlp_norm, eps);
  Tensor<S> gated = g.mul(g.silu(g.matmul(u, layer.w_gate)), g.matmul(u, layer.w_up));
  return g.add(h, g.matmul(gated, layer.w_down));
}

template <typename S>
Tensor<S> layer_forward(Graph<S>& g, const Tensor<S>& x, const LayerParams<S>& layer,
                        const ModelConfig& cfg, std::span<const int64_t> positions) {
  return layer_forward(g, x, layer, cfg, positions, build_masks<S>(cfg, x.shape()[0]));
}

template <typename S>
Tensor<S> lm_head(Graph<S>& g, const ModelParams<S>& params, const Tensor<S>& h) {
  return g.matmul(g.rms_norm(h, params.final_norm, static_cast<S>(params.config.rmsnorm_eps)),
                  params.head);
}

// Plain one-pass stack: embed, each layer once in order, head. This is both
// the baseline forward and the reference composition the unroll oracle feeds
// with duplicated layers.
template <typename S>
Tensor<S> stack_forward(Graph<S>& g, const ModelParams<S>& params,
                        std::span<const int32_t> token_ids,
                        std::span<const int64_t> positions) {
  const AttnMasks<S> masks = build_masks<S>(params.config, static_cast<int64_t>(token_ids.size()));
  Tensor<S> h = embed(g, params, token_ids);
  for (const auto& layer : params.layers)
    h = layer_forward(g, h, layer, params.config, positions, masks);
  return lm_head(g, params, h);
}

template <typename S>
Tensor<S> stack_forward(Graph<S>& g, const ModelParams<S>& params,
                        std::span<const int32_t> token_ids) {
  const auto pos = default_positions(static_cast<int64_t>(token_ids.size()));
  return stack_forward(g, params, token_ids, pos);
}

}  // namespace ilr
