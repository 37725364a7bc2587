#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <random>

#include "ilr/model.hpp"
#include "testutil.hpp"

using namespace ilr;
using testutil::fill_uniform;
using testutil::max_abs_diff;
using testutil::max_rel_err;

namespace {

ModelConfig tiny_config(PositionalMode mode) {
  ModelConfig c = ModelConfig::verify_tiny();
  c.max_seq_len = 64;
  c.pos_mode = mode;
  c.finalize();
  return c;
}

std::vector<int32_t> ramp_ids(int64_t t, int64_t vocab) {
  std::vector<int32_t> ids(static_cast<size_t>(t));
  for (int64_t i = 0; i < t; ++i) ids[static_cast<size_t>(i)] = static_cast<int32_t>(i % vocab);
  return ids;
}

}  // namespace

TEST_CASE("init_params determinism and norm weights") {
  auto cfg = tiny_config(PositionalMode::rope());
  auto a = init_params<double>(cfg, 42);
  auto b = init_params<double>(cfg, 42);
  for (size_t i = 0; i < a.named_parameters().size(); ++i) {
    const auto& [an, at] = a.named_parameters()[i];
    const auto& [bn, bt] = b.named_parameters()[i];
    CHECK(an == bn);
    CHECK(at.values() == bt.values());
  }
  auto c = init_params<double>(cfg, 43);
  CHECK(a.tok_emb.values() != c.tok_emb.values());
  for (const auto& lp : a.layers) {
    for (double v : lp.attn_norm.values()) CHECK(v == 1.0);
    for (double v : lp.mlp_norm.values()) CHECK(v == 1.0);
  }
  for (double v : a.final_norm.values()) CHECK(v == 1.0);
}

TEST_CASE("preset parameter counts: golden values inside the published bands") {
  auto small = ModelConfig::paper_small();
  CHECK(small.mlp_hidden == 344);
  const int64_t small_count = parameter_count(small);
  CHECK(small_count == 1053824);  // golden, fixed by the sizing rule above
  CHECK(std::abs(small_count - 1200000.0) / 1200000.0 < 0.15);

  auto large = ModelConfig::paper_large();
  CHECK(large.mlp_hidden == 2048);
  const int64_t large_count = parameter_count(large);
  CHECK(large_count == 105788160);  // golden
  CHECK(std::abs(large_count - 100000000.0) / 100000000.0 < 0.15);

  // closed form matches the materialized tensors
  auto cfg = tiny_config(PositionalMode::learned_absolute());
  auto p = init_params<double>(cfg, 1);
  CHECK(p.parameter_count() == parameter_count(cfg));
}

TEST_CASE("embed: token rows, learned-absolute addition, gradient") {
  auto cfg = tiny_config(PositionalMode::nope());
  auto p = init_params<double>(cfg, 7);
  std::vector<int32_t> ids{3, 0, 5};
  {
    Graph<double> g;
    auto e = embed(g, p, ids);
    for (size_t r = 0; r < ids.size(); ++r)
      for (int64_t c = 0; c < cfg.hidden_dim; ++c)
        CHECK(e.values()[r * cfg.hidden_dim + c] ==
              p.tok_emb.values()[ids[r] * cfg.hidden_dim + c]);
  }

  auto cfg_l = tiny_config(PositionalMode::learned_absolute());
  auto pl = init_params<double>(cfg_l, 7);
  {
    Graph<double> g;
    auto e = embed(g, pl, ids);
    for (size_t r = 0; r < ids.size(); ++r)
      for (int64_t c = 0; c < cfg_l.hidden_dim; ++c)
        CHECK(e.values()[r * cfg_l.hidden_dim + c] ==
              doctest::Approx(pl.tok_emb.values()[ids[r] * cfg_l.hidden_dim + c] +
                              pl.pos_emb.values()[r * cfg_l.hidden_dim + c])
                  .epsilon(1e-15));
  }

  std::vector<int32_t> bad{static_cast<int32_t>(cfg.vocab)};
  Graph<double> g;
  CHECK_THROWS_AS(embed(g, p, bad), std::invalid_argument);
  std::vector<int32_t> too_long(static_cast<size_t>(cfg.max_seq_len + 1), 0);
  CHECK_THROWS_AS(embed(g, p, too_long), std::invalid_argument);

  // scatter gradient vs finite differences
  std::mt19937_64 rng(5);
  auto sel = Tensor<double>::zeros({3, cfg_l.hidden_dim});
  fill_uniform(sel, rng);
  pl.tok_emb.zero_grad();
  {
    Graph<double> gg;
    gg.backward(gg.sum(gg.mul(embed(gg, pl, ids), sel)));
  }
  auto fd = finite_diff_grad<double>(
      [&](const Tensor<double>&) {
        Graph<double> gg;
        return gg.sum(gg.mul(embed(gg, pl, ids), sel)).value();
      },
      pl.tok_emb, 1e-5);
  CHECK(max_rel_err(pl.tok_emb.grad(), fd) < 1e-6);
}

TEST_CASE("apply_rope: position zero is the exact identity") {
  auto cfg = tiny_config(PositionalMode::rope());
  std::mt19937_64 rng(9);
  auto q = Tensor<double>::zeros({4, cfg.hidden_dim});
  auto k = Tensor<double>::zeros({4, cfg.hidden_dim});
  fill_uniform(q, rng);
  fill_uniform(k, rng);
  std::vector<int64_t> zeros(4, 0);
  Graph<double> g;
  auto [q2, k2] = apply_rope(g, q, k, zeros, cfg.n_heads, 10000.0);
  CHECK(q2.values() == q.values());
  CHECK(k2.values() == k.values());
}

TEST_CASE("rope relative property: scores depend only on position offset") {
  auto cfg = tiny_config(PositionalMode::rope());
  const int64_t t = 6, d = cfg.hidden_dim;
  std::mt19937_64 rng(11);
  auto q = Tensor<double>::zeros({t, d});
  auto k = Tensor<double>::zeros({t, d});
  fill_uniform(q, rng);
  fill_uniform(k, rng);

  auto scores_at = [&](int64_t offset) {
    Graph<double> g;
    std::vector<int64_t> pos(static_cast<size_t>(t));
    for (int64_t i = 0; i < t; ++i) pos[static_cast<size_t>(i)] = i + offset;
    auto [q2, k2] = apply_rope(g, q, k, pos, cfg.n_heads, 10000.0);
    return g.matmul(q2, g.transpose(k2)).values();
  };
  auto base = scores_at(0);
  auto shifted = scores_at(7);
  CHECK(max_abs_diff(base, shifted) < 1e-10);
}

TEST_CASE("alibi bias values") {
  auto slopes8 = alibi_slopes(8);
  CHECK(slopes8[0] == 0.5);
  CHECK(slopes8[7] == doctest::Approx(1.0 / 256.0).epsilon(1e-15));

  const int64_t t = 5;
  auto bias = alibi_bias<double>(3, t);
  CHECK(bias.shape() == Shape{3, t, t});
  for (int h = 0; h < 3; ++h) {
    for (int64_t i = 0; i < t; ++i)
      CHECK(bias.values()[(h * t + i) * t + i] == 0.0);
    for (int64_t i = 0; i + 1 < t; ++i)
      for (int64_t j = 0; j <= i; ++j)
        CHECK(bias.values()[(h * t + i) * t + j] ==
              bias.values()[(h * t + i + 1) * t + j + 1]);
    for (int64_t i = 0; i < t; ++i)
      for (int64_t j = 0; j < i; ++j)
        CHECK(bias.values()[(h * t + i) * t + j] < 0.0);
  }
}

TEST_CASE("attention with a single token reduces to the value path") {
  std::mt19937_64 rng(13);
  for (auto mode : {PositionalMode::nope(), PositionalMode::rope(),
                    PositionalMode::learned_absolute(), PositionalMode::alibi()}) {
    auto cfg = tiny_config(mode);
    auto p = init_params<double>(cfg, 21);
    auto x = Tensor<double>::zeros({1, cfg.hidden_dim});
    fill_uniform(x, rng);

    Graph<double> g;
    std::vector<int64_t> pos{0};
    auto out = attention(g, x, p.layers[0], cfg, pos);

    using M = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Eigen::Map<const M> X(x.values().data(), 1, cfg.hidden_dim);
    Eigen::Map<const M> Wv(p.layers[0].wv.values().data(), cfg.hidden_dim, cfg.hidden_dim);
    Eigen::Map<const M> Wo(p.layers[0].wo.values().data(), cfg.hidden_dim, cfg.hidden_dim);
    M expect = X * Wv * Wo;
    for (int64_t c = 0; c < cfg.hidden_dim; ++c)
      CHECK(out.values()[static_cast<size_t>(c)] == doctest::Approx(expect(0, c)).epsilon(1e-12));
  }
}

TEST_CASE("attention causality: perturbing token t only moves outputs at >= t") {
  auto cfg = tiny_config(PositionalMode::rope());
  auto p = init_params<double>(cfg, 31);
  const int64_t t = 8, d = cfg.hidden_dim;
  std::mt19937_64 rng(17);
  auto x = Tensor<double>::zeros({t, d});
  fill_uniform(x, rng);
  auto pos = default_positions(t);

  auto run = [&]() {
    Graph<double> g;
    return layer_forward(g, x, p.layers[0], cfg, pos).values();
  };
  auto base = run();
  for (int64_t row = 0; row < t; ++row) {
    auto saved = x.values();
    for (int64_t c = 0; c < d; ++c) x.values()[row * d + c] += 0.25;
    auto moved = run();
    x.values() = saved;
    for (int64_t r = 0; r < t; ++r) {
      double diff = 0;
      for (int64_t c = 0; c < d; ++c)
        diff = std::max(diff, std::abs(moved[r * d + c] - base[r * d + c]));
      if (r < row)
        CHECK(diff == 0.0);
      else if (r == row)
        CHECK(diff > 0.0);
    }
  }
}

TEST_CASE("causality via autodiff: no gradient flows to later inputs") {
  auto cfg = tiny_config(PositionalMode::alibi());
  auto p = init_params<double>(cfg, 37);
  const int64_t t = 6, d = cfg.hidden_dim;
  std::mt19937_64 rng(19);
  auto x = Tensor<double>::zeros({t, d}, true);
  fill_uniform(x, rng);
  auto pos = default_positions(t);

  const int64_t probe_row = 2;
  {
    Graph<double> g;
    auto out = layer_forward(g, x, p.layers[0], cfg, pos);
    auto sel = Tensor<double>::zeros({t, d});
    for (int64_t c = 0; c < d; ++c) sel.values()[probe_row * d + c] = 1.0;
    g.backward(g.sum(g.mul(out, sel)));
  }
  for (int64_t r = probe_row + 1; r < t; ++r)
    for (int64_t c = 0; c < d; ++c) CHECK(x.grad()[r * d + c] == 0.0);
  double pre = 0;
  for (int64_t c = 0; c < d; ++c) pre = std::max(pre, std::abs(x.grad()[c]));
  CHECK(pre > 0.0);
}

TEST_CASE("NoPE ignores the positions argument bit-for-bit") {
  auto cfg = tiny_config(PositionalMode::nope());
  auto p = init_params<double>(cfg, 41);
  auto ids = ramp_ids(8, cfg.vocab);

  Graph<double> g1, g2;
  auto pos_a = default_positions(8);
  std::vector<int64_t> pos_b;
  for (int64_t i = 0; i < 8; ++i) pos_b.push_back(i + 5);
  auto la = stack_forward(g1, p, ids, pos_a);
  auto lb = stack_forward(g2, p, ids, pos_b);
  CHECK(la.values() == lb.values());
}

TEST_CASE("layer_forward is the identity when output projections are zero") {
  auto cfg = tiny_config(PositionalMode::rope());
  auto p = init_params<double>(cfg, 43);
  auto& lp = p.layers[0];
  std::fill(lp.wo.values().begin(), lp.wo.values().end(), 0.0);
  std::fill(lp.w_down.values().begin(), lp.w_down.values().end(), 0.0);

  std::mt19937_64 rng(23);
  for (int64_t t : {int64_t{1}, int64_t{8}, int64_t{64}}) {
    auto x = Tensor<double>::zeros({t, cfg.hidden_dim});
    fill_uniform(x, rng);
    Graph<double> g;
    auto pos = default_positions(t);
    auto y = layer_forward(g, x, lp, cfg, pos);
    CHECK(y.shape() == x.shape());
    CHECK(y.values() == x.values());
  }
}

TEST_CASE("full layer gradient vs finite differences at tiny dims") {
  ModelConfig cfg;
  cfg.hidden_dim = 8;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.vocab = 11;
  cfg.max_seq_len = 8;
  cfg.pos_mode = PositionalMode::rope();
  cfg.finalize();
  auto p = init_params<double>(cfg, 47);
  auto& lp = p.layers[0];
  const int64_t t = 4;
  std::mt19937_64 rng(29);
  auto x = Tensor<double>::zeros({t, cfg.hidden_dim}, true);
  fill_uniform(x, rng);
  auto sel = Tensor<double>::zeros({t, cfg.hidden_dim});
  fill_uniform(sel, rng);
  auto pos = default_positions(t);

  auto value = [&]() {
    Graph<double> g;
    return g.sum(g.mul(layer_forward(g, x, lp, cfg, pos), sel)).value();
  };
  x.zero_grad();
  p.zero_grads();
  {
    Graph<double> g;
    g.backward(g.sum(g.mul(layer_forward(g, x, lp, cfg, pos), sel)));
  }
  auto eval = [&](const Tensor<double>&) { return value(); };
  for (Tensor<double>* t_ptr : {&x, &lp.wq, &lp.wo, &lp.w_gate, &lp.w_down, &lp.attn_norm}) {
    auto fd = finite_diff_grad<double>(eval, *t_ptr, 1e-4);
    CHECK(max_rel_err(t_ptr->grad(), fd) < 1e-4);
  }
}

TEST_CASE("lm_head: zero head gives uniform softmax; gradient checks") {
  auto cfg = tiny_config(PositionalMode::nope());
  auto p = init_params<double>(cfg, 53);
  std::fill(p.head.values().begin(), p.head.values().end(), 0.0);
  std::mt19937_64 rng(31);
  auto h = Tensor<double>::zeros({3, cfg.hidden_dim});
  fill_uniform(h, rng);

  Graph<double> g;
  auto logits = lm_head(g, p, h);
  CHECK(logits.shape() == Shape{3, cfg.vocab});
  for (double v : logits.values()) CHECK(v == 0.0);
  auto probs = g.softmax_rows(logits);
  for (double v : probs.values())
    CHECK(v == doctest::Approx(1.0 / static_cast<double>(cfg.vocab)).epsilon(1e-12));

  auto p2 = init_params<double>(cfg, 54);
  auto sel = Tensor<double>::zeros({3, cfg.vocab});
  fill_uniform(sel, rng);
  p2.head.zero_grad();
  {
    Graph<double> gg;
    gg.backward(gg.sum(gg.mul(lm_head(gg, p2, h), sel)));
  }
  auto fd = finite_diff_grad<double>(
      [&](const Tensor<double>&) {
        Graph<double> gg;
        return gg.sum(gg.mul(lm_head(gg, p2, h), sel)).value();
      },
      p2.head, 1e-5);
  CHECK(max_rel_err(p2.head.grad(), fd) < 1e-6);
}

TEST_CASE("stack_forward determinism") {
  auto cfg = tiny_config(PositionalMode::alibi());
  auto p = init_params<double>(cfg, 61);
  auto ids = ramp_ids(12, cfg.vocab);
  Graph<double> g1, g2;
  auto a = stack_forward(g1, p, ids);
  auto b = stack_forward(g2, p, ids);
  CHECK(a.values() == b.values());
}

TEST_CASE("model config json round-trip") {
  auto cfg = ModelConfig::paper_small();
  cfg.pos_mode = PositionalMode::alibi();
  auto j = model_config_to_json(cfg);
  auto back = model_config_from_json(j);
  CHECK(back == cfg);
  CHECK(model_config_to_json(back) == j);

  auto bad = j;
  bad["n_head"] = 4;
  CHECK_THROWS_AS(model_config_from_json(bad), std::invalid_argument);
}
