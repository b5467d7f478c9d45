#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "icot/emulator.hpp"
#include "icot/mult_data.hpp"
#include "icot/ops.hpp"
#include "icot/schedule.hpp"

using namespace icot;

namespace {

EmulatorConfig tiny_emu_cfg(int layers = 2, int hidden = 8, bool mixture = true) {
  EmulatorConfig c;
  c.backbone.n_layers = layers;
  c.backbone.hidden_size = hidden;
  c.backbone.n_heads = 2;
  c.backbone.vocab_size = Vocab::instance().size();
  c.backbone.max_positions = 32;
  c.mixture_enabled = mixture;
  return c;
}

// Straight-line double-precision re-implementation of the vertical chain
// pieces, reading the emulator's weights via named_params.
struct ChainOracle {
  int h;
  std::vector<double> f_w1, f_b1, f_w2, f_b2;
  std::vector<double> comp_embed;
  std::vector<double> lstm_wx, lstm_wh, lstm_b;
  std::vector<double> attn_q, attn_k;
  std::vector<double> out_w, out_b;

  static std::vector<double> grab(const ParamList& ps, const std::string& name) {
    for (const auto& p : ps) {
      if (p.name == name)
        return std::vector<double>(p.tensor.data(), p.tensor.data() + p.tensor.numel());
    }
    REQUIRE_MESSAGE(false, "missing param ", name);
    return {};
  }

  explicit ChainOracle(const MixtureEmulator& em) {
    h = em.config().backbone.hidden_size;
    auto ps = em.named_params();
    f_w1 = grab(ps, "predictor_f.w1");
    f_b1 = grab(ps, "predictor_f.b1");
    f_w2 = grab(ps, "predictor_f.w2");
    f_b2 = grab(ps, "predictor_f.b2");
    comp_embed = grab(ps, "component_embed");
    lstm_wx = grab(ps, "lstm.wx");
    lstm_wh = grab(ps, "lstm.wh");
    lstm_b = grab(ps, "lstm.b");
    attn_q = grab(ps, "attn.q");
    attn_k = grab(ps, "attn.k");
    out_w = grab(ps, "out_proj.w");
    out_b = grab(ps, "out_proj.b");
  }

  static std::vector<double> matvec(const std::vector<double>& mat, int rows, int colsn,
                                    const std::vector<double>& x) {
    // x [rows] * mat [rows x colsn]
    std::vector<double> y(static_cast<size_t>(colsn), 0.0);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < colsn; ++c) y[static_cast<size_t>(c)] += x[static_cast<size_t>(r)] * mat[static_cast<size_t>(r) * colsn + c];
    return y;
  }

  std::vector<double> predict_f(const std::vector<double>& hvec, int comp) const {
    std::vector<double> in(static_cast<size_t>(2 * h));
    for (int i = 0; i < h; ++i) in[static_cast<size_t>(i)] = hvec[static_cast<size_t>(i)];
    for (int i = 0; i < h; ++i)
      in[static_cast<size_t>(h + i)] = comp_embed[static_cast<size_t>(comp) * h + i];
    auto mid = matvec(f_w1, 2 * h, 4 * h, in);
    for (int i = 0; i < 4 * h; ++i) {
      mid[static_cast<size_t>(i)] += f_b1[static_cast<size_t>(i)];
      if (mid[static_cast<size_t>(i)] < 0) mid[static_cast<size_t>(i)] = 0;
    }
    auto out = matvec(f_w2, 4 * h, h, mid);
    for (int i = 0; i < h; ++i) out[static_cast<size_t>(i)] += f_b2[static_cast<size_t>(i)];
    return out;
  }

  std::vector<double> context_over(const std::vector<std::vector<double>>& history,
                                   const std::vector<double>& zhat) const {
    if (history.empty()) return std::vector<double>(static_cast<size_t>(h), 0.0);
    auto q = matvec(attn_q, h, h, zhat);
    std::vector<std::vector<double>> keys;
    for (const auto& z : history) keys.push_back(matvec(attn_k, h, h, z));
    std::vector<double> scores;
    double mx = -1e300;
    for (const auto& k : keys) {
      double s = 0;
      for (int i = 0; i < h; ++i) s += q[static_cast<size_t>(i)] * k[static_cast<size_t>(i)];
      scores.push_back(s);
      mx = std::max(mx, s);
    }
    double den = 0;
    for (double& s : scores) {
      s = std::exp(s - mx);
      den += s;
    }
    std::vector<double> ctx(static_cast<size_t>(h), 0.0);
    for (size_t j = 0; j < keys.size(); ++j)
      for (int i = 0; i < h; ++i)
        ctx[static_cast<size_t>(i)] += scores[j] / den * keys[j][static_cast<size_t>(i)];
    return ctx;
  }

  struct CellState {
    std::vector<double> h_out, c;
  };

  CellState cell_step(const std::vector<double>& input, const CellState& prev) const {
    auto gx = matvec(lstm_wx, h, 4 * h, input);
    auto gh = matvec(lstm_wh, h, 4 * h, prev.h_out);
    CellState next{std::vector<double>(static_cast<size_t>(h)), std::vector<double>(static_cast<size_t>(h))};
    for (int i = 0; i < h; ++i) {
      auto gate = [&](int slot) {
        return gx[static_cast<size_t>(slot * h + i)] + gh[static_cast<size_t>(slot * h + i)] +
               lstm_b[static_cast<size_t>(slot * h + i)];
      };
      double gi = 1.0 / (1.0 + std::exp(-gate(0)));
      double gf = 1.0 / (1.0 + std::exp(-gate(1)));
      double gg = std::tanh(gate(2));
      double go = 1.0 / (1.0 + std::exp(-gate(3)));
      next.c[static_cast<size_t>(i)] = gf * prev.c[static_cast<size_t>(i)] + gi * gg;
      next.h_out[static_cast<size_t>(i)] = go * std::tanh(next.c[static_cast<size_t>(i)]);
    }
    return next;
  }

  std::vector<double> out_proj(const std::vector<double>& lstm_out,
                               const std::vector<double>& ctx) const {
    std::vector<double> in(static_cast<size_t>(2 * h));
    for (int i = 0; i < h; ++i) {
      in[static_cast<size_t>(i)] = lstm_out[static_cast<size_t>(i)];
      in[static_cast<size_t>(h + i)] = ctx[static_cast<size_t>(i)];
    }
    auto out = matvec(out_w, 2 * h, h, in);
    for (int i = 0; i < h; ++i) out[static_cast<size_t>(i)] += out_b[static_cast<size_t>(i)];
    return out;
  }
};

std::vector<double> to_vec(const Tensor& t) {
  return std::vector<double>(t.data(), t.data() + t.numel());
}

void check_close(const std::vector<double>& a, const std::vector<double>& b, double tol) {
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(std::fabs(a[i] - b[i]) <= tol * std::max(1.0, std::fabs(b[i])));
  }
}

}  // namespace

TEST_CASE("trace shape law") {
  MixtureEmulator em(tiny_emu_cfg(2, 8), 3);
  auto tr = em.emulate({1, 2, 15});
  REQUIRE(tr.layers.size() == 2);
  for (const auto& l : tr.layers) {
    CHECK(l.zhat.shape() == Shape{8});
    CHECK(l.h.shape() == Shape{8});
    CHECK(l.context.shape() == Shape{8});
    CHECK(l.comp_logits.shape() == Shape{18});
  }
}

TEST_CASE("non-mixture emulator pins every component to 1") {
  MixtureEmulator em(tiny_emu_cfg(3, 8, /*mixture=*/false), 5);
  for (auto ids : {std::vector<int>{1, 15}, {9, 8, 7, 15}, {0, 15}}) {
    auto tr = em.emulate(ids);
    for (const auto& l : tr.layers) CHECK(l.component_id == 1);
  }
}

TEST_CASE("zero lstm and out_proj substitute exact zeros between blocks") {
  auto cfg = tiny_emu_cfg(3, 8);
  MixtureEmulator em(cfg, 11);
  for (auto& p : em.named_params()) {
    if (p.name.rfind("lstm.", 0) == 0 || p.name.rfind("out_proj.", 0) == 0) {
      std::fill(p.tensor.data(), p.tensor.data() + p.tensor.numel(), 0.f);
    }
  }
  std::vector<int> ids{3, 10, 4, 15};
  NoGradGuard ng;
  auto tr = em.emulate(ids);

  // Zero weights make the cell output (and thus every substituted vector)
  // exactly zero, so the trace must equal a hand-interleaved forward pass
  // with zero vectors patched in, bit for bit.
  TransformerLM backbone = TransformerLM::from_named_tensors(
      cfg.backbone, [&] {
        std::vector<std::pair<std::string, Tensor>> ts;
        for (auto& p : em.named_params()) ts.emplace_back(p.name, p.tensor);
        return ts;
      }(), "backbone.");
  Tensor x = backbone.input_embedding(ids);
  for (int l = 0; l < 3; ++l) {
    x = backbone.run_block(l, x);
    Tensor hl = row(x, 3);
    for (int i = 0; i < 8; ++i) {
      CHECK(hl.data()[i] == tr.layers[static_cast<size_t>(l)].h.data()[i]);
    }
    if (l + 1 < 3) x = replace_rows(x, {{3, Tensor::zeros({8})}});
  }
}

TEST_CASE("vertical chain matches the straight-line recurrence oracle") {
  auto cfg = tiny_emu_cfg(3, 8);
  MixtureEmulator em(cfg, 21);
  // Bigger weights than init so the chain actually does something.
  std::mt19937 rng(99);
  std::normal_distribution<float> nd(0.f, 0.4f);
  for (auto& p : em.named_params()) {
    if (p.name.rfind("backbone.", 0) == 0) continue;
    for (int64_t i = 0; i < p.tensor.numel(); ++i) p.tensor.data()[i] = nd(rng);
  }

  std::vector<int> ids{3, 10, 4, 15};
  std::vector<int> override{2, 7, 11};
  NoGradGuard ng;
  auto tr = em.emulate(ids, {override, ComponentMode::hard_argmax, 1.f});

  // Replay the whole chain: blocks through the real backbone, everything
  // the emulator adds (f, attention, cell, out_proj, wiring) recomputed in
  // double precision.
  ChainOracle oracle(em);
  TransformerLM backbone = TransformerLM::from_named_tensors(
      cfg.backbone, [&] {
        std::vector<std::pair<std::string, Tensor>> ts;
        for (auto& p : em.named_params()) ts.emplace_back(p.name, p.tensor);
        return ts;
      }(), "backbone.");
  Tensor x = backbone.input_embedding(ids);
  ChainOracle::CellState state{std::vector<double>(8, 0.0), std::vector<double>(8, 0.0)};
  std::vector<double> context_prev(8, 0.0);
  std::vector<std::vector<double>> history;
  for (int l = 0; l < 3; ++l) {
    x = backbone.run_block(l, x);
    auto h_l = to_vec(row(x, 3));
    check_close(to_vec(tr.layers[static_cast<size_t>(l)].h), h_l, 1e-3);
    auto zhat = oracle.predict_f(h_l, override[static_cast<size_t>(l)]);
    check_close(to_vec(tr.layers[static_cast<size_t>(l)].zhat), zhat, 1e-3);
    auto ctx = oracle.context_over(history, zhat);
    check_close(to_vec(tr.layers[static_cast<size_t>(l)].context), ctx, 1e-3);
    std::vector<double> cell_in(8);
    for (int i = 0; i < 8; ++i) {
      cell_in[static_cast<size_t>(i)] =
          zhat[static_cast<size_t>(i)] + context_prev[static_cast<size_t>(i)];
    }
    state = oracle.cell_step(cell_in, state);
    if (l + 1 < 3) {
      auto vout = oracle.out_proj(state.h_out, ctx);
      std::vector<float> vf(vout.begin(), vout.end());
      x = replace_rows(x, {{3, Tensor::from_data({8}, vf)}});
    }
    context_prev = ctx;
    history.push_back(zhat);
  }
}

TEST_CASE("emulation_loss vanishes at a perfect prediction") {
  auto cfg = tiny_emu_cfg(2, 8);
  MixtureEmulator em(cfg, 31);
  std::mt19937 rng(4);
  std::vector<Tensor> targets{Tensor::randn({8}, rng, 1.f), Tensor::randn({8}, rng, 1.f)};

  EmulatorTrace tr;
  for (int l = 0; l < 2; ++l) {
    TraceLayer layer;
    layer.zhat = targets[static_cast<size_t>(l)].detach();
    std::vector<float> logits(18, -100.f);
    logits[static_cast<size_t>(5 + l)] = 100.f;
    layer.comp_logits = Tensor::from_data({18}, std::move(logits));
    layer.component_id = 5 + l;
    tr.layers.push_back(std::move(layer));
  }
  Tensor loss = em.emulation_loss(tr, targets, {5, 6});
  CHECK(loss.item() == doctest::Approx(0.f).epsilon(1e-6));
}

TEST_CASE("non-mixture loss is the plain summed squared error") {
  auto cfg = tiny_emu_cfg(2, 4, /*mixture=*/false);
  MixtureEmulator em(cfg, 31);
  EmulatorTrace tr;
  std::vector<Tensor> targets;
  TraceLayer l0, l1;
  l0.zhat = Tensor::from_data({4}, {1, 0, 0, 0});
  l1.zhat = Tensor::from_data({4}, {0, 2, 0, 0});
  tr.layers = {l0, l1};
  targets = {Tensor::zeros({4}), Tensor::zeros({4})};
  CHECK(em.emulation_loss(tr, targets, {}).item() == doctest::Approx(5.f));
  targets = {l0.zhat.detach(), l1.zhat.detach()};
  CHECK(em.emulation_loss(tr, targets, {}).item() == 0.f);
}

TEST_CASE("two-pathway set: midpoint is the single-prediction optimum") {
  std::mt19937 rng(8);
  const int h = 16;
  Tensor u = normalize_state(Tensor::randn({h}, rng, 1.f));
  Tensor v = normalize_state(Tensor::randn({h}, rng, 1.f));
  auto sq_dist = [&](const Tensor& a, const Tensor& b) {
    double acc = 0;
    for (int i = 0; i < h; ++i) {
      double d = a.data()[i] - b.data()[i];
      acc += d * d;
    }
    return acc;
  };
  double sep = sq_dist(u, v);
  std::vector<float> mid(static_cast<size_t>(h));
  for (int i = 0; i < h; ++i) mid[static_cast<size_t>(i)] = 0.5f * (u.data()[i] + v.data()[i]);
  Tensor m = Tensor::from_data({h}, std::move(mid));

  auto objective = [&](const Tensor& p) { return 0.5 * sq_dist(u, p) + 0.5 * sq_dist(v, p); };
  double floor = sep / 4.0;
  CHECK(objective(m) == doctest::Approx(floor).epsilon(1e-5));
  // Committing to either pathway is strictly worse than the midpoint...
  CHECK(objective(u) == doctest::Approx(sep / 2.0).epsilon(1e-5));
  CHECK(objective(u) > objective(m));
  // ...while one mixture component per pathway reaches zero error, below
  // the best any single prediction can do.
  CHECK(0.0 < floor);
}

TEST_CASE("temper closed forms") {
  Tensor uniform = Tensor::zeros({4});
  Tensor w = temper(uniform, 0.37f);
  for (int i = 0; i < 4; ++i) CHECK(w.data()[i] == doctest::Approx(0.25));

  Tensor logits = Tensor::from_data({2}, {std::log(0.6f), std::log(0.4f)});
  Tensor sharp = temper(logits, 0.05f);
  double p20 = std::pow(1.5, 20.0);
  CHECK(sharp.data()[0] == doctest::Approx(p20 / (p20 + 1.0)).epsilon(1e-4));
  CHECK(sharp.data()[0] == doctest::Approx(0.9997).epsilon(1e-3));

  Tensor flat = temper(logits, 1000.f);
  CHECK(flat.data()[0] == doctest::Approx(0.5).epsilon(1e-3));

  std::mt19937 rng(3);
  Tensor r = Tensor::randn({7}, rng, 2.f);
  Tensor t1 = temper(r, 1.f);
  Tensor sm = softmax(r, 0);
  for (int i = 0; i < 7; ++i) CHECK(t1.data()[i] == sm.data()[i]);

  CHECK_THROWS_AS(temper(logits, 0.f), ContractError);
  CHECK_THROWS_AS(temper(logits, -1.f), ContractError);
}

TEST_CASE("teacher-forced mixture loss ignores logit shifts") {
  auto cfg = tiny_emu_cfg(1, 4);
  MixtureEmulator em(cfg, 2);
  std::mt19937 rng(14);
  Tensor target = Tensor::randn({4}, rng, 1.f);
  Tensor logits = Tensor::randn({18}, rng, 1.f);

  auto loss_with = [&](float shift) {
    TraceLayer layer;
    layer.zhat = Tensor::zeros({4});
    std::vector<float> lv(logits.data(), logits.data() + 18);
    for (auto& x : lv) x += shift;
    layer.comp_logits = Tensor::from_data({18}, std::move(lv));
    EmulatorTrace tr;
    tr.layers.push_back(std::move(layer));
    return em.emulation_loss(tr, {target}, {9}).item();
  };
  CHECK(loss_with(0.f) == doctest::Approx(loss_with(4.f)).epsilon(1e-5));
}

TEST_CASE("gradients reach the backbone parameters") {
  // Four layers so the attention query feeds a substituted vector through
  // a real (two-entry) softmax; weights above init scale so the relu
  // pre-activations sit away from their kinks.
  auto cfg = tiny_emu_cfg(4, 8);
  MixtureEmulator em(cfg, 77);
  std::mt19937 wrng(123);
  std::normal_distribution<float> nd(0.f, 0.3f);
  for (auto& p : em.named_params()) {
    if (p.name.rfind("backbone.", 0) == 0) continue;
    for (int64_t i = 0; i < p.tensor.numel(); ++i) p.tensor.data()[i] = nd(wrng);
  }
  std::vector<int> ids{3, 10, 4, 15};
  std::vector<int> override{2, 7, 11, 5};
  std::mt19937 rng(6);
  std::vector<Tensor> targets{Tensor::randn({8}, rng, 1.f), Tensor::randn({8}, rng, 1.f),
                              Tensor::randn({8}, rng, 1.f), Tensor::randn({8}, rng, 1.f)};

  auto make_loss = [&]() {
    auto tr = em.emulate(ids, {override, ComponentMode::hard_argmax, 1.f});
    return em.emulation_loss(tr, targets, override);
  };
  Tensor loss = make_loss();
  backward(loss);

  // Spot-check the largest-gradient coordinates against the FD quotient;
  // small ones drown in f32 readout quantization.
  std::vector<std::string> picks{"backbone.wte", "backbone.blocks.0.attn.wq",
                                 "backbone.blocks.1.mlp.fc1", "head_g.w", "lstm.wx",
                                 "attn.q", "attn.k", "predictor_f.w1", "out_proj.w",
                                 "component_embed"};
  for (auto& p : em.named_params()) {
    if (std::find(picks.begin(), picks.end(), p.name) == picks.end()) continue;
    REQUIRE_MESSAGE(p.tensor.has_grad(), p.name);
    const auto& g = p.tensor.grad_ref();
    double norm = 0;
    for (float gv : g) norm += static_cast<double>(gv) * gv;
    INFO(p.name);
    CHECK(norm > 0.0);

    std::vector<int64_t> order(static_cast<size_t>(p.tensor.numel()));
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int64_t>(i);
    std::sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
      return std::fabs(g[static_cast<size_t>(a)]) > std::fabs(g[static_cast<size_t>(b)]);
    });
    for (int k = 0; k < 3; ++k) {
      int64_t i = order[static_cast<size_t>(k)];
      float saved = p.tensor.data()[i];
      NoGradGuard ng;
      const float fd_h = 1e-3f;
      p.tensor.data()[i] = saved + fd_h;
      double lp = make_loss().item();
      p.tensor.data()[i] = saved - fd_h;
      double lm = make_loss().item();
      p.tensor.data()[i] = saved;
      double numeric = (lp - lm) / (2.0 * fd_h);
      double analytic = g[static_cast<size_t>(i)];
      INFO(p.name, "[", i, "] analytic=", analytic, " numeric=", numeric);
      CHECK(std::fabs(analytic - numeric) <=
            std::max(2e-3, 0.1 * std::max(std::fabs(analytic), std::fabs(numeric))));
    }
  }
}

TEST_CASE("decode_components") {
  MixtureEmulator em(tiny_emu_cfg(3, 8), 13);
  auto words = em.decode_components({1, 2, 15});
  CHECK(words.size() == 3);
  for (const auto& w : words) CHECK_NOTHROW(Vocab::instance().id(w));

  MixtureEmulator plain(tiny_emu_cfg(2, 8, /*mixture=*/false), 13);
  CHECK_THROWS_WITH_AS(plain.decode_components({1, 15}),
                       doctest::Contains("unsupported mode"), ContractError);
}

TEST_CASE("override length contract") {
  MixtureEmulator em(tiny_emu_cfg(2, 8), 1);
  CHECK_THROWS_AS(em.emulate({1, 15}, {std::vector<int>{1}, ComponentMode::hard_argmax, 1.f}),
                  ContractError);
  CHECK_THROWS_AS(em.emulation_loss(EmulatorTrace{}, {}, {}), ContractError);
}
