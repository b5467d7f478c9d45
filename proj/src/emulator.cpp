#include "icot/emulator.hpp"

#include "icot/checkpoint.hpp"
#include "icot/mult_data.hpp"
#include "icot/ops.hpp"

namespace icot {

Tensor temper(const Tensor& comp_logits, float temperature) {
  if (!(temperature > 0.f)) {
    throw ContractError("temper: temperature must be positive, got " +
                        std::to_string(temperature));
  }
  return softmax(scale(comp_logits, 1.f / temperature), -1);
}

nlohmann::json EmulatorConfig::to_json() const {
  return {{"backbone", backbone.to_json()}, {"mixture_enabled", mixture_enabled}};
}

EmulatorConfig EmulatorConfig::from_json(const nlohmann::json& j) {
  EmulatorConfig c;
  c.backbone = TransformerConfig::from_json(j.at("backbone"));
  c.mixture_enabled = j.at("mixture_enabled").get<bool>();
  return c;
}

MixtureEmulator::MixtureEmulator(const EmulatorConfig& cfg, uint64_t seed)
    : cfg_(cfg), backbone_(cfg.backbone, seed) {
  std::mt19937 rng(static_cast<unsigned>(seed ^ 0x9e3779b97f4a7c15ull));
  const int h = cfg_.backbone.hidden_size;
  const int v = cfg_.backbone.vocab_size;
  const float sd = 0.02f;
  head_g_w_ = Tensor::randn({h, v}, rng, sd, true);
  head_g_b_ = Tensor::zeros({v}, true);
  comp_embed_ = Tensor::randn({v, h}, rng, sd, true);
  f_w1_ = Tensor::randn({2 * h, 4 * h}, rng, sd, true);
  f_b1_ = Tensor::zeros({4 * h}, true);
  f_w2_ = Tensor::randn({4 * h, h}, rng, sd, true);
  f_b2_ = Tensor::zeros({h}, true);
  lstm_wx_ = Tensor::randn({h, 4 * h}, rng, sd, true);
  lstm_wh_ = Tensor::randn({h, 4 * h}, rng, sd, true);
  lstm_b_ = Tensor::zeros({4 * h}, true);
  attn_q_ = Tensor::randn({h, h}, rng, sd, true);
  attn_k_ = Tensor::randn({h, h}, rng, sd, true);
  out_w_ = Tensor::randn({2 * h, h}, rng, sd, true);
  out_b_ = Tensor::zeros({h}, true);
}

EmulatorTrace MixtureEmulator::emulate(const std::vector<int>& ids,
                                       const EmulateOptions& opts) const {
  const int n_layers = cfg_.backbone.n_layers;
  const int h = cfg_.backbone.hidden_size;
  const int v = cfg_.backbone.vocab_size;
  if (opts.component_override &&
      static_cast<int>(opts.component_override->size()) != n_layers) {
    throw ContractError("emulate: component override has " +
                        std::to_string(opts.component_override->size()) +
                        " entries, expected " + std::to_string(n_layers));
  }
  if (opts.component_override) {
    for (int c : *opts.component_override) {
      if (c < 0 || c >= v) {
        throw ContractError("emulate: component id " + std::to_string(c) +
                            " outside vocab of size " + std::to_string(v));
      }
    }
  }
  if (!opts.component_override && opts.mode == ComponentMode::tempered &&
      !(opts.temperature > 0.f)) {
    throw ContractError("emulate: temperature must be positive");
  }

  Tensor x = backbone_.input_embedding(ids);
  const int last = static_cast<int>(ids.size()) - 1;

  Tensor h_lstm = Tensor::zeros({1, h});
  Tensor c_lstm = Tensor::zeros({1, h});
  Tensor context_prev = Tensor::zeros({1, h});
  std::vector<Tensor> zhat_history;  // [H] rows

  EmulatorTrace trace;
  for (int l = 0; l < n_layers; ++l) {
    x = backbone_.run_block(l, x);
    TraceLayer layer;
    Tensor h_vec = row(x, last);
    layer.h = h_vec;
    Tensor h_row = reshape(h_vec, {1, h});
    Tensor logits_row = add_bias(matmul_rowwise(h_row, head_g_w_), head_g_b_);
    layer.comp_logits = row(logits_row, 0);

    Tensor comp_emb;  // [1 x H]
    if (!cfg_.mixture_enabled) {
      layer.component_id = 1;
      comp_emb = embed(comp_embed_, {1});
    } else if (opts.component_override) {
      layer.component_id = (*opts.component_override)[static_cast<size_t>(l)];
      comp_emb = embed(comp_embed_, {layer.component_id});
    } else if (opts.mode == ComponentMode::hard_argmax) {
      layer.component_id = argmax_row(layer.comp_logits, 0);
      comp_emb = embed(comp_embed_, {layer.component_id});
    } else {
      Tensor wts = temper(logits_row, opts.temperature);
      layer.component_weights = row(wts, 0);
      comp_emb = matmul_rowwise(wts, comp_embed_);
    }

    Tensor f_in = concat(h_row, comp_emb, 1);
    Tensor hidden = relu(add_bias(matmul(f_in, f_w1_), f_b1_));
    Tensor zhat_row = add_bias(matmul(hidden, f_w2_), f_b2_);
    layer.zhat = row(zhat_row, 0);

    // Dot attention of the current f-output over the earlier ones; both
    // sides are linear projections, and the context is the weighted sum of
    // the projected keys.
    Tensor context;
    if (zhat_history.empty()) {
      context = Tensor::zeros({1, h});
    } else {
      Tensor keys = matmul(stack_rows(zhat_history), attn_k_);
      Tensor query = matmul(zhat_row, attn_q_);
      Tensor weights = softmax(matmul(query, transpose(keys)), 1);
      context = matmul(weights, keys);
    }
    layer.context = row(context, 0);

    // LSTM step: the previous context joins the current f-output before
    // the cell input.
    Tensor lstm_in = add(zhat_row, context_prev);
    Tensor gates =
        add_bias(add(matmul(lstm_in, lstm_wx_), matmul(h_lstm, lstm_wh_)), lstm_b_);
    Tensor gi = sigmoid(cols(gates, 0, h));
    Tensor gf = sigmoid(cols(gates, h, 2 * h));
    Tensor gg = tanh_act(cols(gates, 2 * h, 3 * h));
    Tensor go = sigmoid(cols(gates, 3 * h, 4 * h));
    c_lstm = add(mul(gf, c_lstm), mul(gi, gg));
    h_lstm = mul(go, tanh_act(c_lstm));

    Tensor vout = add_bias(matmul(concat(h_lstm, context, 1), out_w_), out_b_);
    if (l + 1 < n_layers) {
      x = replace_rows(x, {{last, row(vout, 0)}});
    }

    context_prev = context;
    zhat_history.push_back(layer.zhat);
    trace.layers.push_back(std::move(layer));
  }
  return trace;
}

Tensor MixtureEmulator::emulation_loss(const EmulatorTrace& trace,
                                       const std::vector<Tensor>& targets,
                                       const std::vector<int>& component_targets) const {
  const int n_layers = cfg_.backbone.n_layers;
  const int h = cfg_.backbone.hidden_size;
  if (static_cast<int>(trace.layers.size()) != n_layers) {
    throw ContractError("emulation_loss: trace has " + std::to_string(trace.layers.size()) +
                        " layers, expected " + std::to_string(n_layers));
  }
  if (static_cast<int>(targets.size()) != n_layers) {
    throw ContractError("emulation_loss: " + std::to_string(targets.size()) +
                        " targets for " + std::to_string(n_layers) + " layers");
  }
  if (cfg_.mixture_enabled &&
      static_cast<int>(component_targets.size()) != n_layers) {
    throw ContractError("emulation_loss: " + std::to_string(component_targets.size()) +
                        " component targets for " + std::to_string(n_layers) + " layers");
  }

  Tensor total;
  for (int l = 0; l < n_layers; ++l) {
    const TraceLayer& layer = trace.layers[static_cast<size_t>(l)];
    const Tensor& target = targets[static_cast<size_t>(l)];
    if (target.ndim() != 1 || target.dim(0) != h) {
      throw DimensionError("emulation_loss: target " + shape_str(target.shape()) +
                           " does not match hidden size " + std::to_string(h));
    }
    // ||z - zhat||^2 as H * mean squared error.
    Tensor sq = scale(mse(layer.zhat, target), static_cast<float>(h));
    Tensor term;
    if (cfg_.mixture_enabled) {
      Tensor nll = cross_entropy(layer.comp_logits,
                                 {component_targets[static_cast<size_t>(l)]}, -1);
      term = add(scale(sq, 0.5f), nll);
    } else {
      term = sq;
    }
    total = l == 0 ? term : add(total, term);
  }
  return total;
}

std::vector<std::string> MixtureEmulator::decode_components(
    const std::vector<int>& ids) const {
  if (!cfg_.mixture_enabled) {
    throw ContractError("decode_components: unsupported mode, emulator has no mixture head");
  }
  NoGradGuard ng;
  EmulatorTrace trace = emulate(ids, {});
  std::vector<std::string> out;
  for (const auto& layer : trace.layers) {
    out.push_back(Vocab::instance().token(layer.component_id));
  }
  return out;
}

ParamList MixtureEmulator::named_params(const std::string& prefix) const {
  ParamList out = backbone_.named_params(prefix + "backbone.");
  out.push_back({prefix + "head_g.w", head_g_w_});
  out.push_back({prefix + "head_g.b", head_g_b_});
  out.push_back({prefix + "component_embed", comp_embed_});
  out.push_back({prefix + "predictor_f.w1", f_w1_});
  out.push_back({prefix + "predictor_f.b1", f_b1_});
  out.push_back({prefix + "predictor_f.w2", f_w2_});
  out.push_back({prefix + "predictor_f.b2", f_b2_});
  out.push_back({prefix + "lstm.wx", lstm_wx_});
  out.push_back({prefix + "lstm.wh", lstm_wh_});
  out.push_back({prefix + "lstm.b", lstm_b_});
  out.push_back({prefix + "attn.q", attn_q_});
  out.push_back({prefix + "attn.k", attn_k_});
  out.push_back({prefix + "out_proj.w", out_w_});
  out.push_back({prefix + "out_proj.b", out_b_});
  return out;
}

ParamList MixtureEmulator::trainable_params(const std::string& prefix) const {
  ParamList out;
  for (auto& p : named_params(prefix)) {
    std::string local = p.name.substr(prefix.size());
    if (local == "backbone.lnf.g" || local == "backbone.lnf.b" ||
        local == "backbone.head") {
      continue;
    }
    if (!cfg_.mixture_enabled && local.rfind("head_g.", 0) == 0) continue;
    out.push_back(std::move(p));
  }
  return out;
}

nlohmann::json MixtureEmulator::to_checkpoint_config() const {
  return {{"kind", "emulator"}, {"emulator", cfg_.to_json()}};
}

MixtureEmulator MixtureEmulator::from_named_tensors(
    const EmulatorConfig& cfg,
    const std::vector<std::pair<std::string, Tensor>>& tensors,
    const std::string& prefix) {
  MixtureEmulator em(cfg, 0);
  fill_params_from(tensors, em.named_params(prefix));
  return em;
}

}  // namespace icot
