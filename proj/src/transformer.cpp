#include "icot/transformer.hpp"

#include <cmath>
#include <set>

#include "icot/checkpoint.hpp"
#include "icot/ops.hpp"

namespace icot {

void TransformerConfig::validate() const {
  if (n_layers < 1) throw ContractError("config: n_layers must be >= 1");
  if (n_heads < 1) throw ContractError("config: n_heads must be >= 1");
  if (hidden_size % n_heads != 0) {
    throw ContractError("config: hidden_size " + std::to_string(hidden_size) +
                        " not divisible by n_heads " + std::to_string(n_heads));
  }
  if (vocab_size < 1) throw ContractError("config: vocab_size must be >= 1");
  if (max_positions < 1) throw ContractError("config: max_positions must be >= 1");
  if (!(dropout >= 0.f && dropout < 1.f)) {
    throw ContractError("config: dropout must be in [0,1)");
  }
  if (dropout != 0.f) {
    throw ContractError("config: nonzero dropout is not supported (deterministic runs)");
  }
}

nlohmann::json TransformerConfig::to_json() const {
  return {{"n_layers", n_layers},   {"hidden_size", hidden_size},
          {"n_heads", n_heads},     {"vocab_size", vocab_size},
          {"max_positions", max_positions}, {"dropout", dropout},
          {"tied_output", tied_output}};
}

TransformerConfig TransformerConfig::from_json(const nlohmann::json& j) {
  TransformerConfig c;
  c.n_layers = j.at("n_layers").get<int>();
  c.hidden_size = j.at("hidden_size").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_positions = j.at("max_positions").get<int>();
  c.dropout = j.value("dropout", 0.f);
  c.tied_output = j.value("tied_output", false);
  c.validate();
  return c;
}

Tensor StateMatrix::at(int layer, int pos) const {
  if (layer < 0 || layer >= n_layers) {
    throw ContractError("state layer " + std::to_string(layer) + " out of range [0," +
                        std::to_string(n_layers) + ")");
  }
  if (pos < 0 || pos >= seq_len) {
    throw ContractError("state position " + std::to_string(pos) + " out of range [0," +
                        std::to_string(seq_len) + ")");
  }
  return row(layers[static_cast<size_t>(layer)], pos);
}

TransformerLM::TransformerLM(const TransformerConfig& cfg, uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937 rng(static_cast<unsigned>(seed));
  const int h = cfg_.hidden_size;
  const float sd = 0.02f;

  wte_ = Tensor::randn({cfg_.vocab_size, h}, rng, sd, true);
  wpe_ = Tensor::randn({cfg_.max_positions, h}, rng, sd, true);
  blocks_.resize(static_cast<size_t>(cfg_.n_layers));
  for (auto& b : blocks_) {
    b.ln1_g = Tensor::full({h}, 1.f, true);
    b.ln1_b = Tensor::zeros({h}, true);
    b.wq = Tensor::randn({h, h}, rng, sd, true);
    b.bq = Tensor::zeros({h}, true);
    b.wk = Tensor::randn({h, h}, rng, sd, true);
    b.bk = Tensor::zeros({h}, true);
    b.wv = Tensor::randn({h, h}, rng, sd, true);
    b.bv = Tensor::zeros({h}, true);
    b.wo = Tensor::randn({h, h}, rng, sd, true);
    b.bo = Tensor::zeros({h}, true);
    b.ln2_g = Tensor::full({h}, 1.f, true);
    b.ln2_b = Tensor::zeros({h}, true);
    b.fc1 = Tensor::randn({h, 4 * h}, rng, sd, true);
    b.fb1 = Tensor::zeros({4 * h}, true);
    b.fc2 = Tensor::randn({4 * h, h}, rng, sd, true);
    b.fb2 = Tensor::zeros({h}, true);
  }
  lnf_g_ = Tensor::full({h}, 1.f, true);
  lnf_b_ = Tensor::zeros({h}, true);
  if (!cfg_.tied_output) {
    head_ = Tensor::randn({h, cfg_.vocab_size}, rng, sd, true);
  }
}

Tensor TransformerLM::head_weight() const {
  return cfg_.tied_output ? transpose(wte_) : head_;
}

ForwardResult TransformerLM::forward(const std::vector<int>& ids,
                                     const Substitution& subs) const {
  const int t = static_cast<int>(ids.size());
  const int h = cfg_.hidden_size;
  if (t == 0) throw ContractError("forward: empty token sequence");
  if (t > cfg_.max_positions) {
    throw ContractError("forward: sequence length " + std::to_string(t) +
                        " exceeds max_positions " + std::to_string(cfg_.max_positions));
  }
  std::set<std::pair<int, int>> seen;
  for (const auto& s : subs) {
    if (s.layer < 0 || s.layer >= cfg_.n_layers) {
      throw ContractError("substitution layer " + std::to_string(s.layer) +
                          " out of range [0," + std::to_string(cfg_.n_layers) + ")");
    }
    if (s.pos < 0 || s.pos >= t) {
      throw ContractError("substitution position " + std::to_string(s.pos) +
                          " out of range [0," + std::to_string(t) + ")");
    }
    if (!seen.insert({s.layer, s.pos}).second) {
      throw ContractError("duplicate substitution at layer " + std::to_string(s.layer) +
                          ", position " + std::to_string(s.pos));
    }
    if (s.vec.ndim() != 1 || s.vec.dim(0) != h) {
      throw DimensionError("substitution vector " + shape_str(s.vec.shape()) +
                           " does not match hidden size " + std::to_string(h));
    }
  }

  Tensor x = input_embedding(ids);

  StateMatrix states;
  states.n_layers = cfg_.n_layers;
  states.seq_len = t;
  states.hidden = h;

  for (int l = 0; l < cfg_.n_layers; ++l) {
    x = run_block(l, x);
    std::vector<std::pair<int, Tensor>> layer_subs;
    for (const auto& s : subs) {
      if (s.layer == l) layer_subs.emplace_back(s.pos, s.vec);
    }
    if (!layer_subs.empty()) x = replace_rows(x, layer_subs);
    states.layers.push_back(x);
  }

  Tensor final = layer_norm(x, &lnf_g_, &lnf_b_, kLayerNormEps);
  Tensor logits = matmul_rowwise(final, head_weight());
  return {logits, std::move(states)};
}

Tensor TransformerLM::input_embedding(const std::vector<int>& ids) const {
  const int t = static_cast<int>(ids.size());
  if (t == 0) throw ContractError("input_embedding: empty token sequence");
  if (t > cfg_.max_positions) {
    throw ContractError("input_embedding: sequence length " + std::to_string(t) +
                        " exceeds max_positions " + std::to_string(cfg_.max_positions));
  }
  std::vector<int> positions(static_cast<size_t>(t));
  for (int i = 0; i < t; ++i) positions[static_cast<size_t>(i)] = i;
  return add(embed(wte_, ids), embed(wpe_, positions));
}

Tensor TransformerLM::run_block(int layer, const Tensor& x) const {
  if (layer < 0 || layer >= cfg_.n_layers) {
    throw ContractError("run_block: layer " + std::to_string(layer) + " out of range");
  }
  if (x.ndim() != 2 || x.dim(1) != cfg_.hidden_size) {
    throw DimensionError("run_block: input " + shape_str(x.shape()) +
                         " does not match hidden size " + std::to_string(cfg_.hidden_size));
  }
  const int t = x.dim(0);
  const int n_heads = cfg_.n_heads;
  const int dh = cfg_.hidden_size / n_heads;
  const float att_scale = 1.f / std::sqrt(static_cast<float>(dh));

  // Causal mask, 0 on/below the diagonal, -1e9 above.
  std::vector<float> maskv(static_cast<size_t>(t) * t, 0.f);
  for (int i = 0; i < t; ++i)
    for (int j = i + 1; j < t; ++j) maskv[static_cast<size_t>(i) * t + j] = -1e9f;
  Tensor mask = Tensor::from_data({t, t}, std::move(maskv));

  const Block& b = blocks_[static_cast<size_t>(layer)];
  Tensor a = layer_norm(x, &b.ln1_g, &b.ln1_b, kLayerNormEps);
  Tensor q = add_bias(matmul(a, b.wq), b.bq);
  Tensor k = add_bias(matmul(a, b.wk), b.bk);
  Tensor v = add_bias(matmul(a, b.wv), b.bv);
  Tensor attn_out;
  for (int hd = 0; hd < n_heads; ++hd) {
    Tensor qh = cols(q, hd * dh, (hd + 1) * dh);
    Tensor kh = cols(k, hd * dh, (hd + 1) * dh);
    Tensor vh = cols(v, hd * dh, (hd + 1) * dh);
    Tensor scores = add(scale(matmul(qh, transpose(kh)), att_scale), mask);
    Tensor weights = softmax(scores, 1);
    Tensor oh = matmul(weights, vh);
    attn_out = hd == 0 ? oh : concat(attn_out, oh, 1);
  }
  Tensor out = add(x, add_bias(matmul(attn_out, b.wo), b.bo));
  Tensor m = layer_norm(out, &b.ln2_g, &b.ln2_b, kLayerNormEps);
  m = gelu(add_bias(matmul(m, b.fc1), b.fb1));
  return add(out, add_bias(matmul(m, b.fc2), b.fb2));
}

Tensor TransformerLM::project_state_to_logits(const Tensor& state) const {
  if (state.ndim() != 1 || state.dim(0) != cfg_.hidden_size) {
    throw DimensionError("project_state_to_logits: state " + shape_str(state.shape()) +
                         " does not match hidden size " + std::to_string(cfg_.hidden_size));
  }
  Tensor final = layer_norm(reshape(state, {1, cfg_.hidden_size}), &lnf_g_, &lnf_b_,
                            kLayerNormEps);
  return row(matmul_rowwise(final, head_weight()), 0);
}

GenResult TransformerLM::generate_greedy(const std::vector<int>& prompt,
                                         const Substitution& subs, int stop_id,
                                         int max_new,
                                         const std::vector<int>& allowed) const {
  if (prompt.empty()) throw ContractError("generate_greedy: empty prompt");
  for (int id : allowed) {
    if (id < 0 || id >= cfg_.vocab_size) {
      throw ContractError("generate_greedy: allowed token " + std::to_string(id) +
                          " outside vocab");
    }
  }
  for (const auto& s : subs) {
    if (s.pos >= static_cast<int>(prompt.size())) {
      throw ContractError("generate_greedy: substitution position " +
                          std::to_string(s.pos) + " outside prompt of length " +
                          std::to_string(prompt.size()));
    }
  }
  NoGradGuard ng;
  std::vector<int> ids = prompt;
  GenResult out;
  for (int step = 0; step < max_new; ++step) {
    ForwardResult fr = forward(ids, subs);
    int next;
    if (allowed.empty()) {
      next = argmax_row(fr.logits, static_cast<int>(ids.size()) - 1);
    } else {
      const float* logits =
          fr.logits.data() + (ids.size() - 1) * static_cast<size_t>(cfg_.vocab_size);
      next = allowed[0];
      for (int id : allowed) {
        if (logits[id] > logits[next] || (logits[id] == logits[next] && id < next)) next = id;
      }
    }
    ids.push_back(next);
    out.tokens.push_back(next);
    if (next == stop_id) return out;
  }
  out.truncated = true;
  return out;
}

ParamList TransformerLM::named_params(const std::string& prefix) const {
  ParamList out;
  out.push_back({prefix + "wte", wte_});
  out.push_back({prefix + "wpe", wpe_});
  for (size_t i = 0; i < blocks_.size(); ++i) {
    const Block& b = blocks_[i];
    std::string p = prefix + "blocks." + std::to_string(i) + ".";
    out.push_back({p + "ln1.g", b.ln1_g});
    out.push_back({p + "ln1.b", b.ln1_b});
    out.push_back({p + "attn.wq", b.wq});
    out.push_back({p + "attn.bq", b.bq});
    out.push_back({p + "attn.wk", b.wk});
    out.push_back({p + "attn.bk", b.bk});
    out.push_back({p + "attn.wv", b.wv});
    out.push_back({p + "attn.bv", b.bv});
    out.push_back({p + "attn.wo", b.wo});
    out.push_back({p + "attn.bo", b.bo});
    out.push_back({p + "ln2.g", b.ln2_g});
    out.push_back({p + "ln2.b", b.ln2_b});
    out.push_back({p + "mlp.fc1", b.fc1});
    out.push_back({p + "mlp.fb1", b.fb1});
    out.push_back({p + "mlp.fc2", b.fc2});
    out.push_back({p + "mlp.fb2", b.fb2});
  }
  out.push_back({prefix + "lnf.g", lnf_g_});
  out.push_back({prefix + "lnf.b", lnf_b_});
  if (!cfg_.tied_output) out.push_back({prefix + "head", head_});
  return out;
}

nlohmann::json TransformerLM::to_checkpoint_config(const std::string& kind) const {
  return {{"kind", kind}, {"model", cfg_.to_json()}};
}

TransformerLM TransformerLM::from_named_tensors(
    const TransformerConfig& cfg,
    const std::vector<std::pair<std::string, Tensor>>& tensors,
    const std::string& prefix) {
  TransformerLM model(cfg, 0);
  fill_params_from(tensors, model.named_params(prefix));
  return model;
}

}  // namespace icot
