#pragma once

#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "icot/tensor.hpp"
#include "icot/transformer.hpp"

namespace icot {

// Tempered component distribution: softmax(logits / temperature).
// Equivalent to renormalizing P(c)^(1/temperature).
Tensor temper(const Tensor& comp_logits, float temperature);

struct EmulatorConfig {
  TransformerConfig backbone;  // same L and H as the teacher
  bool mixture_enabled = true;

  nlohmann::json to_json() const;
  static EmulatorConfig from_json(const nlohmann::json& j);
};

// How c_l is chosen when no override is supplied.
enum class ComponentMode {
  hard_argmax,  // inference: commit to the most probable component
  tempered,     // couple stage: differentiable soft relaxation
};

struct EmulateOptions {
  // Teacher-forced components, one per layer (training with Eq-style
  // supervision); must have length L when present.
  std::optional<std::vector<int>> component_override;
  ComponentMode mode = ComponentMode::hard_argmax;
  float temperature = 0.05f;  // tempered mode only
};

struct TraceLayer {
  Tensor h;                  // [H] backbone state at the final prompt position
  Tensor comp_logits;        // [V]
  int component_id = -1;     // hard/override/non-mixture selection
  Tensor component_weights;  // [V], defined only in tempered mode
  Tensor zhat;               // [H] = f(h, c)
  Tensor context;            // [H] attention context over earlier f-outputs
};

struct EmulatorTrace {
  std::vector<TraceLayer> layers;
};

// Vertical thought emulator: a transformer column over the input whose
// inter-layer pathway at the final prompt position runs through the
// component-conditioned predictor f, the mixture head g, and an LSTM with
// dot-product self-attention over its own f-output history.
class MixtureEmulator {
 public:
  MixtureEmulator(const EmulatorConfig& cfg, uint64_t seed);

  const EmulatorConfig& config() const { return cfg_; }

  // ids must already end with the answer separator; the chain runs at the
  // last position. Never reads intermediate tokens.
  EmulatorTrace emulate(const std::vector<int>& ids,
                        const EmulateOptions& opts = {}) const;

  // Mixture mode: sum_l [ 0.5*||z_l - zhat_l||^2 - log P(c_l = target_l) ];
  // the trace must have been produced with component_override = targets.
  // Non-mixture: sum_l ||z_l - zhat_l||^2.
  Tensor emulation_loss(const EmulatorTrace& trace, const std::vector<Tensor>& targets,
                        const std::vector<int>& component_targets) const;

  // Surface strings of argmax P(c_l) per layer; mixture mode only.
  std::vector<std::string> decode_components(const std::vector<int>& ids) const;

  ParamList named_params(const std::string& prefix = "") const;
  // named_params minus tensors the emulation path never touches: the
  // backbone final norm and head, and the mixture head when disabled.
  ParamList trainable_params(const std::string& prefix = "") const;
  nlohmann::json to_checkpoint_config() const;
  static MixtureEmulator from_named_tensors(
      const EmulatorConfig& cfg,
      const std::vector<std::pair<std::string, Tensor>>& tensors,
      const std::string& prefix = "");

 private:
  EmulatorConfig cfg_;
  TransformerLM backbone_;
  Tensor head_g_w_, head_g_b_;       // H -> V
  Tensor comp_embed_;                // V x H
  Tensor f_w1_, f_b1_, f_w2_, f_b2_;  // 2H -> 4H -> relu -> H
  Tensor lstm_wx_, lstm_wh_, lstm_b_;  // gates i,f,g,o stacked: H -> 4H
  Tensor attn_q_, attn_k_;           // H -> H projections of f-outputs
  Tensor out_w_, out_b_;             // 2H -> H
};

}  // namespace icot
