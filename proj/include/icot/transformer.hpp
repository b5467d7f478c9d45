#pragma once

#include <json.hpp>
#include <string>
#include <vector>

#include "icot/optim.hpp"
#include "icot/tensor.hpp"

namespace icot {

struct TransformerConfig {
  int n_layers = 4;
  int hidden_size = 128;
  int n_heads = 4;
  int vocab_size = 18;
  int max_positions = 128;
  float dropout = 0.f;
  bool tied_output = false;

  void validate() const;
  nlohmann::json to_json() const;
  static TransformerConfig from_json(const nlohmann::json& j);
  bool operator==(const TransformerConfig&) const = default;
};

// Post-block hidden states, one [T x H] matrix per layer (bottom to top),
// reflecting any substitutions. Row n_layers-1 at position t is the vector
// the output projection (final norm + head) consumes for token t.
struct StateMatrix {
  int n_layers = 0;
  int seq_len = 0;
  int hidden = 0;
  std::vector<Tensor> layers;

  // 0-based layer and position.
  Tensor at(int layer, int pos) const;
};

// Overrides the output of block `layer` at position `pos` (both 0-based)
// before the next block and before any later position attends to it.
struct SubEntry {
  int layer;
  int pos;
  Tensor vec;  // [H]
};
using Substitution = std::vector<SubEntry>;

struct ForwardResult {
  Tensor logits;  // [T x V]
  StateMatrix states;
};

struct GenResult {
  std::vector<int> tokens;  // generated tokens, including the stop token
  bool truncated = false;   // max_new exhausted without stop_id
};

// Decoder-only pre-norm transformer: norm -> attention -> residual,
// norm -> MLP(4H, GELU) -> residual; learned positional embeddings;
// untied output head unless configured otherwise.
class TransformerLM {
 public:
  TransformerLM(const TransformerConfig& cfg, uint64_t seed);

  const TransformerConfig& config() const { return cfg_; }

  ForwardResult forward(const std::vector<int>& ids,
                        const Substitution& subs = {}) const;

  // Block-level stepping for callers that interleave their own computation
  // between layers (the vertical emulator chain). forward() is equivalent
  // to input_embedding followed by run_block for each layer.
  Tensor input_embedding(const std::vector<int>& ids) const;
  Tensor run_block(int layer, const Tensor& x) const;

  // Final norm + head applied to a single [H] state; equals the logits row
  // the forward pass produced for that position.
  Tensor project_state_to_logits(const Tensor& state) const;

  // Batch-1 greedy decoding; substitutions stay pinned at their prompt
  // positions for every step. No KV cache. A non-empty allowed set
  // restricts the argmax to those token ids.
  GenResult generate_greedy(const std::vector<int>& prompt, const Substitution& subs,
                            int stop_id, int max_new,
                            const std::vector<int>& allowed = {}) const;

  ParamList named_params(const std::string& prefix = "") const;

  nlohmann::json to_checkpoint_config(const std::string& kind) const;
  static TransformerLM from_named_tensors(
      const TransformerConfig& cfg,
      const std::vector<std::pair<std::string, Tensor>>& tensors,
      const std::string& prefix = "");

 private:
  struct Block {
    Tensor ln1_g, ln1_b;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_g, ln2_b;
    Tensor fc1, fb1, fc2, fb2;
  };

  Tensor head_weight() const;  // [H x V], transposed token table when tied

  TransformerConfig cfg_;
  Tensor wte_, wpe_;
  std::vector<Block> blocks_;
  Tensor lnf_g_, lnf_b_;
  Tensor head_;  // defined only when untied
};

constexpr float kLayerNormEps = 1e-5f;

}  // namespace icot
