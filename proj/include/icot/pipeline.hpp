#pragma once

#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "icot/checkpoint.hpp"
#include "icot/emulator.hpp"
#include "icot/mult_data.hpp"
#include "icot/schedule.hpp"
#include "icot/transformer.hpp"

namespace icot {

enum class LmMode { no_cot, explicit_cot };
enum class LossRegion { cot_and_answer, answer_only };

std::string to_string(LmMode m);
LmMode lm_mode_from_string(const std::string& s);

struct TrainConfig {
  int epochs = 1;
  int max_steps = 0;  // 0 = bounded by epochs only
  int batch_size = 32;
  float learning_rate = 5e-5f;
  float weight_decay = 0.01f;
  uint64_t seed = 0;
  StateSchedule schedule{};
  bool mixture_enabled = false;
  float temperature = 0.05f;
  bool train_student_in_couple = true;
  LossRegion loss_region = LossRegion::cot_and_answer;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

// Next-token sequence and per-position targets (-1 = excluded from loss).
struct LmSequence {
  std::vector<int> ids;
  std::vector<int> targets;
};

// no_cot: x SEP_ANS y with loss on the y tokens (EOS included).
// explicit_cot: x z SEP_ANS y with loss on z, SEP_ANS and y unless the
// region narrows it to the answer.
LmSequence build_lm_sequence(const MultExample& ex, LmMode mode, LossRegion region);

// Per-layer H -> 4H -> relu -> H maps applied to teacher (or emulated)
// states before substitution into the student.
class BridgeMLP {
 public:
  BridgeMLP(int n_layers, int hidden, uint64_t seed);

  int n_layers() const { return static_cast<int>(layers_.size()); }
  int hidden() const { return hidden_; }

  Tensor apply(int layer, const Tensor& state) const;  // [H] -> [H]

  ParamList named_params(const std::string& prefix = "") const;
  static BridgeMLP from_named_tensors(
      int n_layers, int hidden,
      const std::vector<std::pair<std::string, Tensor>>& tensors,
      const std::string& prefix = "");

 private:
  struct Layer {
    Tensor w1, b1, w2, b2;
  };
  int hidden_;
  std::vector<Layer> layers_;
};

struct TrainStats {
  long steps = 0;
  float final_loss = 0.f;
  std::vector<float> epoch_mean_loss;
};

// Supervised LM training; the explicit_cot model is the teacher.
TrainStats train_lm(TransformerLM& model, LmMode mode, const Dataset& data,
                    const TrainConfig& cfg);

// Teacher forward over x z SEP_ANS y, state matrix restricted to the z
// region, schedule applied (normalization included). Detached values.
std::vector<Tensor> extract_teacher_states(const TransformerLM& teacher,
                                           const MultExample& ex,
                                           const StateSchedule& schedule);

// Intermediate tokens z_{t_l} at the scheduled columns.
std::vector<int> scheduled_components(const MultExample& ex, const StateSchedule& schedule,
                                      int n_layers);

// Mind-reading student: bridged teacher states substituted at the SEP_ANS
// position of every layer, answer cross-entropy, teacher fixed.
TrainStats train_student(const TransformerLM& teacher, TransformerLM& student,
                         BridgeMLP& bridge, const Dataset& data, const TrainConfig& cfg);

// One emulation training instance; targets are normalized state vectors.
struct EmulationExample {
  std::vector<int> input_ids;  // x SEP_ANS
  std::vector<Tensor> targets;
  std::vector<int> component_targets;
};

// Core emulation loop, also used with synthetic targets in tests.
TrainStats train_emulator_on(MixtureEmulator& emulator,
                             const std::vector<EmulationExample>& data,
                             const TrainConfig& cfg);

TrainStats train_emulator(const TransformerLM& teacher, MixtureEmulator& emulator,
                          const Dataset& data, const TrainConfig& cfg);

struct CoupledSystem {
  MixtureEmulator emulator;
  TransformerLM student;
  BridgeMLP bridge;
};

// End-to-end optimization through tempered components; components are no
// longer teacher-forced and z is never consumed.
TrainStats couple_optimize(CoupledSystem& sys, const Dataset& data, const TrainConfig& cfg);

// Hard-argmax emulation, bridge, substitution, then greedy answer decoding.
GenResult implicit_generate(const CoupledSystem& sys, const std::vector<int>& input_ids);

// Substitution set for one input: bridged state vectors at the SEP_ANS
// position (the last prompt position) of every layer.
Substitution bridged_substitution(const BridgeMLP& bridge, const std::vector<Tensor>& states,
                                  int sep_pos);

// Checkpoint assembly/recovery for the four artifact kinds.
Checkpoint lm_to_checkpoint(const TransformerLM& model, const std::string& kind,
                            const nlohmann::json& stage);
TransformerLM lm_from_checkpoint(const Checkpoint& ckpt);

Checkpoint student_to_checkpoint(const TransformerLM& student, const BridgeMLP& bridge,
                                 const nlohmann::json& stage);
std::pair<TransformerLM, BridgeMLP> student_from_checkpoint(const Checkpoint& ckpt);

Checkpoint emulator_to_checkpoint(const MixtureEmulator& emulator,
                                  const nlohmann::json& stage);
MixtureEmulator emulator_from_checkpoint(const Checkpoint& ckpt);

Checkpoint coupled_to_checkpoint(const CoupledSystem& sys, const nlohmann::json& stage);
CoupledSystem coupled_from_checkpoint(const Checkpoint& ckpt);

}  // namespace icot
