#include "icot/pipeline.hpp"

#include <algorithm>
#include <cmath>

#include "icot/ops.hpp"
#include "icot/optim.hpp"

namespace icot {

std::string to_string(LmMode m) {
  return m == LmMode::no_cot ? "no_cot" : "explicit_cot";
}

LmMode lm_mode_from_string(const std::string& s) {
  if (s == "no_cot") return LmMode::no_cot;
  if (s == "explicit_cot") return LmMode::explicit_cot;
  throw ContractError("unknown LM mode '" + s + "'");
}

void TrainConfig::validate() const {
  if (epochs < 0 || max_steps < 0) throw ContractError("train config: negative budget");
  if (batch_size < 1) throw ContractError("train config: batch_size must be >= 1");
  if (!(temperature > 0.f)) throw ContractError("train config: temperature must be positive");
  if (!(learning_rate > 0.f)) throw ContractError("train config: learning_rate must be positive");
  schedule.validate();
}

nlohmann::json TrainConfig::to_json() const {
  return {{"epochs", epochs},
          {"max_steps", max_steps},
          {"batch_size", batch_size},
          {"learning_rate", learning_rate},
          {"weight_decay", weight_decay},
          {"seed", seed},
          {"schedule", schedule.to_json()},
          {"mixture_enabled", mixture_enabled},
          {"temperature", temperature},
          {"train_student_in_couple", train_student_in_couple},
          {"loss_region", loss_region == LossRegion::cot_and_answer ? "cot_and_answer"
                                                                    : "answer_only"}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.max_steps = j.value("max_steps", c.max_steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.seed = j.value("seed", c.seed);
  if (j.contains("schedule")) c.schedule = StateSchedule::from_json(j.at("schedule"));
  c.mixture_enabled = j.value("mixture_enabled", c.mixture_enabled);
  c.temperature = j.value("temperature", c.temperature);
  c.train_student_in_couple = j.value("train_student_in_couple", c.train_student_in_couple);
  std::string region = j.value("loss_region", "cot_and_answer");
  if (region == "cot_and_answer") {
    c.loss_region = LossRegion::cot_and_answer;
  } else if (region == "answer_only") {
    c.loss_region = LossRegion::answer_only;
  } else {
    throw ContractError("train config: unknown loss_region '" + region + "'");
  }
  c.validate();
  return c;
}

LmSequence build_lm_sequence(const MultExample& ex, LmMode mode, LossRegion region) {
  const Vocab& v = Vocab::instance();
  LmSequence seq;
  seq.ids = ex.x;
  if (mode == LmMode::explicit_cot) {
    seq.ids.insert(seq.ids.end(), ex.z.begin(), ex.z.end());
  }
  seq.ids.push_back(v.sep_ans());
  seq.ids.insert(seq.ids.end(), ex.y.begin(), ex.y.end());

  // Targets are next tokens; position i supervises ids[i+1] when that
  // token falls inside the loss region.
  const int n = static_cast<int>(seq.ids.size());
  int first_supervised_token;
  if (mode == LmMode::no_cot || region == LossRegion::answer_only) {
    // first y token
    first_supervised_token =
        static_cast<int>(ex.x.size()) + 1 +
        (mode == LmMode::explicit_cot ? static_cast<int>(ex.z.size()) : 0);
  } else {
    // first z token (SEP_COT); SEP_ANS and y follow
    first_supervised_token = static_cast<int>(ex.x.size());
  }
  seq.targets.assign(static_cast<size_t>(n), -1);
  for (int i = 0; i + 1 < n; ++i) {
    if (i + 1 >= first_supervised_token) seq.targets[static_cast<size_t>(i)] = seq.ids[static_cast<size_t>(i + 1)];
  }
  return seq;
}

BridgeMLP::BridgeMLP(int n_layers, int hidden, uint64_t seed) : hidden_(hidden) {
  if (n_layers < 1 || hidden < 1) throw ContractError("bridge: bad dimensions");
  std::mt19937 rng(static_cast<unsigned>(seed ^ 0xb5297a4d3f84d5b9ull));
  const float sd = 0.02f;
  layers_.resize(static_cast<size_t>(n_layers));
  for (auto& l : layers_) {
    l.w1 = Tensor::randn({hidden, 4 * hidden}, rng, sd, true);
    l.b1 = Tensor::zeros({4 * hidden}, true);
    l.w2 = Tensor::randn({4 * hidden, hidden}, rng, sd, true);
    l.b2 = Tensor::zeros({hidden}, true);
  }
}

Tensor BridgeMLP::apply(int layer, const Tensor& state) const {
  if (layer < 0 || layer >= n_layers()) {
    throw ContractError("bridge: layer " + std::to_string(layer) + " out of range");
  }
  if (state.ndim() != 1 || state.dim(0) != hidden_) {
    throw DimensionError("bridge: state " + shape_str(state.shape()) +
                         " does not match hidden size " + std::to_string(hidden_));
  }
  const Layer& l = layers_[static_cast<size_t>(layer)];
  Tensor x = reshape(state, {1, hidden_});
  Tensor mid = relu(add_bias(matmul(x, l.w1), l.b1));
  return row(add_bias(matmul(mid, l.w2), l.b2), 0);
}

ParamList BridgeMLP::named_params(const std::string& prefix) const {
  ParamList out;
  for (size_t i = 0; i < layers_.size(); ++i) {
    std::string p = prefix + "bridge." + std::to_string(i) + ".";
    out.push_back({p + "w1", layers_[i].w1});
    out.push_back({p + "b1", layers_[i].b1});
    out.push_back({p + "w2", layers_[i].w2});
    out.push_back({p + "b2", layers_[i].b2});
  }
  return out;
}

BridgeMLP BridgeMLP::from_named_tensors(
    int n_layers, int hidden, const std::vector<std::pair<std::string, Tensor>>& tensors,
    const std::string& prefix) {
  BridgeMLP bridge(n_layers, hidden, 0);
  fill_params_from(tensors, bridge.named_params(prefix));
  return bridge;
}

namespace {

// Deterministic epoch shuffling shared by every trainer.
std::vector<size_t> epoch_order(size_t n, uint64_t seed, int epoch) {
  std::vector<size_t> idx(n);
  for (size_t i = 0; i < n; ++i) idx[i] = i;
  std::mt19937_64 rng(seed * 0x9e3779b97f4a7c15ull + static_cast<uint64_t>(epoch) + 1);
  for (size_t i = n; i > 1; --i) {
    size_t j = static_cast<size_t>(rng() % i);
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

struct LossAverager {
  double total = 0;
  long count = 0;
  void add(float v) {
    total += v;
    ++count;
  }
  float mean() const { return count ? static_cast<float>(total / count) : 0.f; }
};

}  // namespace

TrainStats train_lm(TransformerLM& model, LmMode mode, const Dataset& data,
                    const TrainConfig& cfg) {
  cfg.validate();
  if (data.empty()) throw ContractError("train_lm: empty dataset");
  for (const auto& ex : data) {
    LmSequence probe = build_lm_sequence(ex, mode, cfg.loss_region);
    if (static_cast<int>(probe.ids.size()) > model.config().max_positions) {
      throw ContractError("train_lm: sequence for " + std::to_string(ex.a) + "*" +
                          std::to_string(ex.b) + " has length " +
                          std::to_string(probe.ids.size()) + " > max_positions " +
                          std::to_string(model.config().max_positions));
    }
  }

  AdamW opt(model.named_params(), {.learning_rate = cfg.learning_rate,
                                   .weight_decay = cfg.weight_decay});
  TrainStats stats;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto order = epoch_order(data.size(), cfg.seed, epoch);
    LossAverager epoch_loss;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
      size_t stop = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
      Tensor batch_loss;
      for (size_t i = start; i < stop; ++i) {
        const MultExample& ex = data[order[i]];
        LmSequence seq = build_lm_sequence(ex, mode, cfg.loss_region);
        auto fr = model.forward(seq.ids);
        Tensor loss = cross_entropy(fr.logits, seq.targets, -1);
        batch_loss = i == start ? loss : add(batch_loss, loss);
      }
      batch_loss = scale(batch_loss, 1.f / static_cast<float>(stop - start));
      opt.zero_grad();
      backward(batch_loss);
      opt.step();
      stats.final_loss = batch_loss.item();
      epoch_loss.add(stats.final_loss);
      ++stats.steps;
      if (cfg.max_steps > 0 && stats.steps >= cfg.max_steps) {
        stats.epoch_mean_loss.push_back(epoch_loss.mean());
        return stats;
      }
    }
    stats.epoch_mean_loss.push_back(epoch_loss.mean());
  }
  return stats;
}

std::vector<Tensor> extract_teacher_states(const TransformerLM& teacher,
                                           const MultExample& ex,
                                           const StateSchedule& schedule) {
  if (ex.z.empty()) throw ContractError("extract_teacher_states: example has no z tokens");
  NoGradGuard ng;
  LmSequence seq = build_lm_sequence(ex, LmMode::explicit_cot, LossRegion::cot_and_answer);
  auto fr = teacher.forward(seq.ids);
  auto vecs = extract(schedule, fr.states, static_cast<int>(ex.x.size()),
                      static_cast<int>(ex.z.size()));
  std::vector<Tensor> out;
  out.reserve(vecs.size());
  for (auto& v : vecs) out.push_back(v.detach());
  return out;
}

std::vector<int> scheduled_components(const MultExample& ex, const StateSchedule& schedule,
                                      int n_layers) {
  if (ex.z.empty()) throw ContractError("scheduled_components: example has no z tokens");
  auto cols = select_columns(schedule, n_layers, static_cast<int>(ex.z.size()));
  std::vector<int> out;
  out.reserve(cols.size());
  for (int c : cols) out.push_back(ex.z[static_cast<size_t>(c - 1)]);
  return out;
}

Substitution bridged_substitution(const BridgeMLP& bridge, const std::vector<Tensor>& states,
                                  int sep_pos) {
  if (static_cast<int>(states.size()) != bridge.n_layers()) {
    throw ContractError("bridged_substitution: " + std::to_string(states.size()) +
                        " states for " + std::to_string(bridge.n_layers()) + " layers");
  }
  Substitution subs;
  for (int l = 0; l < bridge.n_layers(); ++l) {
    subs.push_back({l, sep_pos, bridge.apply(l, states[static_cast<size_t>(l)])});
  }
  return subs;
}

TrainStats train_student(const TransformerLM& teacher, TransformerLM& student,
                         BridgeMLP& bridge, const Dataset& data, const TrainConfig& cfg) {
  cfg.validate();
  if (data.empty()) throw ContractError("train_student: empty dataset");
  if (teacher.config().n_layers != student.config().n_layers) {
    throw ContractError("train_student: teacher has " +
                        std::to_string(teacher.config().n_layers) + " layers, student " +
                        std::to_string(student.config().n_layers));
  }
  if (bridge.n_layers() != student.config().n_layers ||
      bridge.hidden() != student.config().hidden_size) {
    throw ContractError("train_student: bridge dimensions do not match the student");
  }

  // Teacher states are deterministic per example; extract once.
  std::vector<std::vector<Tensor>> cache(data.size());

  ParamList params = student.named_params("student.");
  for (auto& p : bridge.named_params()) params.push_back(p);
  AdamW opt(std::move(params), {.learning_rate = cfg.learning_rate,
                                .weight_decay = cfg.weight_decay});

  TrainStats stats;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto order = epoch_order(data.size(), cfg.seed, epoch);
    LossAverager epoch_loss;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
      size_t stop = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
      Tensor batch_loss;
      for (size_t i = start; i < stop; ++i) {
        const MultExample& ex = data[order[i]];
        if (cache[order[i]].empty()) {
          cache[order[i]] = extract_teacher_states(teacher, ex, cfg.schedule);
        }
        LmSequence seq = build_lm_sequence(ex, LmMode::no_cot, LossRegion::answer_only);
        Substitution subs =
            bridged_substitution(bridge, cache[order[i]], static_cast<int>(ex.x.size()));
        auto fr = student.forward(seq.ids, subs);
        Tensor loss = cross_entropy(fr.logits, seq.targets, -1);
        batch_loss = i == start ? loss : add(batch_loss, loss);
      }
      batch_loss = scale(batch_loss, 1.f / static_cast<float>(stop - start));
      opt.zero_grad();
      backward(batch_loss);
      opt.step();
      stats.final_loss = batch_loss.item();
      epoch_loss.add(stats.final_loss);
      ++stats.steps;
      if (cfg.max_steps > 0 && stats.steps >= cfg.max_steps) {
        stats.epoch_mean_loss.push_back(epoch_loss.mean());
        return stats;
      }
    }
    stats.epoch_mean_loss.push_back(epoch_loss.mean());
  }
  return stats;
}

TrainStats train_emulator_on(MixtureEmulator& emulator,
                             const std::vector<EmulationExample>& data,
                             const TrainConfig& cfg) {
  cfg.validate();
  if (data.empty()) throw ContractError("train_emulator: empty dataset");
  const bool mixture = emulator.config().mixture_enabled;

  AdamW opt(emulator.trainable_params(), {.learning_rate = cfg.learning_rate,
                                          .weight_decay = cfg.weight_decay});
  TrainStats stats;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto order = epoch_order(data.size(), cfg.seed, epoch);
    LossAverager epoch_loss;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
      size_t stop = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
      Tensor batch_loss;
      for (size_t i = start; i < stop; ++i) {
        const EmulationExample& ex = data[order[i]];
        EmulateOptions opts;
        if (mixture) opts.component_override = ex.component_targets;
        auto trace = emulator.emulate(ex.input_ids, opts);
        Tensor loss = emulator.emulation_loss(trace, ex.targets, ex.component_targets);
        batch_loss = i == start ? loss : add(batch_loss, loss);
      }
      batch_loss = scale(batch_loss, 1.f / static_cast<float>(stop - start));
      opt.zero_grad();
      backward(batch_loss);
      opt.step();
      stats.final_loss = batch_loss.item();
      epoch_loss.add(stats.final_loss);
      ++stats.steps;
      if (cfg.max_steps > 0 && stats.steps >= cfg.max_steps) {
        stats.epoch_mean_loss.push_back(epoch_loss.mean());
        return stats;
      }
    }
    stats.epoch_mean_loss.push_back(epoch_loss.mean());
  }
  return stats;
}

TrainStats train_emulator(const TransformerLM& teacher, MixtureEmulator& emulator,
                          const Dataset& data, const TrainConfig& cfg) {
  if (teacher.config().n_layers != emulator.config().backbone.n_layers) {
    throw ContractError("train_emulator: teacher/emulator layer count mismatch");
  }
  const Vocab& v = Vocab::instance();
  std::vector<EmulationExample> prepared;
  prepared.reserve(data.size());
  for (const auto& ex : data) {
    EmulationExample e;
    e.input_ids = ex.x;
    e.input_ids.push_back(v.sep_ans());
    e.targets = extract_teacher_states(teacher, ex, cfg.schedule);
    e.component_targets =
        scheduled_components(ex, cfg.schedule, emulator.config().backbone.n_layers);
    prepared.push_back(std::move(e));
  }
  return train_emulator_on(emulator, prepared, cfg);
}

TrainStats couple_optimize(CoupledSystem& sys, const Dataset& data, const TrainConfig& cfg) {
  cfg.validate();
  if (data.empty()) throw ContractError("couple_optimize: empty dataset");
  const TransformerConfig& scfg = sys.student.config();
  const TransformerConfig& ecfg = sys.emulator.config().backbone;
  if (scfg.n_layers != ecfg.n_layers || scfg.hidden_size != ecfg.hidden_size ||
      sys.bridge.n_layers() != scfg.n_layers || sys.bridge.hidden() != scfg.hidden_size) {
    throw ContractError("couple_optimize: emulator, student and bridge disagree on L or H");
  }

  const Vocab& v = Vocab::instance();
  ParamList params = sys.emulator.trainable_params("emulator.");
  if (cfg.train_student_in_couple) {
    for (auto& p : sys.student.named_params("student.")) params.push_back(p);
    for (auto& p : sys.bridge.named_params()) params.push_back(p);
  }
  AdamW opt(std::move(params), {.learning_rate = cfg.learning_rate,
                                .weight_decay = cfg.weight_decay});
  // Frozen parameters still accumulate flow; reset them too.
  ParamList all_params = sys.emulator.named_params("emulator.");
  for (auto& p : sys.student.named_params("student.")) all_params.push_back(p);
  for (auto& p : sys.bridge.named_params()) all_params.push_back(p);

  TrainStats stats;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto order = epoch_order(data.size(), cfg.seed, epoch);
    LossAverager epoch_loss;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
      size_t stop = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
      Tensor batch_loss;
      for (size_t i = start; i < stop; ++i) {
        const MultExample& ex = data[order[i]];
        std::vector<int> prompt = ex.x;
        prompt.push_back(v.sep_ans());
        EmulateOptions opts;
        opts.mode = ComponentMode::tempered;
        opts.temperature = cfg.temperature;
        auto trace = sys.emulator.emulate(prompt, opts);
        std::vector<Tensor> zhat;
        for (auto& layer : trace.layers) zhat.push_back(layer.zhat);
        Substitution subs =
            bridged_substitution(sys.bridge, zhat, static_cast<int>(ex.x.size()));

        LmSequence seq = build_lm_sequence(ex, LmMode::no_cot, LossRegion::answer_only);
        // The couple-stage loss also covers the SEP_ANS position.
        seq.targets[ex.x.size() - 1] = v.sep_ans();
        auto fr = sys.student.forward(seq.ids, subs);
        Tensor loss = cross_entropy(fr.logits, seq.targets, -1);
        batch_loss = i == start ? loss : add(batch_loss, loss);
      }
      batch_loss = scale(batch_loss, 1.f / static_cast<float>(stop - start));
      for (auto& p : all_params) {
        p.tensor.grad();  // allocate on first use
        p.tensor.zero_grad();
      }
      backward(batch_loss);
      opt.step();
      stats.final_loss = batch_loss.item();
      epoch_loss.add(stats.final_loss);
      ++stats.steps;
      if (cfg.max_steps > 0 && stats.steps >= cfg.max_steps) {
        stats.epoch_mean_loss.push_back(epoch_loss.mean());
        return stats;
      }
    }
    stats.epoch_mean_loss.push_back(epoch_loss.mean());
  }
  return stats;
}

GenResult implicit_generate(const CoupledSystem& sys, const std::vector<int>& input_ids) {
  if (input_ids.empty()) throw ContractError("implicit_generate: empty input");
  const Vocab& v = Vocab::instance();
  NoGradGuard ng;
  std::vector<int> prompt = input_ids;
  prompt.push_back(v.sep_ans());
  EmulateOptions opts;
  opts.mode = ComponentMode::hard_argmax;
  auto trace = sys.emulator.emulate(prompt, opts);
  std::vector<Tensor> zhat;
  for (auto& layer : trace.layers) zhat.push_back(layer.zhat);
  Substitution subs =
      bridged_substitution(sys.bridge, zhat, static_cast<int>(input_ids.size()));
  int max_new = static_cast<int>(input_ids.size()) + 1;
  // The implicit path emits only answer-region tokens, never z tokens.
  std::vector<int> answer_vocab;
  for (int d = 0; d <= 9; ++d) answer_vocab.push_back(d);
  answer_vocab.push_back(v.eos());
  return sys.student.generate_greedy(prompt, subs, v.eos(), max_new, answer_vocab);
}

Checkpoint lm_to_checkpoint(const TransformerLM& model, const std::string& kind,
                            const nlohmann::json& stage) {
  Checkpoint ck;
  ck.config = model.to_checkpoint_config(kind);
  if (!stage.is_null()) ck.config["stage"] = stage;
  for (auto& p : model.named_params()) ck.tensors.emplace_back(p.name, p.tensor);
  return ck;
}

TransformerLM lm_from_checkpoint(const Checkpoint& ckpt) {
  auto cfg = TransformerConfig::from_json(ckpt.config.at("model"));
  return TransformerLM::from_named_tensors(cfg, ckpt.tensors);
}

Checkpoint student_to_checkpoint(const TransformerLM& student, const BridgeMLP& bridge,
                                 const nlohmann::json& stage) {
  Checkpoint ck;
  ck.config = {{"kind", "student"},
               {"model", student.config().to_json()},
               {"bridge", {{"n_layers", bridge.n_layers()}, {"hidden", bridge.hidden()}}}};
  if (!stage.is_null()) ck.config["stage"] = stage;
  for (auto& p : student.named_params("student.")) ck.tensors.emplace_back(p.name, p.tensor);
  for (auto& p : bridge.named_params()) ck.tensors.emplace_back(p.name, p.tensor);
  return ck;
}

std::pair<TransformerLM, BridgeMLP> student_from_checkpoint(const Checkpoint& ckpt) {
  auto cfg = TransformerConfig::from_json(ckpt.config.at("model"));
  TransformerLM student = TransformerLM::from_named_tensors(cfg, ckpt.tensors, "student.");
  BridgeMLP bridge = BridgeMLP::from_named_tensors(
      ckpt.config.at("bridge").at("n_layers").get<int>(),
      ckpt.config.at("bridge").at("hidden").get<int>(), ckpt.tensors);
  return {std::move(student), std::move(bridge)};
}

Checkpoint emulator_to_checkpoint(const MixtureEmulator& emulator,
                                  const nlohmann::json& stage) {
  Checkpoint ck;
  ck.config = emulator.to_checkpoint_config();
  if (!stage.is_null()) ck.config["stage"] = stage;
  for (auto& p : emulator.named_params()) ck.tensors.emplace_back(p.name, p.tensor);
  return ck;
}

MixtureEmulator emulator_from_checkpoint(const Checkpoint& ckpt) {
  auto cfg = EmulatorConfig::from_json(ckpt.config.at("emulator"));
  return MixtureEmulator::from_named_tensors(cfg, ckpt.tensors);
}

Checkpoint coupled_to_checkpoint(const CoupledSystem& sys, const nlohmann::json& stage) {
  Checkpoint ck;
  ck.config = {{"kind", "coupled"},
               {"emulator", sys.emulator.config().to_json()},
               {"model", sys.student.config().to_json()},
               {"bridge",
                {{"n_layers", sys.bridge.n_layers()}, {"hidden", sys.bridge.hidden()}}}};
  if (!stage.is_null()) ck.config["stage"] = stage;
  for (auto& p : sys.emulator.named_params("emulator.")) ck.tensors.emplace_back(p.name, p.tensor);
  for (auto& p : sys.student.named_params("student.")) ck.tensors.emplace_back(p.name, p.tensor);
  for (auto& p : sys.bridge.named_params()) ck.tensors.emplace_back(p.name, p.tensor);
  return ck;
}

CoupledSystem coupled_from_checkpoint(const Checkpoint& ckpt) {
  auto ecfg = EmulatorConfig::from_json(ckpt.config.at("emulator"));
  auto scfg = TransformerConfig::from_json(ckpt.config.at("model"));
  return CoupledSystem{
      MixtureEmulator::from_named_tensors(ecfg, ckpt.tensors, "emulator."),
      TransformerLM::from_named_tensors(scfg, ckpt.tensors, "student."),
      BridgeMLP::from_named_tensors(ckpt.config.at("bridge").at("n_layers").get<int>(),
                                    ckpt.config.at("bridge").at("hidden").get<int>(),
                                    ckpt.tensors)};
}

}  // namespace icot
