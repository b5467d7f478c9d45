#include "icot/optim.hpp"

#include <cmath>

namespace icot {

AdamW::AdamW(ParamList params, const Options& opts) : opts_(opts) {
  slots_.reserve(params.size());
  for (auto& p : params) {
    Slot s;
    s.m.assign(static_cast<size_t>(p.tensor.numel()), 0.f);
    s.v.assign(static_cast<size_t>(p.tensor.numel()), 0.f);
    s.param = std::move(p);
    slots_.push_back(std::move(s));
  }
}

void AdamW::step() {
  ++step_count_;
  float b1 = opts_.beta1, b2 = opts_.beta2;
  float bc1 = 1.f - std::pow(b1, static_cast<float>(step_count_));
  float bc2 = 1.f - std::pow(b2, static_cast<float>(step_count_));
  for (auto& s : slots_) {
    if (!s.param.tensor.has_grad()) {
      throw ContractError("adamw_step: parameter '" + s.param.name + "' has no gradient");
    }
    const auto& g = s.param.tensor.grad_ref();
    float* w = s.param.tensor.data();
    for (size_t i = 0; i < g.size(); ++i) {
      s.m[i] = b1 * s.m[i] + (1.f - b1) * g[i];
      s.v[i] = b2 * s.v[i] + (1.f - b2) * g[i] * g[i];
      float mhat = s.m[i] / bc1;
      float vhat = s.v[i] / bc2;
      w[i] -= opts_.learning_rate *
              (mhat / (std::sqrt(vhat) + opts_.epsilon) + opts_.weight_decay * w[i]);
    }
  }
}

void AdamW::zero_grad() {
  for (auto& s : slots_) {
    s.param.tensor.grad();  // allocate on first use
    s.param.tensor.zero_grad();
  }
}

}  // namespace icot
