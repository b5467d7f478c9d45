#pragma once

#include <string>
#include <utility>
#include <vector>

#include "icot/tensor.hpp"

namespace icot {

struct NamedParam {
  std::string name;
  Tensor tensor;
};

using ParamList = std::vector<NamedParam>;

// AdamW with bias correction and decoupled weight decay. Gradients are left
// untouched by step(); the caller resets them.
class AdamW {
 public:
  struct Options {
    float learning_rate = 5e-5f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float epsilon = 1e-8f;
    float weight_decay = 0.f;
  };

  AdamW(ParamList params, const Options& opts);

  void step();
  // Zeroes (allocating on first use) the gradient of every registered
  // parameter; stepping without a prior backward then applies a zero
  // update instead of erroring.
  void zero_grad();

  long step_count() const { return step_count_; }
  const Options& options() const { return opts_; }
  void set_learning_rate(float lr) { opts_.learning_rate = lr; }

 private:
  struct Slot {
    NamedParam param;
    std::vector<float> m;
    std::vector<float> v;
  };
  std::vector<Slot> slots_;
  Options opts_;
  long step_count_ = 0;
};

}  // namespace icot
