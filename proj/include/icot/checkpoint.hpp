#pragma once

#include <json.hpp>
#include <string>
#include <utility>
#include <vector>

#include "icot/optim.hpp"
#include "icot/tensor.hpp"

namespace icot {

// On-disk container shared by every artifact kind. Little-endian layout:
//   "ICOT" | u32 version=1 | u32 json_len, json bytes | u32 tensor_count |
//   per tensor: u32 name_len, name | u8 ndim | u32 dims[] | f32 data[]
struct Checkpoint {
  nlohmann::json config;
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor* find(const std::string& name) const;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// Copies stored tensors into the given parameters by name; a missing name
// or shape mismatch raises a dim_mismatch error naming the tensor.
void fill_params_from(const std::vector<std::pair<std::string, Tensor>>& tensors,
                      const ParamList& params);

constexpr uint32_t kCheckpointVersion = 1;

}  // namespace icot
