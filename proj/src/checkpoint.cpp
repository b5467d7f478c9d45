#include "icot/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace icot {

namespace {

constexpr char kMagic[4] = {'I', 'C', 'O', 'T'};

void write_u32(std::ofstream& os, uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

uint32_t read_u32(std::ifstream& is) {
  uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!is) throw CheckpointError(CheckpointError::Kind::truncated, "checkpoint truncated");
  return v;
}

uint8_t read_u8(std::ifstream& is) {
  uint8_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!is) throw CheckpointError(CheckpointError::Kind::truncated, "checkpoint truncated");
  return v;
}

}  // namespace

void fill_params_from(const std::vector<std::pair<std::string, Tensor>>& tensors,
                      const ParamList& params) {
  for (const auto& p : params) {
    const Tensor* found = nullptr;
    for (const auto& [name, t] : tensors) {
      if (name == p.name) {
        found = &t;
        break;
      }
    }
    if (!found) {
      throw CheckpointError(CheckpointError::Kind::dim_mismatch,
                            "checkpoint is missing tensor '" + p.name +
                                "' required by the declared config");
    }
    if (found->shape() != p.tensor.shape()) {
      throw CheckpointError(CheckpointError::Kind::dim_mismatch,
                            "tensor '" + p.name + "' has shape " + shape_str(found->shape()) +
                                ", config requires " + shape_str(p.tensor.shape()));
    }
    std::copy(found->data(), found->data() + found->numel(),
              const_cast<Tensor&>(p.tensor).data());
  }
}

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return &t;
  }
  return nullptr;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) {
    throw CheckpointError(CheckpointError::Kind::io, "cannot open '" + path + "' for writing");
  }
  os.write(kMagic, 4);
  write_u32(os, kCheckpointVersion);
  std::string cfg = ckpt.config.dump();
  write_u32(os, static_cast<uint32_t>(cfg.size()));
  os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  write_u32(os, static_cast<uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    write_u32(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    uint8_t ndim = static_cast<uint8_t>(t.ndim());
    os.write(reinterpret_cast<const char*>(&ndim), 1);
    for (int d = 0; d < t.ndim(); ++d) write_u32(os, static_cast<uint32_t>(t.dim(d)));
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(t.numel() * sizeof(float)));
  }
  os.flush();
  if (!os) throw CheckpointError(CheckpointError::Kind::io, "write to '" + path + "' failed");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) {
    throw CheckpointError(CheckpointError::Kind::io, "cannot open '" + path + "'");
  }
  char magic[4] = {};
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) {
    throw CheckpointError(CheckpointError::Kind::bad_magic,
                          "bad magic in '" + path + "': not a checkpoint file");
  }
  uint32_t version = read_u32(is);
  if (version != kCheckpointVersion) {
    throw CheckpointError(CheckpointError::Kind::bad_version,
                          "unsupported checkpoint version " + std::to_string(version));
  }
  uint32_t cfg_len = read_u32(is);
  std::string cfg(cfg_len, '\0');
  is.read(cfg.data(), cfg_len);
  if (!is) throw CheckpointError(CheckpointError::Kind::truncated, "checkpoint truncated");

  Checkpoint ckpt;
  try {
    ckpt.config = nlohmann::json::parse(cfg);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(CheckpointError::Kind::bad_format,
                          std::string("bad config block: ") + e.what());
  }

  uint32_t count = read_u32(is);
  for (uint32_t i = 0; i < count; ++i) {
    uint32_t name_len = read_u32(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is) throw CheckpointError(CheckpointError::Kind::truncated, "checkpoint truncated");
    uint8_t ndim = read_u8(is);
    if (ndim == 0 || ndim > 4) {
      throw CheckpointError(CheckpointError::Kind::bad_format,
                            "tensor '" + name + "' has invalid rank " + std::to_string(ndim));
    }
    Shape shape;
    for (int d = 0; d < ndim; ++d) shape.push_back(static_cast<int>(read_u32(is)));
    int64_t n = shape_numel(shape);
    std::vector<float> data(static_cast<size_t>(n));
    is.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(n * sizeof(float)));
    if (!is) throw CheckpointError(CheckpointError::Kind::truncated, "checkpoint truncated");
    ckpt.tensors.emplace_back(name, Tensor::from_data(shape, std::move(data)));
  }
  return ckpt;
}

}  // namespace icot
