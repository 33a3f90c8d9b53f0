#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "fwl/corpus.hpp"
#include "fwl/model.hpp"

namespace fwl {

inline constexpr char kCheckpointMagic[8] = {'F', 'W', 'L', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Tensor {
  std::vector<std::uint64_t> dims;
  std::vector<double> data;
};

// On disk: magic, u32 version, u64 metadata length, metadata JSON, u64 tensor
// count, then per tensor: u32 name length, name, u32 rank, u64 dims[rank],
// f64 payload. All integers and floats little-endian.
struct Checkpoint {
  Model model;
  Tokenizer tokenizer;
  std::uint64_t step = 0;
  nlohmann::json extra = nlohmann::json::object();  // training configuration etc.
  std::map<std::string, Tensor> extra_tensors;        // optimizer and stream state
};

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

nlohmann::json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

Tensor to_tensor(const Matrix& m);
Tensor to_tensor(std::span<const Real> v);
Matrix matrix_from_tensor(const Tensor& t, const std::string& name);

}  // namespace fwl
