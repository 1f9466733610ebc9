#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "casdiff/optim.hpp"

namespace casdiff {

/// Named-tensor archive holding model parameters, optimizer moments and a
/// JSON metadata block.
///
/// Layout (little endian): magic "CASDCKPT", format_version u32, metadata
/// (u32 length + JSON), tensor count u32, then per tensor {name, rank u32,
/// dims u32[rank], f32 data}, and finally an FNV-1a u64 over all preceding
/// bytes. Optimizer tensors carry the prefix "opt/".
struct Checkpoint {
  static constexpr std::uint32_t kFormatVersion = 1;

  nlohmann::json metadata;
  std::vector<std::pair<std::string, Tensor<float>>> params;
  std::vector<std::pair<std::string, Tensor<float>>> optimizer_state;
  std::int64_t optimizer_steps = 0;
};

std::string serialize_checkpoint(const Checkpoint& ckpt);

/// Verifies magic, version and checksum before decoding anything.
/// Throws CorruptionError or IncompatibleVersion.
Checkpoint parse_checkpoint(std::string_view bytes, const std::string& source = "checkpoint");

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Snapshot of live state.
Checkpoint make_checkpoint(const ParameterStore<float>& params, const Optimizer* optimizer, nlohmann::json metadata);

/// Copies parameters into `params`, which must have identical names and
/// shapes; nothing is modified when validation fails.
void restore_parameters(const Checkpoint& ckpt, ParameterStore<float>& params);
void restore_optimizer(const Checkpoint& ckpt, Optimizer& optimizer);

}  // namespace casdiff
