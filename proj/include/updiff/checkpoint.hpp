#pragma once

#include <filesystem>
#include <map>
#include <string>

#include <json.hpp>
#include <torch/torch.h>

namespace updiff {

inline constexpr int kCheckpointFormatVersion = 1;

/// On-disk checkpoint:
///   <dir>/manifest            JSON text (config, schedule, seed, step, format_version, id)
///   <dir>/tensors/<name>.bin  header line "name d0,d1,... float32\n" then little-endian float32 data
struct Checkpoint {
  nlohmann::json manifest;
  std::map<std::string, torch::Tensor> tensors;
};

/// Writes the checkpoint; fills manifest["id"] with a content hash of the tensors
/// and manifest["format_version"].
void save_checkpoint(const std::filesystem::path& dir, Checkpoint checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& dir);
nlohmann::json load_manifest(const std::filesystem::path& dir);

/// 64-bit FNV-1a over tensor names and float32 bytes, as 16 hex digits.
std::string content_id(const std::map<std::string, torch::Tensor>& tensors);

/// Serializes one tensor blob (header line + little-endian float32 payload).
std::string encode_tensor_blob(const std::string& name, const torch::Tensor& t);
std::pair<std::string, torch::Tensor> decode_tensor_blob(const std::string& blob);

/// Parameters and buffers of a module, flattened with `prefix`.
std::map<std::string, torch::Tensor> named_state(const torch::nn::Module& module, const std::string& prefix = "");
/// Copies matching tensors into the module; throws on missing names or shape mismatch.
void load_state(torch::nn::Module& module, const std::map<std::string, torch::Tensor>& tensors,
                const std::string& prefix = "");

}  // namespace updiff
