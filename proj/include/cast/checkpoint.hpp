#pragma once

// Checkpoint layout (all integers little-endian):
//
//   bytes 0..7    "CASTCKPT"
//   u32           format version (kCheckpointVersion)
//   u64           header length in bytes
//   header        UTF-8 JSON: {"version", "config", "parameters": [{"name", "shape",
//                 "offset", "count"}], "payload_sha256", "metadata"}
//   payload       float64 values of every parameter, in manifest order

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cast/model.hpp"

namespace cast {

inline constexpr std::uint32_t kCheckpointVersion = 1;

nlohmann::json config_to_json(const ModelConfig& cfg);
ModelConfig config_from_json(const nlohmann::json& j);

// Hex SHA-256 of the little-endian parameter payload. Two models share a
// checksum iff every parameter value is bit-identical.
std::string model_checksum(const TransformerModel& model);
std::string sha256_hex(const void* data, std::size_t size);
std::string file_sha256(const std::filesystem::path& path);

std::vector<std::uint8_t> serialize_checkpoint(const TransformerModel& model,
                                               const nlohmann::json& metadata = {});
// Throws IntegrityError on bad magic, version, manifest or payload hash.
TransformerModel deserialize_checkpoint(const std::vector<std::uint8_t>& bytes,
                                        nlohmann::json* metadata = nullptr);

void save_checkpoint(const std::filesystem::path& path, const TransformerModel& model,
                     const nlohmann::json& metadata = {});
TransformerModel load_checkpoint(const std::filesystem::path& path,
                                 nlohmann::json* metadata = nullptr);

}  // namespace cast
