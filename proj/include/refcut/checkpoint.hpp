#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "refcut/model.hpp"

namespace refcut {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Checkpoints use the safetensors layout: an 8-byte little-endian header
/// length, a JSON header naming every F32 array with its shape and byte
/// range, then the raw data. The model config (and optional extra metadata)
/// sit in "__metadata__" as JSON strings.
struct Checkpoint {
  ModelConfig config;
  ModelParams<float> params;
  nlohmann::json metadata = nlohmann::json::object();
};

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config,
                     const ModelParams<float>& params,
                     const nlohmann::json& metadata = nlohmann::json::object());

/// Validates every array against the shapes implied by the stored config.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace refcut
