#pragma once

#include <filesystem>

#include <json.hpp>

#include "widecorrect/msunet.hpp"

namespace widecorrect {

inline constexpr int kCheckpointVersion = 1;

nlohmann::json config_to_json(const ModelConfig& config);
/// Missing keys keep their desk defaults; unknown keys are rejected.
ModelConfig config_from_json(const nlohmann::json& j);

struct Checkpoint {
    ModelConfig config;
    ModelWeights<float> weights;
};

/// Layout: uint64 little-endian manifest length, UTF-8 JSON manifest
/// {format_version, config, tensors: [{name, shape, offset}]}, then float32
/// payloads in manifest order (offset in bytes from the payload start).
void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config,
                     const ModelWeights<float>& weights);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace widecorrect
