#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "pvera/backbone.hpp"

namespace pvera {

inline constexpr int kCheckpointFormatVersion = 1;

/// Writes one PVT1 file per named tensor (frozen backbone, shared basis,
/// probe, adapters) and dir/manifest.json mapping names to files, with the
/// backbone config, seeds and adapter settings.
void save_checkpoint(const std::filesystem::path& dir, const Model& model);

/// Throws MissingInputError when files are absent, FormatError on unreadable
/// tensors and ValidationError when a tensor does not match the manifest.
Model load_checkpoint(const std::filesystem::path& dir);

nlohmann::json to_json(const BackboneConfig& cfg);
nlohmann::json to_json(const AdapterConfig& cfg);
BackboneConfig backbone_config_from_json(const nlohmann::json& j);
AdapterConfig adapter_config_from_json(const nlohmann::json& j);

/// Checkpoint tensor names that belong to adapters (not backbone, basis or probe).
bool is_adapter_tensor(const std::string& name);

}  // namespace pvera
