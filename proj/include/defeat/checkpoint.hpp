#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "defeat/detector.hpp"

namespace defeat {

/// Rounds every parameter to the nearest float32 so that a saved checkpoint
/// reproduces the in-memory model exactly.
void round_params_to_float(ParamStore& params);

/// Writes `<path>` (JSON manifest) and `<path stem>.bin` (little-endian float32
/// arrays, concatenated in parameter order). `meta` is stored verbatim.
void save_checkpoint(const Detector& det, const std::filesystem::path& manifest_path,
                     const nlohmann::json& meta = nlohmann::json::object());

/// Loads and validates shapes against the stored DetectorConfig.
Detector load_checkpoint(const std::filesystem::path& manifest_path, nlohmann::json* meta = nullptr);

std::string sha256_file(const std::filesystem::path& path);

}  // namespace defeat
