#pragma once

#include <filesystem>
#include <optional>
#include <string>

namespace ramseg {

inline constexpr const char* kDinoCheckpointEnv = "RAMSEG_DINO_CHECKPOINT";
inline constexpr const char* kSam2CheckpointEnv = "RAMSEG_SAM2_CHECKPOINT";

// Explicit path first, then the environment variable. Returns a path only
// if it exists on disk.
std::optional<std::filesystem::path> resolve_checkpoint(const std::string& explicit_path, const char* env_var);

}  // namespace ramseg
