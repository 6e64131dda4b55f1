#pragma once

#include <filesystem>

#include "pera/config.hpp"
#include "pera/trainer.hpp"

namespace pera {

inline constexpr int kCheckpointFormatVersion = 1;

struct Checkpoint {
  RunConfig config;
  ModelState state;
};

/// Writes a checkpoint directory:
///   index.json    array names, shapes, dtype, byte offsets
///   tensors.bin   little-endian float32 arrays, row-major, concatenated
///   meta.json     format version, config hash, step, full config
/// The directory is written next to the target and renamed into place.
void save_checkpoint(const ModelState& state, const RunConfig& config,
                     const std::filesystem::path& path);

Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace pera
