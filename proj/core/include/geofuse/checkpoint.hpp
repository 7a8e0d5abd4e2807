#pragma once

#include <string>

#include "geofuse/trainer.hpp"

namespace geofuse {

/// Writes one binary tensor snapshot per parameter plus a manifest.json
/// mapping parameter paths to files and shapes.
void save_checkpoint(const std::string& dir, ModelParams& params);

/// Loads snapshots into an already-constructed parameter set; shapes must
/// match the manifest.
void load_checkpoint(const std::string& dir, ModelParams& params);

}  // namespace geofuse
