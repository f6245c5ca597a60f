#pragma once

#include <string>

#include "nbeam/cnn/checkpoint.hpp"

#ifndef NBEAM_VERSION_STRING
#define NBEAM_VERSION_STRING "0.1.0"
#endif

namespace nbeam {

inline constexpr const char* kVersion = NBEAM_VERSION_STRING;
inline constexpr int kConfigSchemaVersion = 1;
inline constexpr int kManifestSchemaVersion = 1;

inline std::string version_string() {
  return std::string("nbeam ") + kVersion + " (config schema " + std::to_string(kConfigSchemaVersion) +
         ", manifest schema " + std::to_string(kManifestSchemaVersion) + ", checkpoint format " +
         std::to_string(cnn::Checkpoint::kVersion) + ")";
}

}  // namespace nbeam
