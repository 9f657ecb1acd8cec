#pragma once

#include "amg/common.hpp"

#include <map>
#include <string>
#include <vector>

namespace amg {

// Provenance record written next to every CLI artifact (<artifact>.manifest.json).
// Manifests carry wall-clock time, so they are the one sidecar excluded from
// byte-identity comparisons between reruns.
struct RunManifest {
  std::string command;       // full argv
  std::string config_json;   // resolved model + train configuration
  std::uint64_t seed = 0;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  std::vector<std::string> lineage;  // checkpoint stages, oldest first
  double wall_clock_sec = 0;
};

// FNV-1a over the file bytes, hex-encoded. Throws RuntimeError when unreadable.
std::string content_hash(const std::string& path);

// Serializes the manifest plus a content hash per input file.
void write_manifest(const RunManifest& manifest, const std::string& path);

}  // namespace amg
