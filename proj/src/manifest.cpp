#include "amg/manifest.hpp"

#include <nlohmann/json.hpp>

#include <cstdio>
#include <fstream>

namespace amg {

std::string content_hash(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw RuntimeError("manifest: cannot read " + path);
  std::uint64_t h = 0xcbf29ce484222325ull;
  char buf[1 << 14];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ull;
    }
    if (!in) break;
  }
  char hex[17];
  std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(h));
  return hex;
}

void write_manifest(const RunManifest& manifest, const std::string& path) {
  nlohmann::json j;
  j["command"] = manifest.command;
  j["config"] = manifest.config_json.empty()
                    ? nlohmann::json(nullptr)
                    : nlohmann::json::parse(manifest.config_json);
  j["seed"] = manifest.seed;
  j["inputs"] = manifest.inputs;
  j["outputs"] = manifest.outputs;
  j["lineage"] = manifest.lineage;
  j["wall_clock_sec"] = manifest.wall_clock_sec;
  nlohmann::json hashes = nlohmann::json::object();
  for (const auto& in : manifest.inputs) hashes[in] = content_hash(in);
  j["input_hashes"] = hashes;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw RuntimeError("manifest: cannot open " + path + " for writing");
  out << j.dump(2) << "\n";
}

}  // namespace amg
