#pragma once

#include "amg/common.hpp"

#include <string>
#include <vector>

namespace amg {

// Named-tensor container: magic "AMGT", version u32, then per-tensor records
// (name length u32, name bytes, rank u32, dims u32 each, little-endian f32
// payload) until end of file.
struct NamedTensor {
  std::string name;
  std::vector<int> shape;
  std::vector<real> data;
};

void save_container(const std::string& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_container(const std::string& path);

}  // namespace amg
