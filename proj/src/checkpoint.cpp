#include "amg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

static_assert(std::endian::native == std::endian::little,
              "checkpoint io assumes a little-endian host");

namespace amg {

namespace {

constexpr char kMagic[4] = {'A', 'M', 'G', 'T'};
constexpr std::uint32_t kVersion = 1;

void write_u32(std::ofstream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint32_t read_u32(std::ifstream& in, const std::string& path) {
  std::uint32_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(v)))
    throw ValidationError("checkpoint: truncated file " + path);
  return v;
}

}  // namespace

void save_container(const std::string& path, const std::vector<NamedTensor>& tensors) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw RuntimeError("checkpoint: cannot open " + path + " for writing");
  out.write(kMagic, 4);
  write_u32(out, kVersion);
  for (const auto& t : tensors) {
    write_u32(out, static_cast<std::uint32_t>(t.name.size()));
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    write_u32(out, static_cast<std::uint32_t>(t.shape.size()));
    for (int d : t.shape) write_u32(out, static_cast<std::uint32_t>(d));
    static_assert(sizeof(real) == 4, "payload is f32");
    out.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.data.size() * sizeof(real)));
  }
  if (!out) throw RuntimeError("checkpoint: write failed for " + path);
}

std::vector<NamedTensor> load_container(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("checkpoint: cannot open " + path);
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
    throw ValidationError("checkpoint: bad magic in " + path);
  const std::uint32_t version = read_u32(in, path);
  if (version != kVersion)
    throw ValidationError("checkpoint: unsupported version " + std::to_string(version) +
                          " in " + path);
  std::vector<NamedTensor> tensors;
  while (in.peek() != EOF) {
    NamedTensor t;
    const std::uint32_t name_len = read_u32(in, path);
    t.name.resize(name_len);
    if (!in.read(t.name.data(), name_len))
      throw ValidationError("checkpoint: truncated file " + path);
    const std::uint32_t rank = read_u32(in, path);
    std::size_t count = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      const std::uint32_t d = read_u32(in, path);
      t.shape.push_back(static_cast<int>(d));
      count *= d;
    }
    t.data.resize(count);
    if (!in.read(reinterpret_cast<char*>(t.data.data()),
                 static_cast<std::streamsize>(count * sizeof(real))))
      throw ValidationError("checkpoint: truncated payload for tensor '" + t.name + "' in " +
                            path);
    tensors.push_back(std::move(t));
  }
  return tensors;
}

}  // namespace amg
