#include "ezsd/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <functional>
#include <numeric>

namespace ezsd {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are written as native little-endian floats");

namespace {
constexpr char kMagic[8] = {'E', 'Z', 'S', 'D', 'C', 'K', 'P', 'T'};
}

std::int64_t NamedArray::numel() const {
  return std::accumulate(shape.begin(), shape.end(), std::int64_t{1}, std::multiplies<>());
}

const NamedArray* Checkpoint::find(const std::string& name) const {
  for (const auto& a : arrays)
    if (a.name == name) return &a;
  return nullptr;
}

const NamedArray& Checkpoint::at(const std::string& name) const {
  if (const auto* a = find(name)) return *a;
  throw CheckpointError("checkpoint has no array named '" + name + "'");
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  nlohmann::json header = ckpt.header;
  nlohmann::json table = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& a : ckpt.arrays) {
    if (a.numel() != static_cast<std::int64_t>(a.data.size()))
      throw CheckpointError("array '" + a.name + "' shape does not match its data size");
    const std::uint64_t nbytes = a.data.size() * sizeof(float);
    table.push_back({{"name", a.name}, {"shape", a.shape}, {"offset", offset}, {"nbytes", nbytes}});
    offset += nbytes;
  }
  header["arrays"] = table;
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open checkpoint for writing: " + path.string());
  const std::uint64_t len = text.size();
  out.write(kMagic, sizeof(kMagic));
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& a : ckpt.arrays)
    out.write(reinterpret_cast<const char*>(a.data.data()),
              static_cast<std::streamsize>(a.data.size() * sizeof(float)));
  if (!out) throw CheckpointError("failed writing checkpoint: " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint: " + path.string());
  char magic[8];
  std::uint64_t len = 0;
  in.read(magic, sizeof(magic));
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw CheckpointError("not a checkpoint file: " + path.string());
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw CheckpointError("truncated checkpoint header: " + path.string());

  Checkpoint ckpt;
  try {
    ckpt.header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("malformed checkpoint header: " + std::string(e.what()));
  }
  const auto table = ckpt.header.at("arrays");
  ckpt.header.erase("arrays");
  for (const auto& entry : table) {
    NamedArray a;
    a.name = entry.at("name").get<std::string>();
    a.shape = entry.at("shape").get<std::vector<std::int64_t>>();
    const auto nbytes = entry.at("nbytes").get<std::uint64_t>();
    if (nbytes != static_cast<std::uint64_t>(a.numel()) * sizeof(float))
      throw CheckpointError("array '" + a.name + "' size disagrees with its shape");
    a.data.resize(static_cast<std::size_t>(a.numel()));
    in.read(reinterpret_cast<char*>(a.data.data()), static_cast<std::streamsize>(nbytes));
    if (!in) throw CheckpointError("truncated payload for array '" + a.name + "'");
    ckpt.arrays.push_back(std::move(a));
  }
  return ckpt;
}

}  // namespace ezsd
