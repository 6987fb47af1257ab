#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace ezsd {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NamedArray {
  std::string name;
  std::vector<std::int64_t> shape;
  std::vector<float> data;

  std::int64_t numel() const;
};

struct Checkpoint {
  nlohmann::json header;  // free-form metadata; the array table is added on write
  std::vector<NamedArray> arrays;

  const NamedArray& at(const std::string& name) const;
  const NamedArray* find(const std::string& name) const;
};

// Container layout: 8-byte magic "EZSDCKPT", u64 little-endian header length,
// JSON header (includes {"arrays": [{name, shape, offset, nbytes}]}), then the
// float32 little-endian payloads concatenated in array order.
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace ezsd
