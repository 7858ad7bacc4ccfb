#pragma once

// Little-endian checkpoint container.
//
//   "MORE" | u32 version
//   u32 meta count, then per entry: u32 key length, key, u32 value length, value
//   u32 tensor count, then per tensor: u32 path length, path, u8 dtype
//   (0 = f32, 1 = f64), u32 rank, u64 extents[rank], raw element data
//
// Metadata entries are written in key order and tensors in insertion order,
// so save(load(save(c))) reproduces the original bytes.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "more/encoders.hpp"

namespace more {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointTensor {
  std::string path;
  std::uint8_t dtype = 0;
  Shape shape;
  std::vector<unsigned char> data;
};

struct Checkpoint {
  std::map<std::string, std::string> meta;
  std::vector<CheckpointTensor> tensors;

  const CheckpointTensor* find(const std::string& path) const;
  /// Throws SchemaError when the key is absent.
  const std::string& get(const std::string& key) const;

  template <typename S>
  void put(const std::string& path, const Tensor<S>& t);
  /// Copies the stored values into `t`, converting the dtype if needed.
  /// Throws SchemaError on a missing path or a shape mismatch.
  template <typename S>
  void read_into(const std::string& path, Tensor<S>& t) const;
};

void save_checkpoint(const std::filesystem::path& file, const Checkpoint& ckpt);
/// MissingFileError when absent, SchemaError on a bad magic, version or truncation.
Checkpoint load_checkpoint(const std::filesystem::path& file);

/// FNV-1a 64 of the text as 16 hex digits.
std::string digest_hex(const std::string& text);

/// Stores every tensor of the list under its path.
template <typename S>
void put_params(Checkpoint& ckpt, const ParamList<S>& params, const std::string& prefix = "");
/// Loads every tensor of the list from its path.
template <typename S>
void read_params(const Checkpoint& ckpt, ParamList<S>& params, const std::string& prefix = "");

}  // namespace more
