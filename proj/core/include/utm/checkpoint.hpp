#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "utm/tensor.hpp"

namespace utm {

// Binary container for named arrays plus string metadata. Layout
// (little-endian):
//
//   bytes 0..7   magic "UTMCKPT1"
//   u32          metadata entry count, then per entry:
//                  u32 key length, key bytes, u32 value length, value bytes
//   u32          array count, then per array:
//                  u32 name length, name bytes,
//                  u8 element width (4 = float32, 8 = float64),
//                  u32 rank, rank x i64 extents,
//                  numel x element raw values (row-major)
//
// Used for model parameters, optimizer state and attention dumps.
struct StoredArray {
  std::string name;
  Shape shape;
  std::uint8_t width = 4;
  std::vector<double> values;
};

struct Checkpoint {
  std::map<std::string, std::string> metadata;
  std::vector<StoredArray> arrays;

  const StoredArray* find(const std::string& name) const;
  const StoredArray& get(const std::string& name) const;

  template <typename T>
  void add(const std::string& name, const Tensor<T>& tensor);
  void add(const std::string& name, Shape shape, std::vector<double> values, std::uint8_t width);

  // Copies a stored array into a tensor of matching shape, converting width.
  template <typename T>
  void load_into(const std::string& name, Tensor<T>& tensor) const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace utm
