#pragma once

#include "m2dclap/params.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace m2dclap {

// Versioned tensor container shared by checkpoints and feature caches:
//   magic (4 bytes) | u32 version | u32 header_len | header text (UTF-8) |
//   u64 tensor count | per tensor:
//     u16 name_len | name | u8 dtype (0 = f32, 1 = f64) | u8 ndim | ndim x u64 dims |
//     little-endian payload
//   | u32 CRC32 of all preceding bytes
enum class DType : uint8_t { F32 = 0, F64 = 1 };

struct NamedTensor {
  std::string name;
  Matrix value;
  DType dtype = DType::F64;
};

struct TensorFile {
  std::string magic = "M2DK";
  std::string header;  // free-form text, e.g. the serialized run config
  std::vector<NamedTensor> tensors;

  const Matrix& get(const std::string& name) const;
  bool contains(const std::string& name) const;

  void add_store(const std::string& group, const ParamStore& store, DType dtype);
  // Loads every tensor of `group/` into a store with the given role, keeping
  // file order.
  ParamStore store(const std::string& group, StoreRole role) const;
};

inline constexpr uint32_t kTensorFileVersion = 1;

void save_tensor_file(const std::filesystem::path& path, const TensorFile& file);
TensorFile load_tensor_file(const std::filesystem::path& path, const std::string& expected_magic);

}  // namespace m2dclap
