// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>

#include "nmtforge/numerics/tensor.h"

namespace nmtforge {

// Binary tensor container:
//   "NMTF" | u32 version | records...
// record: u32 name_len | name bytes | u32 rank | u64 dims[rank] | u8 dtype | payload
// dtype 0 = f64, 1 = f32, 2 = raw bytes (UTF-8 text blobs). Little-endian.
inline constexpr uint32_t kCheckpointVersion = 1;

enum class DType : uint8_t { F64 = 0, F32 = 1, Bytes = 2 };

struct TensorFile {
  ParameterStore tensors;
  std::map<std::string, std::string> blobs;
};

void write_tensor_file(std::ostream& out, const TensorFile& file);
TensorFile read_tensor_file(std::istream& in);

void save_tensor_file(const std::filesystem::path& path, const TensorFile& file);
TensorFile load_tensor_file(const std::filesystem::path& path);

}  // namespace nmtforge
