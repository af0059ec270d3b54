// SPDX-License-Identifier: Apache-2.0
#include "nmtforge/numerics/checkpoint.h"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "nmtforge/errors.h"

namespace nmtforge {
namespace {

constexpr char kMagic[4] = {'N', 'M', 'T', 'F'};

template <typename T>
void put_le(std::ostream& out, T value) {
  unsigned char bytes[sizeof(T)];
  for (size_t i = 0; i < sizeof(T); ++i) bytes[i] = static_cast<unsigned char>((value >> (8 * i)) & 0xFF);
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
bool get_le(std::istream& in, T& value) {
  unsigned char bytes[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(T))) return false;
  value = 0;
  for (size_t i = 0; i < sizeof(T); ++i) value |= static_cast<T>(bytes[i]) << (8 * i);
  return true;
}

template <typename T>
T require_le(std::istream& in, const char* what) {
  T value;
  if (!get_le(in, value)) throw FormatError(std::string("truncated checkpoint while reading ") + what);
  return value;
}

void put_header(std::ostream& out, const std::string& name, const std::vector<uint64_t>& dims, DType dtype) {
  put_le<uint32_t>(out, static_cast<uint32_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  put_le<uint32_t>(out, static_cast<uint32_t>(dims.size()));
  for (uint64_t d : dims) put_le<uint64_t>(out, d);
  put_le<uint8_t>(out, static_cast<uint8_t>(dtype));
}

}  // namespace

void write_tensor_file(std::ostream& out, const TensorFile& file) {
  out.write(kMagic, 4);
  put_le<uint32_t>(out, kCheckpointVersion);
  for (const auto& [name, blob] : file.blobs) {
    put_header(out, name, {blob.size()}, DType::Bytes);
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  }
  for (const auto& [name, t] : file.tensors) {
    std::vector<uint64_t> dims(t.shape().begin(), t.shape().end());
    put_header(out, name, dims, DType::F64);
    for (Real x : t.values()) put_le<uint64_t>(out, std::bit_cast<uint64_t>(x));
  }
  if (!out) throw FormatError("failed writing checkpoint");
}

TensorFile read_tensor_file(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw FormatError("not an NMTF checkpoint");
  const auto version = require_le<uint32_t>(in, "version");
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));

  TensorFile file;
  uint32_t name_len;
  while (get_le(in, name_len)) {
    std::string name(name_len, '\0');
    if (!in.read(name.data(), name_len)) throw FormatError("truncated record name");
    const auto rank = require_le<uint32_t>(in, "rank");
    if (rank > 2) throw FormatError("record " + name + " has rank " + std::to_string(rank));
    Shape shape;
    for (uint32_t i = 0; i < rank; ++i) shape.push_back(static_cast<int64_t>(require_le<uint64_t>(in, "dims")));
    const auto dtype = static_cast<DType>(require_le<uint8_t>(in, "dtype"));
    const int64_t count = shape_size(shape);
    switch (dtype) {
      case DType::Bytes: {
        std::string blob(static_cast<size_t>(count), '\0');
        if (!in.read(blob.data(), count)) throw FormatError("truncated blob " + name);
        file.blobs[name] = std::move(blob);
        break;
      }
      case DType::F64: {
        std::vector<Real> data(static_cast<size_t>(count));
        for (auto& x : data) x = std::bit_cast<double>(require_le<uint64_t>(in, "f64 payload"));
        file.tensors[name] = Tensor(shape, std::move(data));
        break;
      }
      case DType::F32: {
        std::vector<Real> data(static_cast<size_t>(count));
        for (auto& x : data) x = std::bit_cast<float>(require_le<uint32_t>(in, "f32 payload"));
        file.tensors[name] = Tensor(shape, std::move(data));
        break;
      }
      default:
        throw FormatError("unknown dtype tag in record " + name);
    }
  }
  return file;
}

void save_tensor_file(const std::filesystem::path& path, const TensorFile& file) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open " + tmp.string());
    write_tensor_file(out, file);
  }
  std::filesystem::rename(tmp, path);
}

TensorFile load_tensor_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return read_tensor_file(in);
}

}  // namespace nmtforge
