#pragma once

// APBT: a small self-describing container of named, typed, shaped arrays.
//
// Layout (all integers little-endian):
//   bytes 0..3   magic "APBT"
//   u32          format version (1)
//   u32          record count
//   per record:
//     u16        name length, then name bytes (UTF-8, no terminator)
//     u8         dtype code (1 = f32, 2 = f64, 3 = u8, 4 = i64)
//     u8         rank
//     u64[rank]  dims, outermost first
//     payload    row-major element data, prod(dims) * sizeof(dtype) bytes

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace apb {

enum class DType : std::uint8_t { F32 = 1, F64 = 2, U8 = 3, I64 = 4 };

std::size_t dtype_size(DType t);

struct ArrayRecord {
  DType dtype = DType::F64;
  std::vector<std::uint64_t> shape;
  std::vector<std::uint8_t> bytes;

  std::size_t numel() const;

  static ArrayRecord from_f64(std::span<const double> v, std::vector<std::uint64_t> shape);
  static ArrayRecord from_f32(std::span<const float> v, std::vector<std::uint64_t> shape);
  static ArrayRecord from_u8(std::span<const std::uint8_t> v, std::vector<std::uint64_t> shape);
  static ArrayRecord from_i64(std::span<const std::int64_t> v, std::vector<std::uint64_t> shape);
  static ArrayRecord from_string(const std::string& s);

  // Converting accessors; any numeric dtype may be read as double/float.
  std::vector<double> to_f64() const;
  std::vector<float> to_f32() const;
  std::vector<std::int64_t> to_i64() const;
  std::string to_string() const;
};

// Ordered by name so serialization is byte-stable.
using ArrayBundle = std::map<std::string, ArrayRecord>;

std::vector<std::uint8_t> encode_bundle(const ArrayBundle& bundle);
ArrayBundle decode_bundle(std::span<const std::uint8_t> data);

void save_bundle(const std::filesystem::path& path, const ArrayBundle& bundle);
ArrayBundle load_bundle(const std::filesystem::path& path);

const ArrayRecord& require(const ArrayBundle& bundle, const std::string& name);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace apb
