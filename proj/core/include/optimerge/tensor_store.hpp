#pragma once

// Single-file tensor container: an 8-byte little-endian header length, a JSON
// header describing every tensor, then the packed little-endian data region.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace optimerge {

enum class DType : std::uint8_t { F32, F16, BF16 };

constexpr std::size_t dtype_size(DType dt) noexcept {
  return dt == DType::F32 ? 4 : 2;
}

std::string_view dtype_name(DType dt) noexcept;
/// Throws Error(MalformedHeader) for anything but "F32", "F16", "BF16".
DType parse_dtype(std::string_view name);

using Shape = std::vector<std::uint64_t>;

/// Element count of a shape. The empty shape is a scalar (1 element).
std::uint64_t shape_numel(const Shape& shape);

struct TensorMeta {
  std::string name;
  DType dtype = DType::F32;
  Shape shape;
  std::uint64_t begin = 0;
  std::uint64_t end = 0;
};

struct Tensor {
  DType dtype = DType::F32;
  Shape shape;
  std::vector<std::byte> data;

  std::uint64_t numel() const { return shape_numel(shape); }

  /// Decodes the stored elements to F32 working precision.
  std::vector<float> to_f32() const;
  static Tensor from_f32(std::span<const float> values, Shape shape, DType dtype = DType::F32);

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

/// An in-memory checkpoint. Tensors are keyed (and iterated) by name, which is
/// also the canonical on-disk order, so iteration follows ascending offsets of
/// anything this library writes.
struct TensorMap {
  std::map<std::string, Tensor, std::less<>> tensors;
  std::map<std::string, std::string, std::less<>> metadata;

  bool contains(std::string_view name) const { return tensors.find(name) != tensors.end(); }
  const Tensor& at(std::string_view name) const;
  void insert(std::string name, Tensor tensor);
  std::uint64_t parameter_count() const;

  friend bool operator==(const TensorMap&, const TensorMap&) = default;
};

/// Layout of each tensor as it will be written (ascending by name, packed from 0).
std::vector<TensorMeta> canonical_layout(const TensorMap& tm);

std::vector<std::byte> serialize_container(const TensorMap& tm);
TensorMap parse_container(std::span<const std::byte> bytes);

TensorMap read_container(const std::filesystem::path& path);
void write_container(const TensorMap& tm, const std::filesystem::path& path);

/// Element-wise conversion with round-to-nearest-even.
std::vector<std::byte> cast_tensor(std::span<const std::byte> bytes, DType from, DType to);

std::uint16_t f32_to_bf16(float value) noexcept;
float bf16_to_f32(std::uint16_t bits) noexcept;
std::uint16_t f32_to_f16(float value) noexcept;
float f16_to_f32(std::uint16_t bits) noexcept;

std::vector<std::byte> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::byte> bytes);

}  // namespace optimerge
